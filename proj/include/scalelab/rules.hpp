#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "scalelab/model.hpp"
#include "scalelab/optim.hpp"

namespace scalelab {

// ---- compute accounting -----------------------------------------------------

// Chinchilla-optimal token budget: 20 * (12 D^2 L + D V), exact integers.
uint64_t chinchilla_tokens(int64_t d_model, int64_t n_layers, int64_t vocab);

// F = 6 N D. Double estimate plus an exact wide-integer mode.
double flops_estimate(uint64_t n_params, uint64_t tokens);
unsigned __int128 flops_exact(uint64_t n_params, uint64_t tokens);
std::string u128_str(unsigned __int128 v);

// ---- the scaling-rule space ---------------------------------------------------

struct LrRule {
  enum class Kind { constant, inv_width, depth_corrected };
  Kind kind = Kind::inv_width;
  double value = 0;       // constant
  double coef = 2.0;      // inv_width / depth_corrected numerator
  double exponent = 0.675;  // depth_corrected: (base_layers/L)^exponent
  double base_layers = 6;
  double factor = 1.189207115002721;  // depth_corrected: 2^0.25
};

struct WdRule {
  enum class Kind { constant, scaled_inv_width, mup_independent };
  Kind kind = Kind::constant;
  double value = 0.1;   // constant / mup_independent lambda
  double coef = 0.2;    // scaled_inv_width: lambda = coef / D  (0.1 * 2/D)
  WdMode mode = WdMode::coupled;  // constant defaults to coupled; others independent
};

struct WidthDepthPolicy {
  enum class Kind { fixed_depth, fixed_aspect };
  Kind kind = Kind::fixed_depth;
  int64_t depth = 6;
  double aspect_width = 512, aspect_depth = 6;  // D/L ratio

  int64_t layers_for(int64_t d_model) const;
};

struct TokenPolicy {
  enum class Kind { chinchilla, fixed_steps };
  Kind kind = Kind::chinchilla;
  int64_t steps = 0;  // fixed_steps
};

struct ScalingRule {
  std::string name;
  WidthDepthPolicy width_depth;
  LrRule lr;
  WdRule wd;
  double wd_multiplier = 1.0;
  TokenPolicy tokens;
  int64_t batch = 256;
  int64_t seq_len = 512;
};

// One materialized point on a rule's scaling curve.
struct BudgetPoint {
  int64_t d_model = 0, n_layers = 0, d_ff = 0;
  int64_t n_backbone = 0;  // 12 D^2 L
  uint64_t tokens = 0;
  int64_t batch = 0;
  int64_t steps = 0;
  double lr = 0;
  double weight_decay = 0;
  WdMode wd_mode = WdMode::coupled;
  double flops = 0;  // 6 N_backbone * tokens
};

double lr_for(const LrRule& rule, int64_t d_model, int64_t n_layers);
std::pair<double, WdMode> wd_for(const WdRule& rule, int64_t d_model);

// Named width ladders: "s51" is (D, F) = (128k, 512k) over
// k in {1,2,3,4,6,8,12,16,20,24,32,40,48}.
std::vector<std::pair<int64_t, int64_t>> width_ladder(const std::string& preset);

// Fills a BudgetPoint for the given width; F comes from the activation
// default. Asserts the constraint f = 72 D^2 L * tokens in integer mode.
BudgetPoint materialize(const ScalingRule& rule, int64_t d_model, int64_t vocab, int64_t seq_len,
                        Activation activation = Activation::gelu);

// Named rule presets with the model-template settings they imply.
struct RulePreset {
  ScalingRule rule;
  Parametrization parametrization = Parametrization::standard;
  Activation activation = Activation::gelu;
  bool qk_norm = true;
};

RulePreset rule_preset(const std::string& name);
std::vector<std::string> rule_preset_names();

}  // namespace scalelab
