#pragma once

#include <optional>
#include <string>
#include <vector>

#include "scalelab/model.hpp"
#include "scalelab/tensor.hpp"

namespace scalelab {

enum class OptKind { adamw, lion, sgd };
enum class WdMode { none, l2_gradient, coupled, independent };
enum class GradPreproc { none, global_rms, per_tensor_rms };

const char* opt_kind_name(OptKind k);
OptKind opt_kind_from_name(const std::string& s);
const char* wd_mode_name(WdMode m);
WdMode wd_mode_from_name(const std::string& s);
const char* grad_preproc_name(GradPreproc p);
GradPreproc grad_preproc_from_name(const std::string& s);

struct OptimConfig {
  OptKind kind = OptKind::adamw;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-20;
  WdMode wd_mode = WdMode::coupled;
  double weight_decay = 0.1;  // lambda; for l2_gradient this is the L2 coefficient
  GradPreproc grad_preproc = GradPreproc::none;
  double clip_global_norm = 0;  // 0 = off
  double sgd_momentum = 0;

  void validate() const;
};

struct Schedule {
  enum class Decay { constant, cosine };
  double peak_lr = 0;
  int64_t warmup_steps = 0;
  Decay decay = Decay::constant;
  double end_fraction = 1.0;  // cosine end value as a fraction of peak
  int64_t total_steps = 0;

  // Linear warmup to peak, then the chosen decay. `step` runs 1..total_steps
  // during training; lr_at(0) is 0 when warmup is enabled.
  double lr_at(int64_t step) const;
  void validate() const;
};

// First/second moments (adamw) or momentum (lion/sgd), shaped like the params.
struct OptState {
  int64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static OptState init(const ParamSet& params, const OptimConfig& cfg);
};

// Divides gradients by root-mean-square, globally over the concatenated
// gradient vector or per tensor; RMS floored at 1e-12 so zero gradients
// pass through unchanged.
void preprocess_grads(std::vector<Tensor>& grads, GradPreproc mode);

// Classical L2: grads += lambda * params, applied before optimizer moments.
void apply_l2(std::vector<Tensor>& grads, const ParamSet& params, double lambda_l2);

// Scales all gradients by min(1, clip/||g||_2) over the global L2 norm.
// Returns the pre-clip norm.
double clip_global_norm(std::vector<Tensor>& grads, double clip);

double grad_global_rms(const std::vector<Tensor>& grads);

// One optimizer step at learning rate `lr` (per-tensor muP multipliers from
// the ParamSet apply on top). Weight decay reads the pre-step parameters:
// coupled subtracts lr_eff*lambda*theta, independent subtracts lambda*theta.
void optim_step(const OptimConfig& cfg, OptState& state, ParamSet& params,
                const std::vector<Tensor>& grads, double lr);

// The full documented update pipeline: clip -> rms-normalize -> L2 ->
// moments -> decay. Returns the pre-clip global norm.
double apply_update(const OptimConfig& cfg, OptState& state, ParamSet& params,
                    std::vector<Tensor>& grads, double lr);

}  // namespace scalelab
