#include "scalelab/rules.hpp"

#include <cmath>

namespace scalelab {

uint64_t chinchilla_tokens(int64_t d_model, int64_t n_layers, int64_t vocab) {
  if (d_model < 1 || n_layers < 1 || vocab < 0) throw ConfigError("chinchilla_tokens: bad inputs");
  if (d_model > (1LL << 20)) throw ConfigError("chinchilla_tokens: width beyond 2^20 unsupported");
  unsigned __int128 n = static_cast<unsigned __int128>(12) * d_model * d_model * n_layers +
                        static_cast<unsigned __int128>(d_model) * vocab;
  unsigned __int128 tokens = 20 * n;
  if (tokens > static_cast<unsigned __int128>(UINT64_MAX))
    throw ConfigError("chinchilla_tokens: overflow");
  return static_cast<uint64_t>(tokens);
}

unsigned __int128 flops_exact(uint64_t n_params, uint64_t tokens) {
  return static_cast<unsigned __int128>(6) * n_params * tokens;
}

double flops_estimate(uint64_t n_params, uint64_t tokens) {
  return 6.0 * static_cast<double>(n_params) * static_cast<double>(tokens);
}

std::string u128_str(unsigned __int128 v) {
  if (v == 0) return "0";
  std::string s;
  while (v > 0) {
    s.insert(s.begin(), static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  return s;
}

int64_t WidthDepthPolicy::layers_for(int64_t d_model) const {
  if (kind == Kind::fixed_depth) return depth;
  // round to nearest even integer, at least 2
  double l = static_cast<double>(d_model) * aspect_depth / aspect_width;
  int64_t even = 2 * static_cast<int64_t>(std::llround(l / 2.0));
  return std::max<int64_t>(2, even);
}

double lr_for(const LrRule& rule, int64_t d_model, int64_t n_layers) {
  if (d_model < 1 || n_layers < 1) throw ConfigError("lr_for: bad dimensions");
  switch (rule.kind) {
    case LrRule::Kind::constant:
      return rule.value;
    case LrRule::Kind::inv_width:
      return rule.coef / static_cast<double>(d_model);
    case LrRule::Kind::depth_corrected:
      return rule.coef / static_cast<double>(d_model) *
             std::pow(rule.base_layers / static_cast<double>(n_layers), rule.exponent) *
             rule.factor;
  }
  return 0;
}

std::pair<double, WdMode> wd_for(const WdRule& rule, int64_t d_model) {
  if (d_model < 1) throw ConfigError("wd_for: bad width");
  switch (rule.kind) {
    case WdRule::Kind::constant:
      return {rule.value, rule.mode};
    case WdRule::Kind::scaled_inv_width:
      return {rule.coef / static_cast<double>(d_model), WdMode::independent};
    case WdRule::Kind::mup_independent:
      return {rule.value, WdMode::independent};
  }
  return {0, WdMode::none};
}

std::vector<std::pair<int64_t, int64_t>> width_ladder(const std::string& preset) {
  if (preset == "s51") {
    std::vector<std::pair<int64_t, int64_t>> out;
    for (int64_t k : {1, 2, 3, 4, 6, 8, 12, 16, 20, 24, 32, 40, 48})
      out.emplace_back(128 * k, 512 * k);
    return out;
  }
  if (preset == "desk") {
    // scaled-down ladder for desk experiments
    std::vector<std::pair<int64_t, int64_t>> out;
    for (int64_t d : {64, 128, 192, 256, 384, 512})
      out.emplace_back(d, 4 * d);
    return out;
  }
  throw ConfigError("unknown width ladder preset: " + preset);
}

BudgetPoint materialize(const ScalingRule& rule, int64_t d_model, int64_t vocab, int64_t seq_len,
                        Activation activation) {
  if (d_model < 1 || vocab < 2 || seq_len < 2) throw ConfigError("materialize: bad inputs");
  if (rule.batch < 1) throw ConfigError("materialize: batch must be >= 1");
  BudgetPoint p;
  p.d_model = d_model;
  p.n_layers = rule.width_depth.layers_for(d_model);
  p.d_ff = (activation == Activation::gelu ? 4 : 6) * d_model;
  p.n_backbone = 12 * d_model * d_model * p.n_layers;
  p.batch = rule.batch;
  if (rule.tokens.kind == TokenPolicy::Kind::chinchilla) {
    p.tokens = chinchilla_tokens(d_model, p.n_layers, vocab);
  } else {
    if (rule.tokens.steps < 1)
      throw ConfigError("materialize: fixed_steps token policy needs steps >= 1");
    p.tokens = static_cast<uint64_t>(rule.tokens.steps) * static_cast<uint64_t>(rule.batch) *
               static_cast<uint64_t>(seq_len);
  }
  uint64_t tokens_per_step = static_cast<uint64_t>(rule.batch) * static_cast<uint64_t>(seq_len);
  p.steps = static_cast<int64_t>((p.tokens + tokens_per_step - 1) / tokens_per_step);
  p.lr = lr_for(rule.lr, d_model, p.n_layers);
  auto [wd, mode] = wd_for(rule.wd, d_model);
  p.weight_decay = wd * rule.wd_multiplier;
  p.wd_mode = mode;
  p.flops = flops_estimate(static_cast<uint64_t>(p.n_backbone), p.tokens);
  // SR-space constraint: f = 72 D^2 L * tokens, identically 6 * (12 D^2 L) * tokens
  unsigned __int128 lhs = flops_exact(static_cast<uint64_t>(p.n_backbone), p.tokens);
  unsigned __int128 rhs = static_cast<unsigned __int128>(72) * d_model * d_model *
                          static_cast<unsigned __int128>(p.n_layers) * p.tokens;
  if (lhs != rhs) throw NumericError("materialize: flops constraint violated");
  return p;
}

RulePreset rule_preset(const std::string& name) {
  RulePreset p;
  ScalingRule& r = p.rule;
  r.name = name;
  if (name == "blue-const-lr") {
    // constant LR = 2/1024 at fixed depth 6, 200k steps
    r.lr = {LrRule::Kind::constant, 2.0 / 1024.0};
    r.wd = {WdRule::Kind::constant, 0.1, 0.2, WdMode::coupled};
    r.tokens = {TokenPolicy::Kind::fixed_steps, 200000};
    r.batch = 256;
    return p;
  }
  if (name == "red-inv-width") {
    r.lr.kind = LrRule::Kind::inv_width;
    r.wd = {WdRule::Kind::constant, 0.1, 0.2, WdMode::coupled};
    r.tokens = {TokenPolicy::Kind::fixed_steps, 200000};
    r.batch = 256;
    return p;
  }
  if (name == "mup-const-wd") {
    // muP with width-independent weight decay and base-model LR
    r.lr = {LrRule::Kind::constant, 0.0055};
    r.wd = {WdRule::Kind::mup_independent, 0.000566};
    r.tokens.kind = TokenPolicy::Kind::chinchilla;
    p.parametrization = Parametrization::mup;
    return p;
  }
  if (name == "red-scaled-wd") {
    r.lr.kind = LrRule::Kind::inv_width;
    r.wd.kind = WdRule::Kind::scaled_inv_width;
    r.tokens.kind = TokenPolicy::Kind::chinchilla;
    return p;
  }
  if (name == "blue-geglu-gradnorm") {
    // geglu F=6D, 4x weight decay, gradient RMS normalization
    r.width_depth.kind = WidthDepthPolicy::Kind::fixed_aspect;
    r.lr.kind = LrRule::Kind::depth_corrected;
    r.wd.kind = WdRule::Kind::scaled_inv_width;
    r.wd_multiplier = 4.0;
    r.tokens.kind = TokenPolicy::Kind::chinchilla;
    p.activation = Activation::geglu;
    return p;
  }
  if (name == "red-depth-corrected") {
    r.width_depth.kind = WidthDepthPolicy::Kind::fixed_aspect;
    r.lr.kind = LrRule::Kind::depth_corrected;
    r.wd.kind = WdRule::Kind::scaled_inv_width;
    r.tokens.kind = TokenPolicy::Kind::chinchilla;
    return p;
  }
  throw ConfigError("unknown rule preset: " + name);
}

std::vector<std::string> rule_preset_names() {
  return {"blue-const-lr",  "red-inv-width",       "mup-const-wd",
          "red-scaled-wd",  "blue-geglu-gradnorm", "red-depth-corrected"};
}

}  // namespace scalelab
