#include "scalelab/optim.hpp"

#include <cmath>

namespace scalelab {

const char* opt_kind_name(OptKind k) {
  switch (k) {
    case OptKind::adamw: return "adamw";
    case OptKind::lion: return "lion";
    case OptKind::sgd: return "sgd";
  }
  return "?";
}

OptKind opt_kind_from_name(const std::string& s) {
  if (s == "adamw") return OptKind::adamw;
  if (s == "lion") return OptKind::lion;
  if (s == "sgd") return OptKind::sgd;
  throw ConfigError("unknown optimizer: " + s);
}

const char* wd_mode_name(WdMode m) {
  switch (m) {
    case WdMode::none: return "none";
    case WdMode::l2_gradient: return "l2_gradient";
    case WdMode::coupled: return "coupled";
    case WdMode::independent: return "independent";
  }
  return "?";
}

WdMode wd_mode_from_name(const std::string& s) {
  if (s == "none") return WdMode::none;
  if (s == "l2_gradient") return WdMode::l2_gradient;
  if (s == "coupled") return WdMode::coupled;
  if (s == "independent") return WdMode::independent;
  throw ConfigError("unknown wd_mode: " + s);
}

const char* grad_preproc_name(GradPreproc p) {
  switch (p) {
    case GradPreproc::none: return "none";
    case GradPreproc::global_rms: return "global_rms";
    case GradPreproc::per_tensor_rms: return "per_tensor_rms";
  }
  return "?";
}

GradPreproc grad_preproc_from_name(const std::string& s) {
  if (s == "none") return GradPreproc::none;
  if (s == "global_rms") return GradPreproc::global_rms;
  if (s == "per_tensor_rms") return GradPreproc::per_tensor_rms;
  throw ConfigError("unknown grad_preproc: " + s);
}

void OptimConfig::validate() const {
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
    throw ConfigError("betas must lie in [0, 1)");
  if (eps <= 0) throw ConfigError("eps must be > 0");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (clip_global_norm < 0) throw ConfigError("clip_global_norm must be >= 0");
}

void Schedule::validate() const {
  if (peak_lr < 0) throw ConfigError("peak_lr must be >= 0");
  if (warmup_steps < 0 || total_steps < 0) throw ConfigError("negative schedule steps");
  // total_steps == 0 means "derive from the run budget"; checked again then
  if (total_steps > 0 && warmup_steps > total_steps)
    throw ConfigError("warmup longer than total_steps");
  if (end_fraction < 0 || end_fraction > 1) throw ConfigError("end_fraction must lie in [0, 1]");
}

double Schedule::lr_at(int64_t step) const {
  if (step < 0 || step > total_steps)
    throw ConfigError("schedule step " + std::to_string(step) + " outside [0, " +
                      std::to_string(total_steps) + "]");
  if (warmup_steps > 0 && step < warmup_steps)
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (decay == Decay::constant) return peak_lr;
  int64_t span = total_steps - warmup_steps;
  if (span <= 0) return peak_lr;
  double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
  double lo = end_fraction * peak_lr;
  return lo + (peak_lr - lo) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

OptState OptState::init(const ParamSet& params, const OptimConfig& cfg) {
  OptState st;
  st.m.reserve(params.size());
  for (const Tensor& t : params.tensors) st.m.push_back(Tensor::zeros(t.shape(), t.dtype()));
  if (cfg.kind == OptKind::adamw) {
    st.v.reserve(params.size());
    for (const Tensor& t : params.tensors) st.v.push_back(Tensor::zeros(t.shape(), t.dtype()));
  }
  return st;
}

double grad_global_rms(const std::vector<Tensor>& grads) {
  double ss = 0;
  int64_t n = 0;
  for (const Tensor& g : grads) {
    ss += g.sumsq();
    n += g.numel();
  }
  return n == 0 ? 0.0 : std::sqrt(ss / static_cast<double>(n));
}

namespace {

template <class T>
void scale_tensor(Tensor& t, double s) {
  auto d = t.data<T>();
  for (size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(d[i] * s);
}

void scale_any(Tensor& t, double s) {
  if (t.dtype() == Dtype::f32)
    scale_tensor<float>(t, s);
  else
    scale_tensor<double>(t, s);
}

}  // namespace

void preprocess_grads(std::vector<Tensor>& grads, GradPreproc mode) {
  if (mode == GradPreproc::none) return;
  constexpr double kFloor = 1e-12;
  if (mode == GradPreproc::global_rms) {
    double rms = std::max(grad_global_rms(grads), kFloor);
    for (Tensor& g : grads) scale_any(g, 1.0 / rms);
  } else {
    for (Tensor& g : grads) scale_any(g, 1.0 / std::max(g.rms(), kFloor));
  }
}

void apply_l2(std::vector<Tensor>& grads, const ParamSet& params, double lambda_l2) {
  if (lambda_l2 == 0) return;
  for (size_t i = 0; i < grads.size(); ++i) {
    Tensor& g = grads[i];
    const Tensor& p = params.tensors[i];
    if (g.dtype() == Dtype::f32) {
      auto gd = g.data<float>();
      auto pd = p.data<float>();
      for (size_t j = 0; j < gd.size(); ++j)
        gd[j] += static_cast<float>(lambda_l2 * pd[j]);
    } else {
      auto gd = g.data<double>();
      auto pd = p.data<double>();
      for (size_t j = 0; j < gd.size(); ++j) gd[j] += lambda_l2 * pd[j];
    }
  }
}

double clip_global_norm(std::vector<Tensor>& grads, double clip) {
  double ss = 0;
  for (const Tensor& g : grads) ss += g.sumsq();
  double norm = std::sqrt(ss);
  if (clip > 0 && norm > clip) {
    double s = clip / norm;
    for (Tensor& g : grads) scale_any(g, s);
  }
  return norm;
}

namespace {

template <class T>
void adamw_tensor(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, double lr, double beta1,
                  double beta2, double eps, double bc1, double bc2, double decay_rate) {
  auto pd = p.data<T>();
  auto gd = g.data<T>();
  auto md = m.data<T>();
  auto vd = v.data<T>();
  for (size_t i = 0; i < pd.size(); ++i) {
    double gi = gd[i];
    double mi = beta1 * md[i] + (1.0 - beta1) * gi;
    double vi = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
    md[i] = static_cast<T>(mi);
    vd[i] = static_cast<T>(vi);
    double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
    pd[i] = static_cast<T>(pd[i] - decay_rate * pd[i] - lr * update);
  }
}

template <class T>
void lion_tensor(Tensor& p, const Tensor& g, Tensor& m, double lr, double beta1, double beta2,
                 double decay_rate) {
  auto pd = p.data<T>();
  auto gd = g.data<T>();
  auto md = m.data<T>();
  for (size_t i = 0; i < pd.size(); ++i) {
    double gi = gd[i];
    double c = beta1 * md[i] + (1.0 - beta1) * gi;
    double sign = c > 0 ? 1.0 : (c < 0 ? -1.0 : 0.0);
    md[i] = static_cast<T>(beta2 * md[i] + (1.0 - beta2) * gi);
    pd[i] = static_cast<T>(pd[i] - decay_rate * pd[i] - lr * sign);
  }
}

template <class T>
void sgd_tensor(Tensor& p, const Tensor& g, Tensor& m, double lr, double momentum,
                double decay_rate) {
  auto pd = p.data<T>();
  auto gd = g.data<T>();
  auto md = m.data<T>();
  for (size_t i = 0; i < pd.size(); ++i) {
    double update;
    if (momentum > 0) {
      double mi = momentum * md[i] + static_cast<double>(gd[i]);
      md[i] = static_cast<T>(mi);
      update = mi;
    } else {
      update = gd[i];
    }
    pd[i] = static_cast<T>(pd[i] - decay_rate * pd[i] - lr * update);
  }
}

}  // namespace

void optim_step(const OptimConfig& cfg, OptState& state, ParamSet& params,
                const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != params.size()) throw ShapeError("grads/params count mismatch");
  if (lr < 0) throw ConfigError("negative learning rate");
  state.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params.tensors[i];
    const Tensor& g = grads[i];
    if (!same_shape(p, g))
      throw ShapeError("grad shape " + shape_str(g.shape()) + " != param shape " +
                       shape_str(p.shape()) + " for " + params.names[i]);
    double eff_lr = lr * params.lr_mult[i];
    double decay_rate = 0;
    if (cfg.wd_mode == WdMode::coupled)
      decay_rate = eff_lr * cfg.weight_decay;
    else if (cfg.wd_mode == WdMode::independent)
      decay_rate = cfg.weight_decay;
    switch (cfg.kind) {
      case OptKind::adamw:
        if (p.dtype() == Dtype::f32)
          adamw_tensor<float>(p, g, state.m[i], state.v[i], eff_lr, cfg.beta1, cfg.beta2, cfg.eps,
                              bc1, bc2, decay_rate);
        else
          adamw_tensor<double>(p, g, state.m[i], state.v[i], eff_lr, cfg.beta1, cfg.beta2, cfg.eps,
                               bc1, bc2, decay_rate);
        break;
      case OptKind::lion:
        if (p.dtype() == Dtype::f32)
          lion_tensor<float>(p, g, state.m[i], eff_lr, cfg.beta1, cfg.beta2, decay_rate);
        else
          lion_tensor<double>(p, g, state.m[i], eff_lr, cfg.beta1, cfg.beta2, decay_rate);
        break;
      case OptKind::sgd:
        if (p.dtype() == Dtype::f32)
          sgd_tensor<float>(p, g, state.m[i], eff_lr, cfg.sgd_momentum, decay_rate);
        else
          sgd_tensor<double>(p, g, state.m[i], eff_lr, cfg.sgd_momentum, decay_rate);
        break;
    }
    int64_t bad = -1;
    if (!p.all_finite(&bad))
      throw NumericError("non-finite parameter after update in " + params.names[i] + " at index " +
                         std::to_string(bad));
  }
}

double apply_update(const OptimConfig& cfg, OptState& state, ParamSet& params,
                    std::vector<Tensor>& grads, double lr) {
  double norm = clip_global_norm(grads, cfg.clip_global_norm);
  preprocess_grads(grads, cfg.grad_preproc);
  if (cfg.wd_mode == WdMode::l2_gradient) apply_l2(grads, params, cfg.weight_decay);
  optim_step(cfg, state, params, grads, lr);
  return norm;
}

}  // namespace scalelab
