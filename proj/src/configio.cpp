#include "scalelab/configio.hpp"

#include <fstream>
#include <set>

namespace scalelab {

namespace {

void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("unknown key \"" + it.key() + "\" in " + where);
}

template <class T>
T get_or(const Json& j, const char* key, T fallback) {
  auto it = j.find(key);
  return it == j.end() ? fallback : it->get<T>();
}

}  // namespace

Json model_to_json(const ModelConfig& c) {
  return Json{{"activation", activation_name(c.activation)},
              {"base_width", c.base_width},
              {"d_ff", c.d_ff},
              {"d_head", c.d_head},
              {"d_model", c.d_model},
              {"dtype", dtype_name(c.dtype)},
              {"ln_eps", c.ln_eps},
              {"n_layers", c.n_layers},
              {"parametrization", parametrization_name(c.parametrization)},
              {"qk_norm", c.qk_norm},
              {"rope_base", c.rope_base},
              {"seed", c.seed},
              {"seq_len", c.seq_len},
              {"vocab_size", c.vocab_size}};
}

ModelConfig model_from_json(const Json& j) {
  check_keys(j,
             {"activation", "base_width", "d_ff", "d_head", "d_model", "dtype", "ln_eps",
              "n_layers", "parametrization", "qk_norm", "rope_base", "seed", "seq_len",
              "vocab_size"},
             "model config");
  ModelConfig c;
  c.activation = activation_from_name(get_or<std::string>(j, "activation", "gelu"));
  c.base_width = get_or<int64_t>(j, "base_width", c.base_width);
  c.d_ff = get_or<int64_t>(j, "d_ff", c.d_ff);
  c.d_head = get_or<int64_t>(j, "d_head", c.d_head);
  c.d_model = get_or<int64_t>(j, "d_model", c.d_model);
  c.dtype = dtype_from_name(get_or<std::string>(j, "dtype", "float32"));
  c.ln_eps = get_or<double>(j, "ln_eps", c.ln_eps);
  c.n_layers = get_or<int64_t>(j, "n_layers", c.n_layers);
  c.parametrization = parametrization_from_name(get_or<std::string>(j, "parametrization", "standard"));
  c.qk_norm = get_or<bool>(j, "qk_norm", c.qk_norm);
  c.rope_base = get_or<double>(j, "rope_base", c.rope_base);
  c.seed = get_or<uint64_t>(j, "seed", c.seed);
  c.seq_len = get_or<int64_t>(j, "seq_len", c.seq_len);
  c.vocab_size = get_or<int64_t>(j, "vocab_size", c.vocab_size);
  c.validate();
  return c;
}

Json optim_to_json(const OptimConfig& c) {
  return Json{{"beta1", c.beta1},
              {"beta2", c.beta2},
              {"clip_global_norm", c.clip_global_norm},
              {"eps", c.eps},
              {"grad_preproc", grad_preproc_name(c.grad_preproc)},
              {"kind", opt_kind_name(c.kind)},
              {"sgd_momentum", c.sgd_momentum},
              {"wd_mode", wd_mode_name(c.wd_mode)},
              {"weight_decay", c.weight_decay}};
}

OptimConfig optim_from_json(const Json& j) {
  check_keys(j,
             {"beta1", "beta2", "clip_global_norm", "eps", "grad_preproc", "kind", "sgd_momentum",
              "wd_mode", "weight_decay"},
             "optim config");
  OptimConfig c;
  c.kind = opt_kind_from_name(get_or<std::string>(j, "kind", "adamw"));
  if (c.kind == OptKind::lion) {
    c.beta1 = 0.9;
    c.beta2 = 0.99;
  }
  c.beta1 = get_or<double>(j, "beta1", c.beta1);
  c.beta2 = get_or<double>(j, "beta2", c.beta2);
  c.clip_global_norm = get_or<double>(j, "clip_global_norm", c.clip_global_norm);
  c.eps = get_or<double>(j, "eps", c.eps);
  c.grad_preproc = grad_preproc_from_name(get_or<std::string>(j, "grad_preproc", "none"));
  c.sgd_momentum = get_or<double>(j, "sgd_momentum", c.sgd_momentum);
  c.wd_mode = wd_mode_from_name(get_or<std::string>(j, "wd_mode", "coupled"));
  c.weight_decay = get_or<double>(j, "weight_decay", c.weight_decay);
  c.validate();
  return c;
}

Json schedule_to_json(const Schedule& s) {
  return Json{{"decay", s.decay == Schedule::Decay::constant ? "constant" : "cosine"},
              {"end_fraction", s.end_fraction},
              {"peak_lr", s.peak_lr},
              {"total_steps", s.total_steps},
              {"warmup_steps", s.warmup_steps}};
}

Schedule schedule_from_json(const Json& j) {
  check_keys(j, {"decay", "end_fraction", "peak_lr", "total_steps", "warmup_steps"}, "schedule");
  Schedule s;
  std::string decay = get_or<std::string>(j, "decay", "constant");
  if (decay == "constant")
    s.decay = Schedule::Decay::constant;
  else if (decay == "cosine")
    s.decay = Schedule::Decay::cosine;
  else
    throw ConfigError("unknown schedule decay: " + decay);
  s.end_fraction = get_or<double>(j, "end_fraction", s.end_fraction);
  s.peak_lr = get_or<double>(j, "peak_lr", s.peak_lr);
  s.total_steps = get_or<int64_t>(j, "total_steps", s.total_steps);
  s.warmup_steps = get_or<int64_t>(j, "warmup_steps", s.warmup_steps);
  return s;
}

Json run_config_to_json(const RunConfig& c) {
  return Json{{"batch", c.batch},
              {"data",
               Json{{"eval_fraction", c.data.eval_fraction},
                    {"eval_shard", c.data.eval_shard},
                    {"shard", c.data.shard},
                    {"split_seed", c.data.split_seed}}},
              {"epochs", c.epochs},
              {"eval_batches", c.eval_batches},
              {"eval_every", c.eval_every},
              {"model", model_to_json(c.model)},
              {"optim", optim_to_json(c.optim)},
              {"rule_name", c.rule_name},
              {"run_id", c.run_id},
              {"save_checkpoint", c.save_checkpoint},
              {"schedule", schedule_to_json(c.schedule)},
              {"seed", c.seed},
              {"steps", c.steps},
              {"token_budget", c.token_budget}};
}

void check_run_config_keys(const Json& j) {
  check_keys(j,
             {"batch", "data", "epochs", "eval_batches", "eval_every", "model", "optim",
              "rule_name", "run_id", "save_checkpoint", "schedule", "seed", "steps",
              "token_budget"},
             "run config");
  if (j.contains("data"))
    check_keys(j.at("data"), {"eval_fraction", "eval_shard", "shard", "split_seed"}, "data ref");
}

RunConfig run_config_from_json(const Json& j) {
  check_run_config_keys(j);
  RunConfig c;
  c.batch = get_or<int64_t>(j, "batch", c.batch);
  if (j.contains("data")) {
    const Json& d = j.at("data");
    c.data.eval_fraction = get_or<double>(d, "eval_fraction", c.data.eval_fraction);
    c.data.eval_shard = get_or<std::string>(d, "eval_shard", "");
    c.data.shard = get_or<std::string>(d, "shard", "");
    c.data.split_seed = get_or<uint64_t>(d, "split_seed", 0);
  }
  c.epochs = get_or<int64_t>(j, "epochs", c.epochs);
  c.eval_batches = get_or<int64_t>(j, "eval_batches", c.eval_batches);
  c.eval_every = get_or<int64_t>(j, "eval_every", c.eval_every);
  if (j.contains("model")) c.model = model_from_json(j.at("model"));
  if (j.contains("optim")) c.optim = optim_from_json(j.at("optim"));
  c.rule_name = get_or<std::string>(j, "rule_name", "");
  c.run_id = get_or<std::string>(j, "run_id", "");
  c.save_checkpoint = get_or<bool>(j, "save_checkpoint", false);
  if (j.contains("schedule")) c.schedule = schedule_from_json(j.at("schedule"));
  c.seed = get_or<uint64_t>(j, "seed", 0);
  c.steps = get_or<int64_t>(j, "steps", c.steps);
  c.token_budget = get_or<uint64_t>(j, "token_budget", c.token_budget);
  c.validate();
  return c;
}

Json fit_config_to_json(const FitConfig& c) {
  return Json{{"b_hi", c.b_hi},
              {"b_lo", c.b_lo},
              {"b_step", c.b_step},
              {"c_frac", c.c_frac},
              {"huber_delta", c.huber_delta},
              {"max_iters", c.max_iters},
              {"n_c", c.n_c},
              {"objective",
               c.objective == FitConfig::Objective::huber_log ? "huber_log" : "least_squares_log"},
              {"tol", c.tol}};
}

FitConfig fit_config_from_json(const Json& j) {
  check_keys(j,
             {"b_hi", "b_lo", "b_step", "c_frac", "huber_delta", "max_iters", "n_c", "objective",
              "tol"},
             "fit config");
  FitConfig c;
  std::string obj = get_or<std::string>(j, "objective", "huber_log");
  if (obj == "huber_log")
    c.objective = FitConfig::Objective::huber_log;
  else if (obj == "least_squares_log")
    c.objective = FitConfig::Objective::least_squares_log;
  else
    throw ConfigError("unknown fit objective: " + obj);
  c.b_hi = get_or<double>(j, "b_hi", c.b_hi);
  c.b_lo = get_or<double>(j, "b_lo", c.b_lo);
  c.b_step = get_or<double>(j, "b_step", c.b_step);
  c.c_frac = get_or<double>(j, "c_frac", c.c_frac);
  c.huber_delta = get_or<double>(j, "huber_delta", c.huber_delta);
  c.max_iters = get_or<int>(j, "max_iters", c.max_iters);
  c.n_c = get_or<int>(j, "n_c", c.n_c);
  c.tol = get_or<double>(j, "tol", c.tol);
  if (c.huber_delta <= 0) throw ConfigError("huber_delta must be > 0");
  if (c.n_c < 1) throw ConfigError("fit grid must be nonempty");
  return c;
}

Json run_record_to_json(const RunRecord& r) {
  return Json{{"batch", r.batch},
              {"best_eval_loss", r.best_eval_loss},
              {"d_model", r.d_model},
              {"digest", r.digest},
              {"final_eval_loss", r.final_eval_loss},
              {"final_train_loss", r.final_train_loss},
              {"flops_total", r.flops_total},
              {"max_attn_logit_overall", r.max_attn_logit_overall},
              {"metrics_path", r.metrics_path},
              {"n_layers", r.n_layers},
              {"note", r.note},
              {"peak_lr", r.peak_lr},
              {"rule_name", r.rule_name},
              {"run_id", r.run_id},
              {"seed", r.seed},
              {"seq_len", r.seq_len},
              {"status", r.status},
              {"steps_completed", r.steps_completed},
              {"steps_planned", r.steps_planned},
              {"timestamp", r.timestamp},
              {"tokens_seen", r.tokens_seen},
              {"tokens_target", r.tokens_target},
              {"vocab_size", r.vocab_size},
              {"weight_decay", r.weight_decay}};
}

RunRecord run_record_from_json(const Json& j) {
  RunRecord r;
  r.batch = get_or<int64_t>(j, "batch", 0);
  r.best_eval_loss = get_or<double>(j, "best_eval_loss", 0);
  r.d_model = get_or<int64_t>(j, "d_model", 0);
  r.digest = get_or<std::string>(j, "digest", "");
  r.final_eval_loss = get_or<double>(j, "final_eval_loss", 0);
  r.final_train_loss = get_or<double>(j, "final_train_loss", 0);
  r.flops_total = get_or<double>(j, "flops_total", 0);
  r.max_attn_logit_overall = get_or<double>(j, "max_attn_logit_overall", 0);
  r.metrics_path = get_or<std::string>(j, "metrics_path", "");
  r.n_layers = get_or<int64_t>(j, "n_layers", 0);
  r.note = get_or<std::string>(j, "note", "");
  r.peak_lr = get_or<double>(j, "peak_lr", 0);
  r.rule_name = get_or<std::string>(j, "rule_name", "");
  r.run_id = get_or<std::string>(j, "run_id", "");
  r.seed = get_or<uint64_t>(j, "seed", 0);
  r.seq_len = get_or<int64_t>(j, "seq_len", 0);
  r.status = get_or<std::string>(j, "status", "");
  r.steps_completed = get_or<int64_t>(j, "steps_completed", 0);
  r.steps_planned = get_or<int64_t>(j, "steps_planned", 0);
  r.timestamp = get_or<std::string>(j, "timestamp", "");
  r.tokens_seen = get_or<uint64_t>(j, "tokens_seen", 0);
  r.tokens_target = get_or<uint64_t>(j, "tokens_target", 0);
  r.vocab_size = get_or<int64_t>(j, "vocab_size", 0);
  r.weight_decay = get_or<double>(j, "weight_decay", 0);
  return r;
}

Json power_law_to_json(const PowerLaw& l) {
  return Json{{"a", l.a}, {"b", l.b}, {"c", l.c}};
}

PowerLaw power_law_from_json(const Json& j) {
  check_keys(j, {"a", "b", "c"}, "power law");
  return PowerLaw{j.at("a").get<double>(), j.at("b").get<double>(), j.at("c").get<double>()};
}

Json fit_report_to_json(const FitReport& r) {
  return Json{{"converged", r.converged},
              {"law", power_law_to_json(r.law)},
              {"n_starts", r.n_starts},
              {"objective_value", r.objective_value},
              {"residuals", r.residuals}};
}

Json crossover_report_to_json(const CrossoverReport& r) {
  Json j{{"degenerate", r.degenerate},
         {"found", r.found},
         {"kind", r.kind == CrossoverReport::Kind::fitted ? "fitted" : "empirical"}};
  if (r.kind == CrossoverReport::Kind::fitted) {
    if (r.found) j["f_star"] = r.f_star;
  } else {
    if (r.found) {
      j["bracket"] = Json::array({r.f_lo, r.f_hi});
      j["persistent"] = r.persistent;
    }
  }
  return j;
}

Json extrapolation_report_to_json(const ExtrapolationReport& r) {
  Json holdout = Json::array();
  for (const HoldoutPoint& h : r.holdout)
    holdout.push_back(Json{{"f", h.f},
                           {"observed", h.observed},
                           {"predicted", h.predicted},
                           {"rel_dev", h.rel_dev}});
  Json j{{"deviation_tol", r.deviation_tol},
         {"f_max_fit", r.f_max_fit},
         {"fit_label", r.fit_label},
         {"holdout", holdout},
         {"law", power_law_to_json(r.law)},
         {"prefix_points", r.prefix_points}};
  if (std::isfinite(r.onset_f)) {
    j["deviation_onset_f"] = r.onset_f;
    j["extrapolation_multiple"] = r.extrapolation_multiple;
  } else {
    j["deviation_onset_f"] = nullptr;
    j["extrapolation_multiple"] = nullptr;
  }
  return j;
}

void apply_overrides(Json& j, const std::vector<std::string>& overrides) {
  for (const std::string& ov : overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override must look like dotted.key=value, got: " + ov);
    std::string path = ov.substr(0, eq);
    std::string raw = ov.substr(eq + 1);
    Json value;
    try {
      value = Json::parse(raw);
    } catch (...) {
      value = raw;  // bare string
    }
    Json* node = &j;
    size_t pos = 0;
    while (true) {
      size_t dot = path.find('.', pos);
      std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
      if (dot == std::string::npos) {
        (*node)[key] = value;
        break;
      }
      if (!node->contains(key)) (*node)[key] = Json::object();
      node = &(*node)[key];
      pos = dot + 1;
    }
  }
}

std::vector<RunConfig> expand_sweep(const Json& spec) {
  check_keys(spec, {"axes", "base", "seeds"}, "sweep spec");
  if (!spec.contains("base")) throw ConfigError("sweep spec needs a \"base\" run config");
  Json base = spec.at("base");
  check_run_config_keys(base);
  std::vector<std::pair<std::string, Json>> axes;
  if (spec.contains("axes")) {
    for (auto it = spec.at("axes").begin(); it != spec.at("axes").end(); ++it) {
      if (!it.value().is_array() || it.value().empty())
        throw ConfigError("sweep axis \"" + it.key() + "\" must be a nonempty array");
      axes.emplace_back(it.key(), it.value());
    }
  }
  std::vector<uint64_t> seeds = spec.value("seeds", std::vector<uint64_t>{0});
  if (seeds.empty()) seeds.push_back(0);

  std::vector<RunConfig> out;
  std::vector<size_t> idx(axes.size(), 0);
  while (true) {
    Json cfg = base;
    std::vector<std::string> ovs;
    for (size_t i = 0; i < axes.size(); ++i)
      ovs.push_back(axes[i].first + "=" + axes[i].second[idx[i]].dump());
    apply_overrides(cfg, ovs);
    for (uint64_t s : seeds) {
      Json with_seed = cfg;
      with_seed["seed"] = s;
      out.push_back(run_config_from_json(with_seed));
    }
    // advance the odometer
    size_t k = 0;
    for (; k < axes.size(); ++k) {
      if (++idx[k] < axes[k].second.size()) break;
      idx[k] = 0;
    }
    if (k == axes.size()) break;
    if (axes.empty()) break;
  }
  return out;
}

Json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path);
  try {
    return Json::parse(f);
  } catch (const std::exception& e) {
    throw ConfigError("bad JSON in " + path + ": " + e.what());
  }
}

void write_json_file(const std::string& path, const Json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path);
  f << j.dump(2) << "\n";
}

}  // namespace scalelab
