#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "scalelab/configio.hpp"
#include "scalelab/graph.hpp"
#include "scalelab/harness.hpp"
#include "scalelab/lawfit.hpp"
#include "scalelab/rules.hpp"

namespace py = pybind11;
using namespace scalelab;

namespace {

Json py_to_json(const py::handle& obj) {
  if (obj.is_none()) return nullptr;
  if (py::isinstance<py::bool_>(obj)) return obj.cast<bool>();
  if (py::isinstance<py::int_>(obj)) return obj.cast<int64_t>();
  if (py::isinstance<py::float_>(obj)) return obj.cast<double>();
  if (py::isinstance<py::str>(obj)) return obj.cast<std::string>();
  if (py::isinstance<py::dict>(obj)) {
    Json j = Json::object();
    for (auto item : obj.cast<py::dict>())
      j[item.first.cast<std::string>()] = py_to_json(item.second);
    return j;
  }
  if (py::isinstance<py::list>(obj) || py::isinstance<py::tuple>(obj)) {
    Json j = Json::array();
    for (auto item : obj.cast<py::sequence>()) j.push_back(py_to_json(item));
    return j;
  }
  throw ConfigError("unsupported python value in config");
}

py::object json_to_py(const Json& j) {
  switch (j.type()) {
    case Json::value_t::null: return py::none();
    case Json::value_t::boolean: return py::bool_(j.get<bool>());
    case Json::value_t::number_integer: return py::int_(j.get<int64_t>());
    case Json::value_t::number_unsigned: return py::int_(j.get<uint64_t>());
    case Json::value_t::number_float: return py::float_(j.get<double>());
    case Json::value_t::string: return py::str(j.get<std::string>());
    case Json::value_t::array: {
      py::list out;
      for (const auto& v : j) out.append(json_to_py(v));
      return out;
    }
    case Json::value_t::object: {
      py::dict out;
      for (auto it = j.begin(); it != j.end(); ++it) out[py::str(it.key())] = json_to_py(it.value());
      return out;
    }
    default: return py::none();
  }
}

std::vector<CurvePoint> to_curve(const std::vector<double>& f, const std::vector<double>& loss) {
  if (f.size() != loss.size()) throw ConfigError("f and loss must have equal length");
  std::vector<CurvePoint> pts;
  for (size_t i = 0; i < f.size(); ++i) pts.push_back({f[i], loss[i]});
  return pts;
}

PackedBatch batch_from_arrays(const py::array_t<int32_t>& inputs,
                              const py::array_t<int32_t>& targets) {
  if (inputs.ndim() != 2 || targets.ndim() != 2) throw ConfigError("batch arrays must be (B, S)");
  if (inputs.shape(0) != targets.shape(0) || inputs.shape(1) != targets.shape(1))
    throw ConfigError("inputs/targets shapes differ");
  PackedBatch b;
  b.batch = inputs.shape(0);
  b.seq = inputs.shape(1);
  auto iu = inputs.unchecked<2>();
  auto tu = targets.unchecked<2>();
  for (py::ssize_t r = 0; r < iu.shape(0); ++r)
    for (py::ssize_t t = 0; t < iu.shape(1); ++t) {
      b.inputs.push_back(iu(r, t));
      b.targets.push_back(tu(r, t));
    }
  return b;
}

// Thin model handle for python: config dict + seed -> loss on numpy batches.
class PyModel {
 public:
  PyModel(const py::dict& config, uint64_t seed)
      : model_(model_from_json(py_to_json(config))), params_(model_.init(seed)) {}

  double loss(const py::array_t<int32_t>& inputs, const py::array_t<int32_t>& targets) const {
    return model_.loss(params_, batch_from_arrays(inputs, targets)).loss;
  }

  py::dict loss_full(const py::array_t<int32_t>& inputs,
                     const py::array_t<int32_t>& targets) const {
    ForwardResult r = model_.loss(params_, batch_from_arrays(inputs, targets), true);
    py::dict out;
    out["loss"] = r.loss;
    out["max_attn_logit"] = r.aux.max_attn_logit;
    out["layer_activation_rms"] = r.aux.layer_activation_rms;
    out["per_position_loss"] = r.aux.per_position_loss;
    return out;
  }

  int64_t n_params() const { return params_.total_params(); }
  double params_rms() const { return params_.global_rms(); }
  std::vector<std::string> param_names() const { return params_.names; }

 private:
  Transformer model_;
  ParamSet params_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "scalelab core: transformer scaling-rule laboratory";
  m.attr("__version__") = "0.1.0";

  // translators run newest-first: register the base first so subclass
  // translators take precedence
  py::register_exception<Error>(m, "ScalelabError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);

  // ---- compute accounting and scaling rules ----
  m.def("chinchilla_tokens", &chinchilla_tokens, py::arg("d_model"), py::arg("n_layers"),
        py::arg("vocab"), "Chinchilla-optimal token budget: 20 * (12 D^2 L + D V)");
  m.def("flops_estimate", &flops_estimate, py::arg("n_params"), py::arg("tokens"),
        "Training compute estimate 6 N D");
  m.def(
      "param_count",
      [](int64_t d_model, int64_t n_layers, int64_t vocab, const std::string& activation,
         bool qk_norm) {
        ModelConfig c;
        c.d_model = d_model;
        c.n_layers = n_layers;
        c.vocab_size = vocab;
        c.activation = activation_from_name(activation);
        c.qk_norm = qk_norm;
        c.d_head = d_model % 64 == 0 ? 64 : d_model;
        ParamCounts pc = param_count(c);
        py::dict out;
        out["backbone_exact"] = pc.backbone_exact;
        out["backbone_approx"] = pc.backbone_approx;
        out["embed_plus_head"] = pc.embed_plus_head;
        return out;
      },
      py::arg("d_model"), py::arg("n_layers"), py::arg("vocab") = 32101,
      py::arg("activation") = "gelu", py::arg("qk_norm") = true);
  m.def("width_ladder", &width_ladder, py::arg("preset") = "s51");
  m.def("rule_presets", &rule_preset_names);
  m.def(
      "materialize_preset",
      [](const std::string& name, int64_t d_model, int64_t vocab, int64_t seq_len) {
        RulePreset p = rule_preset(name);
        BudgetPoint pt = materialize(p.rule, d_model, vocab, seq_len, p.activation);
        py::dict out;
        out["d_model"] = pt.d_model;
        out["n_layers"] = pt.n_layers;
        out["d_ff"] = pt.d_ff;
        out["n_backbone"] = pt.n_backbone;
        out["tokens"] = pt.tokens;
        out["batch"] = pt.batch;
        out["steps"] = pt.steps;
        out["lr"] = pt.lr;
        out["weight_decay"] = pt.weight_decay;
        out["wd_mode"] = wd_mode_name(pt.wd_mode);
        out["flops"] = pt.flops;
        return out;
      },
      py::arg("name"), py::arg("d_model"), py::arg("vocab") = 32101, py::arg("seq_len") = 512);

  // ---- power-law fitting and crossover ----
  m.def(
      "fit_power_law",
      [](const std::vector<double>& f, const std::vector<double>& loss,
         const std::string& objective, double huber_delta) {
        FitConfig cfg;
        cfg.objective = objective == "least_squares_log" ? FitConfig::Objective::least_squares_log
                                                         : FitConfig::Objective::huber_log;
        cfg.huber_delta = huber_delta;
        FitReport rep = fit_power_law(to_curve(f, loss), cfg);
        return json_to_py(fit_report_to_json(rep));
      },
      py::arg("f"), py::arg("loss"), py::arg("objective") = "huber_log",
      py::arg("huber_delta") = 1e-3);
  m.def(
      "predict_power_law",
      [](double a, double b, double c, double f) { return PowerLaw{a, b, c}.predict(f); },
      py::arg("a"), py::arg("b"), py::arg("c"), py::arg("f"));
  m.def(
      "crossover_fitted",
      [](double a1, double b1, double c1, double a2, double b2, double c2, double lo, double hi) {
        return json_to_py(
            crossover_report_to_json(crossover_fitted({a1, b1, c1}, {a2, b2, c2}, lo, hi)));
      },
      py::arg("a1"), py::arg("b1"), py::arg("c1"), py::arg("a2"), py::arg("b2"), py::arg("c2"),
      py::arg("lo"), py::arg("hi"));
  m.def(
      "crossover_empirical",
      [](const std::vector<double>& fa, const std::vector<double>& la,
         const std::vector<double>& fb, const std::vector<double>& lb, int persistence) {
        return json_to_py(
            crossover_report_to_json(crossover_empirical(to_curve(fa, la), to_curve(fb, lb), persistence)));
      },
      py::arg("f_a"), py::arg("loss_a"), py::arg("f_b"), py::arg("loss_b"),
      py::arg("persistence") = 2);
  m.def(
      "detect_instability",
      [](const std::vector<int64_t>& steps, const std::vector<double>& losses, int64_t window,
         double threshold) {
        if (steps.size() != losses.size()) throw ConfigError("steps/losses length mismatch");
        std::vector<std::pair<int64_t, double>> series;
        for (size_t i = 0; i < steps.size(); ++i) series.emplace_back(steps[i], losses[i]);
        py::list out;
        for (const SpikeInterval& s : detect_instability(series, window, threshold)) {
          py::dict d;
          d["start_step"] = s.start_step;
          d["end_step"] = s.end_step;
          d["peak_excess"] = s.peak_excess;
          out.append(d);
        }
        return out;
      },
      py::arg("steps"), py::arg("losses"), py::arg("window") = 200, py::arg("threshold") = 0.15);

  // ---- synthetic data ----
  m.def(
      "gen_synthetic",
      [](int64_t vocab, int order, double concentration, uint64_t seed, int64_t n_tokens) {
        SyntheticSpec spec{vocab, order, concentration, seed};
        TokenShard shard = gen_synthetic(spec, n_tokens);
        py::array_t<int32_t> arr(static_cast<py::ssize_t>(shard.tokens.size()));
        std::copy(shard.tokens.begin(), shard.tokens.end(), arr.mutable_data());
        return py::make_tuple(arr, build_chain(spec).entropy_per_token());
      },
      py::arg("vocab"), py::arg("order") = 1, py::arg("concentration") = 3.0, py::arg("seed") = 0,
      py::arg("n_tokens") = 1000000);
  m.def(
      "chain_entropy",
      [](int64_t vocab, int order, double concentration, uint64_t seed) {
        return build_chain({vocab, order, concentration, seed}).entropy_per_token();
      },
      py::arg("vocab"), py::arg("order") = 1, py::arg("concentration") = 3.0, py::arg("seed") = 0);
  m.def(
      "write_shard",
      [](const std::string& path_base, const py::array_t<int32_t>& tokens, int64_t vocab,
         const std::string& split_tag, const std::string& source, uint64_t seed) {
        TokenShard s;
        s.meta.vocab_size = vocab;
        s.meta.n_tokens = tokens.size();
        s.meta.split_tag = split_tag;
        s.meta.source = source;
        s.meta.seed = seed;
        auto u = tokens.unchecked<1>();
        s.tokens.resize(static_cast<size_t>(u.shape(0)));
        for (py::ssize_t i = 0; i < u.shape(0); ++i) s.tokens[static_cast<size_t>(i)] = u(i);
        write_shard(path_base, s);
      },
      py::arg("path_base"), py::arg("tokens"), py::arg("vocab"), py::arg("split_tag") = "train",
      py::arg("source") = "python", py::arg("seed") = 0);
  m.def(
      "load_shard",
      [](const std::string& path_base) {
        TokenShard s = load_shard(path_base);
        py::array_t<int32_t> arr(static_cast<py::ssize_t>(s.tokens.size()));
        std::copy(s.tokens.begin(), s.tokens.end(), arr.mutable_data());
        py::dict meta;
        meta["vocab_size"] = s.meta.vocab_size;
        meta["n_tokens"] = s.meta.n_tokens;
        meta["split_tag"] = s.meta.split_tag;
        meta["source"] = s.meta.source;
        meta["seed"] = s.meta.seed;
        return py::make_tuple(arr, meta);
      },
      py::arg("path_base"));
  m.def("byte_encode", [](const std::string& text) {
    std::vector<int32_t> ids = byte_encode(text);
    py::array_t<int32_t> arr(static_cast<py::ssize_t>(ids.size()));
    std::copy(ids.begin(), ids.end(), arr.mutable_data());
    return arr;
  });

  // ---- model and training ----
  py::class_<PyModel>(m, "Model")
      .def(py::init<const py::dict&, uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def("loss", &PyModel::loss, py::arg("inputs"), py::arg("targets"))
      .def("loss_full", &PyModel::loss_full, py::arg("inputs"), py::arg("targets"))
      .def_property_readonly("n_params", &PyModel::n_params)
      .def_property_readonly("params_rms", &PyModel::params_rms)
      .def_property_readonly("param_names", &PyModel::param_names);

  m.def(
      "train_run",
      [](const py::dict& config, const std::string& out_root, bool verbose) {
        RunConfig cfg = run_config_from_json(py_to_json(config));
        TrainOptions opts;
        opts.verbose = verbose;
        RunRecord rec = train_run(cfg, out_root, opts);
        return json_to_py(run_record_to_json(rec));
      },
      py::arg("config"), py::arg("out_root") = "out", py::arg("verbose") = false);
  m.def("config_digest", [](const py::dict& config) {
    return config_digest(run_config_from_json(py_to_json(config)));
  });
  m.def("rule_run_config", [](const std::string& preset, int64_t d_model, int64_t vocab,
                              int64_t seq_len, int64_t batch) {
    return json_to_py(run_config_to_json(run_config_from_preset(preset, d_model, vocab, seq_len, batch)));
  }, py::arg("preset"), py::arg("d_model"), py::arg("vocab"), py::arg("seq_len") = 512,
     py::arg("batch") = 0);
  m.def("read_ledger", [](const std::string& path) {
    py::list out;
    for (const RunRecord& r : read_ledger(path)) out.append(json_to_py(run_record_to_json(r)));
    return out;
  });
  m.def("set_blas_threads", &set_blas_threads, py::arg("n"));
}
