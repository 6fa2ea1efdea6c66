#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "scalelab/configio.hpp"
#include "scalelab/graph.hpp"
#include "scalelab/harness.hpp"
#include "scalelab/lawfit.hpp"
#include "scalelab/rules.hpp"
#include "scalelab/svgplot.hpp"

namespace fs = std::filesystem;
using namespace scalelab;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string default_out_root() {
  const char* env = std::getenv("SCALELAB_OUT_ROOT");
  return env && *env ? env : "out";
}

int cmd_synth(const std::string& out_base, int64_t vocab, int order, double concentration,
              uint64_t seed, int64_t tokens, double split_eval, const std::string& text_path) {
  TokenShard shard;
  if (!text_path.empty()) {
    std::ifstream f(text_path, std::ios::binary);
    if (!f) throw DataError("cannot read text file " + text_path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    shard.tokens = byte_encode(text);
    shard.meta.vocab_size = kByteVocab;
    shard.meta.n_tokens = static_cast<int64_t>(shard.tokens.size());
    shard.meta.source = "byte-tokenizer:" + text_path;
    shard.meta.seed = 0;
    std::printf("byte-tokenized %s: %lld tokens, vocab %lld\n", text_path.c_str(),
                static_cast<long long>(shard.meta.n_tokens), static_cast<long long>(kByteVocab));
  } else {
    SyntheticSpec spec{vocab, order, concentration, seed};
    shard = gen_synthetic(spec, tokens);
    double h = build_chain(spec).entropy_per_token();
    std::printf("synthetic corpus: %lld tokens, vocab %lld, order %d, entropy %.6f nats/token\n",
                static_cast<long long>(tokens), static_cast<long long>(vocab), order, h);
  }
  fs::path parent = fs::path(out_base).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  if (split_eval > 0) {
    auto [train, eval] = split_shard(shard, split_eval, seed);
    write_shard(out_base + "-train", train);
    write_shard(out_base + "-eval", eval);
    std::printf("wrote %s-train.{bin,json} (%lld tokens) and %s-eval.{bin,json} (%lld tokens)\n",
                out_base.c_str(), static_cast<long long>(train.meta.n_tokens), out_base.c_str(),
                static_cast<long long>(eval.meta.n_tokens));
  } else {
    write_shard(out_base, shard);
    std::printf("wrote %s.{bin,json}\n", out_base.c_str());
  }
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& out_root, bool verbose, bool no_skip) {
  Json j = load_json_file(config_path);
  apply_overrides(j, overrides);
  RunConfig cfg = run_config_from_json(j);
  TrainOptions opts;
  opts.verbose = verbose;
  opts.skip_if_ledgered = !no_skip;
  RunRecord rec = train_run(cfg, out_root, opts);
  std::printf("[%s] status=%s steps=%lld final_train=%.5f final_eval=%.5f best_eval=%.5f\n",
              rec.run_id.c_str(), rec.status.c_str(), static_cast<long long>(rec.steps_completed),
              rec.final_train_loss, rec.final_eval_loss, rec.best_eval_loss);
  return rec.status == "diverged" ? 1 : 0;
}

int cmd_sweep(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& out_root, int parallelism, bool verbose) {
  Json spec = load_json_file(config_path);
  apply_overrides(spec, overrides);
  std::vector<RunConfig> grid = expand_sweep(spec);
  std::printf("sweep: %zu runs, parallelism %d\n", grid.size(), parallelism);
  std::vector<RunRecord> recs = run_sweep(grid, out_root, parallelism, verbose);
  int diverged = 0, completed = 0, failed = 0, skipped = 0;
  for (const RunRecord& r : recs) {
    if (r.status == "completed") {
      if (r.note.empty())
        ++completed;
      else
        ++skipped;
    } else if (r.status == "diverged") {
      ++diverged;
    } else {
      ++failed;
    }
  }
  std::printf("sweep done: %d completed, %d skipped, %d diverged, %d failed\n", completed, skipped,
              diverged, failed);
  if (diverged > 0)
    std::printf("warning: %d run(s) diverged; records kept in the ledger\n", diverged);
  return failed > 0 ? 2 : 0;
}

int cmd_fit(const std::string& curve_path, const std::string& config_path,
            const std::vector<std::string>& overrides, const std::string& out_path,
            const std::string& extrapolate) {
  std::vector<CurvePoint> pts = read_curve_csv(curve_path);
  FitConfig cfg;
  Json j = config_path.empty() ? Json::object() : load_json_file(config_path);
  apply_overrides(j, overrides);
  if (!j.empty()) cfg = fit_config_from_json(j);

  Json out;
  if (!extrapolate.empty()) {
    PrefixRule rule;
    if (extrapolate.rfind("k=", 0) == 0) {
      rule.kind = PrefixRule::Kind::first_k;
      rule.k = std::atoi(extrapolate.c_str() + 2);
    } else if (extrapolate.rfind("f<=", 0) == 0) {
      rule.kind = PrefixRule::Kind::f_max;
      rule.f_threshold = std::atof(extrapolate.c_str() + 3);
    } else {
      throw ConfigError("--extrapolate wants k=<n> or f<=<flops>");
    }
    ExtrapolationReport rep = extrapolation_report(pts, rule, cfg);
    out = extrapolation_report_to_json(rep);
    std::printf("fit[%s]: a=%.6g b=%.6g c=%.6g", rep.fit_label.c_str(), rep.law.a, rep.law.b,
                rep.law.c);
    if (std::isfinite(rep.onset_f))
      std::printf("  deviation onset at f=%.4g (%.1fx extrapolation)\n", rep.onset_f,
                  rep.extrapolation_multiple);
    else
      std::printf("  no deviation onset in the holdout\n");
  } else {
    FitReport rep = fit_power_law(pts, cfg);
    out = fit_report_to_json(rep);
    std::printf("fit: a=%.8g b=%.8g c=%.8g objective=%.4g (%d starts)\n", rep.law.a, rep.law.b,
                rep.law.c, rep.objective_value, rep.n_starts);
  }
  if (!out_path.empty()) {
    write_json_file(out_path, out);
    std::printf("wrote %s\n", out_path.c_str());
  }
  return 0;
}

int cmd_crossover(const std::string& a_path, const std::string& b_path, bool fitted, double lo,
                  double hi, int persistence, const std::string& out_path) {
  std::vector<CurvePoint> a = read_curve_csv(a_path);
  std::vector<CurvePoint> b = read_curve_csv(b_path);
  CrossoverReport rep;
  if (fitted) {
    PowerLaw la = fit_power_law(a).law;
    PowerLaw lb = fit_power_law(b).law;
    if (lo <= 0) lo = std::min(a.front().f, b.front().f);
    if (hi <= 0) hi = std::max(a.back().f, b.back().f) * 100.0;  // extrapolated search
    rep = crossover_fitted(la, lb, lo, hi);
    if (rep.found)
      std::printf("fitted crossover at f* = %.8g\n", rep.f_star);
    else
      std::printf("no fitted crossover in [%g, %g]%s\n", lo, hi,
                  rep.degenerate ? " (identical laws)" : "");
  } else {
    rep = crossover_empirical(a, b, persistence);
    if (rep.found)
      std::printf("empirical crossover bracket [%.8g, %.8g] (persistent over %d points)\n",
                  rep.f_lo, rep.f_hi, persistence);
    else
      std::printf("no persistent empirical crossover\n");
  }
  if (!out_path.empty()) {
    write_json_file(out_path, crossover_report_to_json(rep));
    std::printf("wrote %s\n", out_path.c_str());
  }
  return 0;
}

int cmd_report(const std::string& runs_root, const std::string& out_dir, const std::string& group,
               const std::string& metric, bool train_curves) {
  std::vector<RunRecord> recs = read_ledger(runs_root + "/ledger.jsonl");
  if (recs.empty()) throw DataError("no ledger at " + runs_root + "/ledger.jsonl");
  fs::create_directories(out_dir);

  std::vector<BestRow> best = best_by(recs, group, metric);
  {
    std::ofstream f(out_dir + "/summary.csv", std::ios::trunc);
    f << group << ",run_id," << metric << ",flops\n";
    char buf[256];
    for (const BestRow& r : best) {
      std::snprintf(buf, sizeof(buf), "%s,%s,%.10g,%.10g\n", r.group.c_str(), r.run_id.c_str(),
                    r.value, r.flops);
      f << buf;
    }
  }
  std::printf("%-16s %-40s %s\n", group.c_str(), "best run", metric.c_str());
  for (const BestRow& r : best)
    std::printf("%-16s %-40s %.6f\n", r.group.c_str(), r.run_id.c_str(), r.value);

  // scaling curves: per-rule (flops, loss) over completed runs
  std::map<std::string, std::vector<std::pair<double, double>>> curves;
  for (const RunRecord& r : recs) {
    if (r.status != "completed" || !(r.flops_total > 0)) continue;
    std::string g = r.rule_name.empty() ? "all" : r.rule_name;
    curves[g].emplace_back(r.flops_total,
                           metric == "best_eval_loss" ? r.best_eval_loss : r.final_eval_loss);
  }
  std::vector<PlotSeries> series;
  for (auto& [name, pts] : curves) {
    std::sort(pts.begin(), pts.end());
    std::vector<CurvePoint> cps;
    for (auto [f, l] : pts) cps.push_back({f, l});
    write_curve_csv(out_dir + "/curve-" + name + ".csv", cps);
    series.push_back(PlotSeries{name, pts});
  }
  if (!series.empty()) {
    PlotSpec spec;
    spec.title = "loss vs compute";
    write_svg_plot(out_dir + "/scaling.svg", spec, series);
    std::printf("wrote %s/scaling.svg and per-rule curve CSVs\n", out_dir.c_str());
  }

  if (train_curves) {
    for (const RunRecord& r : recs) {
      if (r.metrics_path.empty() || !fs::exists(r.metrics_path)) continue;
      std::vector<MetricRow> rows = read_metrics_csv(r.metrics_path);
      PlotSeries tr{"train", {}}, ev{"eval", {}};
      for (const MetricRow& m : rows) {
        if (m.step < 1) continue;
        tr.points.emplace_back(static_cast<double>(m.step), m.train_loss);
        ev.points.emplace_back(static_cast<double>(m.step), m.eval_loss);
      }
      if (tr.points.empty()) continue;
      PlotSpec spec;
      spec.title = r.run_id;
      spec.x_label = "step";
      spec.log_x = false;
      spec.log_y = false;
      write_svg_plot(out_dir + "/run-" + r.run_id + ".svg", spec, {tr, ev});
    }
    std::printf("wrote per-run training-curve SVGs\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"scalelab: a desk-scale laboratory for LM scaling-rule experiments"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  set_blas_threads(blas_threads_from_env());

  auto* synth = app.add_subcommand("synth", "generate a synthetic (or byte-tokenized) token shard");
  std::string s_out = "data/shard";
  int64_t s_vocab = 64;
  int s_order = 1;
  double s_conc = 3.0;
  uint64_t s_seed = 0;
  int64_t s_tokens = 1000000;
  double s_split = 0;
  std::string s_text;
  synth->add_option("--out", s_out, "output path base (writes .bin and .json)");
  synth->add_option("--vocab", s_vocab, "vocabulary size");
  synth->add_option("--order", s_order, "markov order (0 or 1)");
  synth->add_option("--concentration", s_conc, "transition concentration (0 = uniform)");
  synth->add_option("--seed", s_seed, "generator seed");
  synth->add_option("--tokens", s_tokens, "number of tokens");
  synth->add_option("--split-eval", s_split, "also write -train/-eval shards with this eval fraction");
  synth->add_option("--text", s_text, "byte-tokenize this text file instead of sampling");

  auto* train = app.add_subcommand("train", "run one training job");
  std::string t_config, t_out = default_out_root();
  std::vector<std::string> t_set;
  bool t_verbose = false, t_noskip = false;
  train->add_option("--config", t_config, "run config JSON")->required();
  train->add_option("--set", t_set, "dotted.key=value overrides");
  train->add_option("--out", t_out, "output root (default $SCALELAB_OUT_ROOT or ./out)");
  train->add_flag("--verbose", t_verbose, "print metric rows");
  train->add_flag("--no-skip", t_noskip, "run even if the digest is already in the ledger");

  auto* sweep = app.add_subcommand("sweep", "run a grid of training jobs");
  std::string w_config, w_out = default_out_root();
  std::vector<std::string> w_set;
  int w_par = 1;
  bool w_verbose = false;
  sweep->add_option("--config", w_config, "sweep spec JSON (base + axes + seeds)")->required();
  sweep->add_option("--set", w_set, "dotted.key=value overrides on the spec");
  sweep->add_option("--out", w_out, "output root");
  sweep->add_option("--parallelism", w_par, "concurrent runs");
  sweep->add_flag("--verbose", w_verbose, "print metric rows");

  auto* fit = app.add_subcommand("fit", "fit L(f) = a f^b + c to a curve CSV");
  std::string f_curve, f_config, f_out, f_extrap;
  std::vector<std::string> f_set;
  fit->add_option("--curve", f_curve, "CSV with f,loss rows")->required();
  fit->add_option("--config", f_config, "fit config JSON");
  fit->add_option("--set", f_set, "dotted.key=value overrides");
  fit->add_option("--out", f_out, "write the fit report JSON here");
  fit->add_option("--extrapolate", f_extrap, "prefix rule (k=<n> or f<=<flops>) for a holdout report");

  auto* cross = app.add_subcommand("crossover", "locate where two scaling curves cross");
  std::string c_a, c_b, c_out;
  bool c_fitted = false;
  double c_lo = 0, c_hi = 0;
  int c_persist = 2;
  cross->add_option("--a", c_a, "first curve CSV")->required();
  cross->add_option("--b", c_b, "second curve CSV")->required();
  cross->add_flag("--fitted", c_fitted, "fit power laws first and intersect them");
  cross->add_option("--lo", c_lo, "fitted search range low (flops)");
  cross->add_option("--hi", c_hi, "fitted search range high (flops)");
  cross->add_option("--persistence", c_persist, "empirical persistence (shared grid points)");
  cross->add_option("--out", c_out, "write the crossover report JSON here");

  auto* report = app.add_subcommand("report", "summarize a ledger: tables, curves, SVG plots");
  std::string r_runs = default_out_root(), r_out = "report", r_group = "rule",
              r_metric = "final_eval_loss";
  bool r_curves = false;
  report->add_option("--runs", r_runs, "output root holding ledger.jsonl");
  report->add_option("--out", r_out, "report output directory");
  report->add_option("--group", r_group, "summary group key (rule|batch|d_model|peak_lr|seed)");
  report->add_option("--metric", r_metric, "final_eval_loss|best_eval_loss|final_train_loss");
  report->add_flag("--train-curves", r_curves, "also emit per-run training-curve SVGs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) return cmd_synth(s_out, s_vocab, s_order, s_conc, s_seed, s_tokens, s_split, s_text);
    if (*train) return cmd_train(t_config, t_set, t_out, t_verbose, t_noskip);
    if (*sweep) return cmd_sweep(w_config, w_set, w_out, w_par, w_verbose);
    if (*fit) return cmd_fit(f_curve, f_config, f_set, f_out, f_extrap);
    if (*cross) return cmd_crossover(c_a, c_b, c_fitted, c_lo, c_hi, c_persist, c_out);
    if (*report) return cmd_report(r_runs, r_out, r_group, r_metric, r_curves);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
