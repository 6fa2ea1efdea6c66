#include "scalelab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <deque>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "scalelab/configio.hpp"

namespace scalelab {

namespace fs = std::filesystem;

void RunConfig::validate() const {
  model.validate();
  optim.validate();
  schedule.validate();
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (eval_batches < 1) throw ConfigError("eval_batches must be >= 1");
  if (steps < 0 || epochs < 0) throw ConfigError("negative steps/epochs");
  if (data.shard.empty()) throw ConfigError("data.shard is required");
  if (data.eval_shard.empty() && !(data.eval_fraction > 0 && data.eval_fraction < 0.5))
    throw ConfigError("eval_fraction must lie in (0, 0.5) when no eval shard is given");
}

namespace {

uint64_t fnv1a64(const std::string& s, uint64_t h) {
  for (unsigned char c : s) h = (h ^ c) * 0x100000001B3ULL;
  return h;
}

std::mutex g_ledger_mutex;

std::string now_iso8601() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

}  // namespace

std::string config_digest(const RunConfig& cfg) {
  Json j = run_config_to_json(cfg);
  j.erase("run_id");  // identity is the content, not the label
  std::string canon = j.dump();
  uint64_t h1 = fnv1a64(canon, 0xCBF29CE484222325ULL);
  uint64_t h2 = fnv1a64(canon, 0x6C62272E07BB0142ULL);
  char buf[33];
  std::snprintf(buf, sizeof(buf), "%016llx%016llx", static_cast<unsigned long long>(h1),
                static_cast<unsigned long long>(h2));
  return buf;
}

int64_t resolve_steps(const RunConfig& cfg, int64_t batches_per_epoch) {
  if (cfg.steps > 0) return cfg.steps;
  if (cfg.token_budget > 0) {
    uint64_t per_step = static_cast<uint64_t>(cfg.batch) * static_cast<uint64_t>(cfg.model.seq_len);
    return static_cast<int64_t>((cfg.token_budget + per_step - 1) / per_step);
  }
  int64_t epochs = cfg.epochs > 0 ? cfg.epochs : 1;
  return epochs * batches_per_epoch;
}

// ---- ledger ---------------------------------------------------------------------

bool ledger_has_completed(const std::string& ledger_path, const std::string& digest, uint64_t seed,
                          RunRecord* found) {
  if (!fs::exists(ledger_path)) return false;
  for (const RunRecord& r : read_ledger(ledger_path)) {
    if (r.digest == digest && r.seed == seed && r.status == "completed") {
      if (found) *found = r;
      return true;
    }
  }
  return false;
}

bool append_ledger(const std::string& ledger_path, const RunRecord& rec) {
  std::lock_guard<std::mutex> lock(g_ledger_mutex);
  if (rec.status == "completed") {
    RunRecord existing;
    if (ledger_has_completed(ledger_path, rec.digest, rec.seed, &existing)) return false;
  }
  fs::create_directories(fs::path(ledger_path).parent_path());
  std::ofstream f(ledger_path, std::ios::app);
  if (!f) throw DataError("cannot append to ledger " + ledger_path);
  f << run_record_to_json(rec).dump() << "\n";
  return true;
}

std::vector<RunRecord> read_ledger(const std::string& ledger_path) {
  std::vector<RunRecord> out;
  std::ifstream f(ledger_path);
  if (!f) return out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(run_record_from_json(Json::parse(line)));
  }
  return out;
}

// ---- training -------------------------------------------------------------------

RunRecord train_run(const RunConfig& cfg_in, const std::string& out_root,
                    const TrainOptions& opts) {
  RunConfig cfg = cfg_in;
  cfg.validate();
  std::string digest = config_digest(cfg);
  if (cfg.run_id.empty()) {
    std::string stem = cfg.rule_name.empty() ? "run" : cfg.rule_name;
    cfg.run_id = stem + "-" + digest.substr(0, 8) + "-s" + std::to_string(cfg.seed);
  }
  std::string ledger_path = out_root + "/ledger.jsonl";

  if (opts.skip_if_ledgered) {
    RunRecord existing;
    std::lock_guard<std::mutex> lock(g_ledger_mutex);
    if (ledger_has_completed(ledger_path, digest, cfg.seed, &existing)) {
      if (opts.verbose)
        std::printf("[%s] already completed (digest %s), skipping\n", existing.run_id.c_str(),
                    digest.substr(0, 8).c_str());
      existing.note = "skipped: already in ledger";
      return existing;
    }
  }

  // data
  TokenShard train_shard, eval_shard;
  if (!cfg.data.eval_shard.empty()) {
    train_shard = load_shard(cfg.data.shard);
    eval_shard = load_shard(cfg.data.eval_shard);
  } else {
    TokenShard whole = load_shard(cfg.data.shard);
    std::tie(train_shard, eval_shard) = split_shard(whole, cfg.data.eval_fraction, cfg.data.split_seed);
  }
  if (train_shard.meta.vocab_size != cfg.model.vocab_size)
    throw DataError("shard vocab " + std::to_string(train_shard.meta.vocab_size) +
                    " != model vocab " + std::to_string(cfg.model.vocab_size));

  Transformer model(cfg.model);
  ParamSet params = model.init(Rng::derive(cfg.seed, Rng::hash_str("params")));
  OptimConfig ocfg = cfg.optim;
  OptState ost = OptState::init(params, ocfg);

  BatchIterator train_it(&train_shard, cfg.batch, cfg.model.seq_len,
                         Rng::derive(cfg.seed, Rng::hash_str("batches")), /*shuffle=*/true);
  int64_t steps = resolve_steps(cfg, train_it.batches_per_epoch());
  Schedule sched = cfg.schedule;
  if (sched.total_steps == 0) sched.total_steps = steps;
  sched.validate();
  if (sched.total_steps < steps)
    throw ConfigError("schedule.total_steps shorter than the training run");

  // fixed eval batches, natural order
  std::vector<PackedBatch> eval_set;
  {
    BatchIterator eval_it(&eval_shard, cfg.batch, cfg.model.seq_len, 0, /*shuffle=*/false);
    int64_t n = std::min<int64_t>(cfg.eval_batches, eval_it.batches_per_epoch());
    if (n < 1) throw DataError("eval shard too small for one batch");
    for (int64_t i = 0; i < n; ++i) eval_set.push_back(eval_it.next());
  }
  auto eval_loss = [&]() {
    double total = 0;
    double mx = 0;
    for (const PackedBatch& b : eval_set) {
      ForwardResult r = model.loss(params, b);
      total += r.loss;
      mx = std::max(mx, r.aux.max_attn_logit);
    }
    return std::make_pair(total / static_cast<double>(eval_set.size()), mx);
  };

  uint64_t n_backbone = static_cast<uint64_t>(param_count(cfg.model).backbone_approx);
  std::deque<double> recent;
  std::vector<MetricRow> rows;
  double last_grad_rms = 0;

  // stream rows to disk as they are produced so interrupted runs keep data
  std::string run_dir = out_root + "/runs/" + cfg.run_id;
  fs::create_directories(run_dir);
  std::string metrics_path = run_dir + "/metrics.csv";
  std::ofstream metrics_file(metrics_path, std::ios::trunc);
  if (!metrics_file) throw DataError("cannot write metrics csv " + metrics_path);
  metrics_file << "step,tokens_seen,flops_spent,train_loss,eval_loss,gap,grad_global_rms,"
                  "param_global_rms,max_attn_logit,lr\n";

  auto push_row = [&](int64_t step) {
    MetricRow row;
    row.step = step;
    row.tokens_seen = static_cast<uint64_t>(step) * static_cast<uint64_t>(cfg.batch) *
                      static_cast<uint64_t>(cfg.model.seq_len);
    row.flops_spent = flops_estimate(n_backbone, row.tokens_seen);
    if (recent.empty()) {
      // step-0 probe: loss on the first training batch, before any update
      BatchIterator probe(&train_shard, cfg.batch, cfg.model.seq_len,
                          Rng::derive(cfg.seed, Rng::hash_str("batches")), true);
      row.train_loss = model.loss(params, probe.next()).loss;
    } else {
      double s = 0;
      for (double v : recent) s += v;
      row.train_loss = s / static_cast<double>(recent.size());
    }
    auto [el, mx] = eval_loss();
    row.eval_loss = el;
    row.gap = row.eval_loss - row.train_loss;
    row.grad_global_rms = last_grad_rms;
    row.param_global_rms = params.global_rms();
    row.max_attn_logit = mx;
    row.lr = sched.lr_at(step);
    rows.push_back(row);
    char buf[320];
    std::snprintf(buf, sizeof(buf), "%lld,%llu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  static_cast<long long>(row.step), static_cast<unsigned long long>(row.tokens_seen),
                  row.flops_spent, row.train_loss, row.eval_loss, row.gap, row.grad_global_rms,
                  row.param_global_rms, row.max_attn_logit, row.lr);
    metrics_file << buf;
    metrics_file.flush();
    if (opts.on_row) opts.on_row(row);
    if (opts.verbose)
      std::printf("[%s] step %lld/%lld train %.4f eval %.4f gap %+.4f lr %.3g\n",
                  cfg.run_id.c_str(), static_cast<long long>(step), static_cast<long long>(steps),
                  row.train_loss, row.eval_loss, row.gap, row.lr);
  };

  RunRecord rec;
  rec.run_id = cfg.run_id;
  rec.digest = digest;
  rec.rule_name = cfg.rule_name;
  rec.seed = cfg.seed;
  rec.batch = cfg.batch;
  rec.d_model = cfg.model.d_model;
  rec.n_layers = cfg.model.n_layers;
  rec.seq_len = cfg.model.seq_len;
  rec.vocab_size = cfg.model.vocab_size;
  rec.peak_lr = sched.peak_lr;
  rec.weight_decay = ocfg.weight_decay;
  rec.tokens_target = cfg.token_budget > 0
                          ? cfg.token_budget
                          : static_cast<uint64_t>(steps) * static_cast<uint64_t>(cfg.batch) *
                                static_cast<uint64_t>(cfg.model.seq_len);
  rec.steps_planned = steps;
  rec.status = "completed";

  std::vector<Tensor> grads;
  int64_t done = 0;
  std::string divergence_note;
  push_row(0);
  for (int64_t step = 1; step <= steps; ++step) {
    PackedBatch batch = train_it.next();
    try {
      ForwardResult res = model.loss_and_grads(params, batch, grads);
      last_grad_rms = grad_global_rms(grads);
      apply_update(ocfg, ost, params, grads, sched.lr_at(step));
      recent.push_back(res.loss);
      if (recent.size() > 20) recent.pop_front();
      done = step;
      if (step % cfg.eval_every == 0 || step == steps) push_row(step);
    } catch (const NumericError& e) {
      rec.status = "diverged";
      divergence_note = e.what();
      break;
    }
  }
  if (rec.status == "diverged" && (rows.empty() || rows.back().step != done)) {
    try {
      push_row(done);
    } catch (const NumericError&) {
      // instability is data: keep whatever rows we have
    }
  }

  rec.note = divergence_note;
  rec.steps_completed = done;
  rec.tokens_seen = static_cast<uint64_t>(done) * static_cast<uint64_t>(cfg.batch) *
                    static_cast<uint64_t>(cfg.model.seq_len);
  rec.flops_total = flops_estimate(n_backbone, rec.tokens_seen);
  rec.final_train_loss = rows.back().train_loss;
  rec.final_eval_loss = rows.back().eval_loss;
  rec.best_eval_loss = rows.front().eval_loss;
  for (const MetricRow& r : rows) {
    rec.best_eval_loss = std::min(rec.best_eval_loss, r.eval_loss);
    rec.max_attn_logit_overall = std::max(rec.max_attn_logit_overall, r.max_attn_logit);
  }
  rec.timestamp = now_iso8601();

  rec.metrics_path = metrics_path;
  metrics_file.close();
  write_json_file(run_dir + "/config.json", run_config_to_json(cfg));
  if (cfg.save_checkpoint) save_checkpoint(run_dir + "/checkpoint.bin", params);
  append_ledger(ledger_path, rec);
  return rec;
}

std::vector<RunRecord> run_sweep(const std::vector<RunConfig>& grid, const std::string& out_root,
                                 int parallelism, bool verbose) {
  if (parallelism < 1) parallelism = 1;
  std::vector<RunRecord> records(grid.size());
  std::atomic<size_t> next{0};
  std::mutex rec_mutex;
  auto worker = [&]() {
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= grid.size()) return;
      TrainOptions opts;
      opts.verbose = verbose;
      RunRecord rec;
      try {
        rec = train_run(grid[i], out_root, opts);
      } catch (const Error& e) {
        rec.run_id = grid[i].run_id.empty() ? ("grid-" + std::to_string(i)) : grid[i].run_id;
        rec.digest = config_digest(grid[i]);
        rec.seed = grid[i].seed;
        rec.status = "interrupted";
        rec.note = e.what();
        rec.timestamp = now_iso8601();
        append_ledger(out_root + "/ledger.jsonl", rec);
      }
      std::lock_guard<std::mutex> lock(rec_mutex);
      records[i] = std::move(rec);
    }
  };
  if (parallelism == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < parallelism; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return records;
}

// ---- analysis -------------------------------------------------------------------

std::vector<SpikeInterval> detect_instability(const std::vector<std::pair<int64_t, double>>& series,
                                              int64_t window, double threshold) {
  if (series.empty()) throw ConfigError("detect_instability: empty series");
  if (window < 2) throw ConfigError("detect_instability: window must be >= 2");
  std::vector<SpikeInterval> out;
  std::vector<char> spiked(series.size(), 0);
  bool in_spike = false;
  double baseline = 0;  // trailing-window minimum frozen at spike onset
  SpikeInterval cur;
  for (size_t i = 0; i < series.size(); ++i) {
    auto [step, loss] = series[i];
    if (!in_spike) {
      double tmin = 0;
      bool have_min = false;
      for (size_t j = 0; j < i; ++j) {
        if (series[j].first < step - window) continue;
        if (series[j].first >= step) break;
        if (spiked[j]) continue;  // spike samples are not baseline
        if (!have_min || series[j].second < tmin) {
          tmin = series[j].second;
          have_min = true;
        }
      }
      if (have_min && loss > tmin + threshold) {
        in_spike = true;
        baseline = tmin;
        cur = SpikeInterval{step, step, loss - tmin};
        spiked[i] = 1;
      }
    } else {
      // the spike lasts until loss returns to within threshold of the
      // pre-spike baseline
      if (loss > baseline + threshold) {
        cur.end_step = step;
        cur.peak_excess = std::max(cur.peak_excess, loss - baseline);
        spiked[i] = 1;
      } else {
        out.push_back(cur);
        in_spike = false;
      }
    }
  }
  if (in_spike) out.push_back(cur);
  return out;
}

namespace {

std::string group_value(const RunRecord& r, const std::string& key) {
  char buf[48];
  if (key == "batch") return std::to_string(r.batch);
  if (key == "rule") return r.rule_name;
  if (key == "d_model") return std::to_string(r.d_model);
  if (key == "seed") return std::to_string(r.seed);
  if (key == "peak_lr") {
    std::snprintf(buf, sizeof(buf), "%.8g", r.peak_lr);
    return buf;
  }
  if (key == "weight_decay") {
    std::snprintf(buf, sizeof(buf), "%.8g", r.weight_decay);
    return buf;
  }
  throw ConfigError("unknown group key: " + key);
}

double metric_value(const RunRecord& r, const std::string& metric) {
  if (metric == "final_eval_loss") return r.final_eval_loss;
  if (metric == "best_eval_loss") return r.best_eval_loss;
  if (metric == "final_train_loss") return r.final_train_loss;
  throw ConfigError("unknown metric: " + metric);
}

}  // namespace

std::vector<BestRow> best_by(const std::vector<RunRecord>& records, const std::string& group_key,
                             const std::string& metric) {
  if (records.empty()) throw ConfigError("best_by: empty ledger");
  std::vector<BestRow> table;
  for (const RunRecord& r : records) {
    if (r.status == "interrupted") continue;
    double v = metric_value(r, metric);
    if (!std::isfinite(v)) continue;
    std::string g = group_value(r, group_key);
    auto it = std::find_if(table.begin(), table.end(), [&](const BestRow& b) { return b.group == g; });
    if (it == table.end()) {
      table.push_back(BestRow{g, r.run_id, v, r.flops_total});
      continue;
    }
    bool better = v < it->value ||
                  (v == it->value && (r.flops_total < it->flops ||
                                      (r.flops_total == it->flops && r.run_id < it->run_id)));
    if (better) *it = BestRow{g, r.run_id, v, r.flops_total};
  }
  std::sort(table.begin(), table.end(), [](const BestRow& a, const BestRow& b) {
    // numeric groups sort numerically
    char* e1 = nullptr;
    char* e2 = nullptr;
    double x = std::strtod(a.group.c_str(), &e1);
    double y = std::strtod(b.group.c_str(), &e2);
    if (e1 != a.group.c_str() && *e1 == '\0' && e2 != b.group.c_str() && *e2 == '\0') return x < y;
    return a.group < b.group;
  });
  return table;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write metrics csv " + path);
  f << "step,tokens_seen,flops_spent,train_loss,eval_loss,gap,grad_global_rms,param_global_rms,"
       "max_attn_logit,lr\n";
  char buf[320];
  for (const MetricRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%llu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  static_cast<long long>(r.step), static_cast<unsigned long long>(r.tokens_seen),
                  r.flops_spent, r.train_loss, r.eval_loss, r.gap, r.grad_global_rms,
                  r.param_global_rms, r.max_attn_logit, r.lr);
    f << buf;
  }
}

std::vector<MetricRow> read_metrics_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read metrics csv " + path);
  std::vector<MetricRow> rows;
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    MetricRow r;
    long long step = 0;
    unsigned long long tok = 0;
    if (std::sscanf(line.c_str(), "%lld,%llu,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf", &step, &tok,
                    &r.flops_spent, &r.train_loss, &r.eval_loss, &r.gap, &r.grad_global_rms,
                    &r.param_global_rms, &r.max_attn_logit, &r.lr) != 10)
      throw DataError("bad metrics row in " + path + ": " + line);
    r.step = step;
    r.tokens_seen = tok;
    rows.push_back(r);
  }
  return rows;
}

RunConfig run_config_from_preset(const std::string& preset_name, int64_t d_model, int64_t vocab,
                                 int64_t seq_len, int64_t batch_override) {
  RulePreset preset = rule_preset(preset_name);
  if (batch_override > 0) preset.rule.batch = batch_override;
  preset.rule.seq_len = seq_len;
  BudgetPoint point = materialize(preset.rule, d_model, vocab, seq_len, preset.activation);
  RunConfig cfg;
  cfg.rule_name = preset_name;
  cfg.model.d_model = point.d_model;
  cfg.model.n_layers = point.n_layers;
  cfg.model.d_ff = point.d_ff;
  cfg.model.vocab_size = vocab;
  cfg.model.seq_len = seq_len;
  cfg.model.activation = preset.activation;
  cfg.model.qk_norm = preset.qk_norm;
  cfg.model.parametrization = preset.parametrization;
  cfg.optim.kind = OptKind::adamw;
  cfg.optim.wd_mode = point.wd_mode;
  cfg.optim.weight_decay = point.weight_decay;
  if (preset_name == "blue-geglu-gradnorm") cfg.optim.grad_preproc = GradPreproc::global_rms;
  cfg.schedule.peak_lr = point.lr;
  cfg.schedule.warmup_steps = std::max<int64_t>(1, point.steps / 100);
  cfg.schedule.decay = Schedule::Decay::cosine;
  cfg.schedule.end_fraction = 0.1;
  cfg.batch = point.batch;
  cfg.token_budget = point.tokens;
  return cfg;
}

}  // namespace scalelab
