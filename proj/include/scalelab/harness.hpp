#pragma once

#include <functional>
#include <string>
#include <vector>

#include "scalelab/data.hpp"
#include "scalelab/model.hpp"
#include "scalelab/optim.hpp"
#include "scalelab/rules.hpp"

namespace scalelab {

struct DataRef {
  std::string shard;       // path base (without .bin/.json)
  std::string eval_shard;  // optional explicit eval shard; empty = split
  double eval_fraction = 0.05;
  uint64_t split_seed = 0;
};

struct RunConfig {
  std::string run_id;     // derived from rule/digest/seed when empty
  std::string rule_name;  // provenance label
  ModelConfig model;
  OptimConfig optim;
  Schedule schedule;
  DataRef data;
  int64_t batch = 32;
  uint64_t token_budget = 0;  // used when steps == 0
  int64_t steps = 0;          // 0 = derive from token_budget or epochs
  int64_t epochs = 0;         // used when steps == 0 and token_budget == 0 (default 1 epoch)
  int64_t eval_every = 100;
  int64_t eval_batches = 4;
  uint64_t seed = 0;
  bool save_checkpoint = false;

  void validate() const;
};

struct MetricRow {
  int64_t step = 0;
  uint64_t tokens_seen = 0;
  double flops_spent = 0;  // 6 * N_backbone * tokens_seen
  double train_loss = 0;   // trailing mean over the last 20 step losses
  double eval_loss = 0;
  double gap = 0;  // eval_loss - train_loss
  double grad_global_rms = 0;
  double param_global_rms = 0;
  double max_attn_logit = 0;
  double lr = 0;
};

struct RunRecord {
  std::string run_id;
  std::string digest;  // content hash of the resolved config
  std::string rule_name;
  std::string status;  // completed | diverged | interrupted
  std::string note;
  uint64_t seed = 0;
  int64_t batch = 0, d_model = 0, n_layers = 0, seq_len = 0, vocab_size = 0;
  double peak_lr = 0, weight_decay = 0;
  uint64_t tokens_target = 0, tokens_seen = 0;
  int64_t steps_planned = 0, steps_completed = 0;
  double flops_total = 0;
  double final_train_loss = 0, final_eval_loss = 0, best_eval_loss = 0;
  double max_attn_logit_overall = 0;
  std::string metrics_path;
  std::string timestamp;  // the single non-reproducible field
};

// Canonical-JSON content hash of the full resolved config (excluding run_id).
std::string config_digest(const RunConfig& cfg);

// Number of optimizer steps this config will execute.
int64_t resolve_steps(const RunConfig& cfg, int64_t batches_per_epoch);

struct TrainOptions {
  bool skip_if_ledgered = true;
  bool verbose = false;
  std::function<void(const MetricRow&)> on_row;
};

// Runs one training job: deterministic given (config, seed); appends the
// record to <out_root>/ledger.jsonl and writes
// <out_root>/runs/<run_id>/{config.json, metrics.csv}. Divergence is kept as
// data: the run gets status "diverged" and its partial metrics survive.
RunRecord train_run(const RunConfig& cfg, const std::string& out_root,
                    const TrainOptions& opts = {});

// Executes runs with up to `parallelism` workers; resumable (completed
// digests are skipped), individual failures recorded without aborting.
std::vector<RunRecord> run_sweep(const std::vector<RunConfig>& grid, const std::string& out_root,
                                 int parallelism, bool verbose = false);

// ---- ledger --------------------------------------------------------------------

// Appends unless a completed record with the same (digest, seed) exists.
bool append_ledger(const std::string& ledger_path, const RunRecord& rec);
std::vector<RunRecord> read_ledger(const std::string& ledger_path);
bool ledger_has_completed(const std::string& ledger_path, const std::string& digest, uint64_t seed,
                          RunRecord* found = nullptr);

// ---- analysis ------------------------------------------------------------------

struct SpikeInterval {
  int64_t start_step = 0;
  int64_t end_step = 0;
  double peak_excess = 0;  // max of loss - trailing-window minimum
};

// Flags maximal intervals where loss exceeds the trailing-window minimum by
// more than `threshold`; window is measured in steps and excludes the
// current point.
std::vector<SpikeInterval> detect_instability(const std::vector<std::pair<int64_t, double>>& series,
                                              int64_t window, double threshold);

struct BestRow {
  std::string group;
  std::string run_id;
  double value = 0;
  double flops = 0;
};

// Per-group minimum of `metric` ("final_eval_loss" | "best_eval_loss" |
// "final_train_loss"); ties broken by lower flops, then lower run_id.
// group_key: "batch" | "rule" | "d_model" | "peak_lr" | "seed" | "weight_decay".
std::vector<BestRow> best_by(const std::vector<RunRecord>& records, const std::string& group_key,
                             const std::string& metric);

// Metrics CSV round-trip (fixed column order).
void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::string& path);

// Builds a RunConfig from a named scaling-rule preset materialized at the
// given width.
RunConfig run_config_from_preset(const std::string& preset_name, int64_t d_model, int64_t vocab,
                                 int64_t seq_len, int64_t batch_override = 0);

}  // namespace scalelab
