#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "scalelab/tensor.hpp"

namespace scalelab {

using TensorId = int32_t;

enum class OpKind {
  matmul,
  add,
  scale,
  gelu,
  geglu_gate,
  layer_norm,
  softmax_last_axis,
  rope_rotate,
  embed_gather,
  cross_entropy_mean,
};

const char* op_name(OpKind k);
OpKind op_from_name(const std::string& name);

struct OpAttrs {
  bool trans_b = false;          // matmul: B supplied transposed
  int64_t heads = 0;             // matmul/rope/layer_norm: per-head grouping (0 = flat)
  double alpha = 1.0;            // matmul/scale: output multiplier
  double eps = 1e-6;             // layer_norm
  bool causal = false;           // softmax_last_axis on (..,S,S) scores
  double rope_base = 10000.0;    // rope_rotate
  std::vector<int32_t> ids;      // embed_gather / cross_entropy targets (-1 = ignore)
  Shape prefix;                  // embed_gather output row shape (default {len(ids)})
};

struct TapeNode {
  OpKind kind;
  OpAttrs attrs;
  std::array<TensorId, 2> in{-1, -1};
  int n_in = 0;
  TensorId out = -1;
  std::vector<double> saved;     // small per-row caches (e.g. log-sum-exp)
};

// Reverse-mode tape. Values are recorded in topological order as ops are
// issued; backward() walks the records once in reverse. A graph belongs to
// a single run/thread.
class Graph {
 public:
  explicit Graph(Dtype dt) : dtype_(dt) {}

  Dtype dtype() const { return dtype_; }

  TensorId leaf(Tensor t, bool is_param = false);
  TensorId constant(Tensor t) { return leaf(std::move(t), false); }

  // (..., M, K) x (K, N); trans_b: (..., M, K) x (N, K) -> (..., M, N).
  TensorId matmul(TensorId a, TensorId b, bool trans_b = false, double alpha = 1.0);
  // Per-head attention forms of matmul, operating on packed (B, S, H*dh) layout:
  //   attn_scores: q (B,S,D) x k (B,S,D) -> (B,H,S,S), scaled by alpha
  //   attn_mix:    p (B,H,S,S) x v (B,S,D) -> (B,S,D)
  TensorId attn_scores(TensorId q, TensorId k, int64_t heads, double alpha);
  TensorId attn_mix(TensorId probs, TensorId v, int64_t heads);

  TensorId add(TensorId a, TensorId b);
  TensorId scale(TensorId a, double s);
  TensorId gelu(TensorId a);
  TensorId geglu_gate(TensorId gate, TensorId value);
  // Normalizes contiguous groups of `heads` equal slices of the last axis
  // (heads = 0 or 1: whole last axis). gain has the last-axis length.
  TensorId layer_norm(TensorId x, TensorId gain, int64_t heads = 0, double eps = 1e-6);
  TensorId softmax_last_axis(TensorId x, bool causal = false);
  TensorId rope_rotate(TensorId x, int64_t heads, double base = 10000.0);
  // Gathers rows of table for each id; output shape = prefix + (D,), where
  // prefix defaults to {len(ids)} and must multiply out to len(ids).
  TensorId embed_gather(TensorId table, const std::vector<int32_t>& ids, Shape prefix = {});
  // Mean over positions with target >= 0; targets length = rows of logits.
  TensorId cross_entropy_mean(TensorId logits, const std::vector<int32_t>& targets);

  const Tensor& value(TensorId id) const;
  int64_t n_nodes() const { return static_cast<int64_t>(nodes_.size()); }

  // Per-position losses from the most recent cross_entropy_mean (ignored
  // positions carry 0).
  const std::vector<double>& last_per_position_loss() const { return per_position_loss_; }

  // Gradients for all parameter leaves, keyed by id. Parameters not on the
  // path to the loss receive exact zeros. One shot per tape.
  std::unordered_map<TensorId, Tensor> backward(TensorId loss);

 private:
  TensorId push(Tensor t);
  TensorId record(OpKind kind, OpAttrs attrs, TensorId a, TensorId b, Tensor out);
  const Tensor& in_val(const TapeNode& n, int i) const { return values_[static_cast<size_t>(n.in[static_cast<size_t>(i)])]; }

  Dtype dtype_;
  std::vector<Tensor> values_;
  std::vector<bool> is_param_;
  std::vector<TapeNode> nodes_;
  std::vector<double> per_position_loss_;
  bool consumed_ = false;
};

// Eager single-op execution with full input validation (shape conformance
// and finiteness); the debugging/verification surface of the engine.
Tensor primitive_forward(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

// --- gradient verification -------------------------------------------------

struct FdiffIssue {
  std::string tensor;
  int64_t index = -1;
  double analytic = 0, numeric = 0, rel_err = 0;
  bool nonfinite = false;
};

struct FdiffReport {
  double max_rel_err = 0;
  std::string worst_tensor;
  int64_t worst_index = -1;
  int coords_checked = 0;
  std::vector<FdiffIssue> nonfinite_points;
  bool pass(double tol) const { return nonfinite_points.empty() && max_rel_err <= tol; }
};

// Compares analytic gradients against central differences at `step` on a
// random subsample of at least `min_coords` coordinates (all coordinates if
// the parameter count is smaller). Meant to run on float64 parameters.
FdiffReport finite_diff_check(const std::function<double(const std::vector<Tensor>&)>& value_fn,
                              const std::vector<Tensor>& params,
                              const std::vector<std::string>& names,
                              const std::vector<Tensor>& analytic_grads, int min_coords,
                              double step, Rng& rng);

// Engine-level BLAS threading (process-global); default 1 for reproducible
// per-run math, overridable via SCALELAB_BLAS_THREADS.
void set_blas_threads(int n);
int blas_threads_from_env();

}  // namespace scalelab
