#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "scalelab/common.hpp"

namespace scalelab {

// One training batch: B windows of S input tokens plus the shifted-by-one
// targets taken from the same contiguous stream (each window spans S+1
// stream tokens). Targets < 0 are ignored by the loss.
struct PackedBatch {
  int64_t batch = 0;
  int64_t seq = 0;
  std::vector<int32_t> inputs;   // B*S
  std::vector<int32_t> targets;  // B*S

  // Builds a self-contained batch from raw windows of length S: targets are
  // the within-window successors and the final position is ignored.
  static PackedBatch from_rows(const std::vector<std::vector<int32_t>>& rows);
};

struct ShardMeta {
  int64_t vocab_size = 0;
  int64_t n_tokens = 0;
  std::string split_tag = "train";
  std::string source;
  uint64_t seed = 0;
};

// Pretokenized shard: <base>.bin holds little-endian uint32 token ids,
// <base>.json is the sidecar.
struct TokenShard {
  ShardMeta meta;
  std::vector<int32_t> tokens;
};

void write_shard(const std::string& path_base, const TokenShard& shard);
TokenShard load_shard(const std::string& path_base);

// ---- synthetic corpus -------------------------------------------------------

struct SyntheticSpec {
  int64_t vocab_size = 16;
  int markov_order = 0;  // 0 or 1
  double concentration = 0.0;  // 0 = uniform; larger = more deterministic
  uint64_t seed = 0;
};

// Markov chain with known entropy: row i of the transition matrix is
// softmax(concentration * u_ij) for uniform u from the seed. Order 0 uses a
// single shared row.
struct MarkovChain {
  int64_t vocab = 0;
  int order = 0;
  std::vector<double> rows;  // order 0: V entries; order 1: V*V row-major

  const double* row(int64_t prev) const { return order == 0 ? rows.data() : rows.data() + prev * vocab; }
  std::vector<double> stationary() const;
  // Analytic per-token entropy in nats (the optimal achievable loss).
  double entropy_per_token() const;
};

MarkovChain build_chain(const SyntheticSpec& spec);
TokenShard gen_synthetic(const SyntheticSpec& spec, int64_t n_tokens);

// Disjoint contiguous-block split; the eval block offset is drawn from the
// seed and the train side is the remainder (stitched across the cut).
std::pair<TokenShard, TokenShard> split_shard(const TokenShard& shard, double eval_fraction,
                                              uint64_t seed);

// ---- batching ----------------------------------------------------------------

// Deterministic single-consumer iterator over non-overlapping windows of
// S+1 tokens. Window order is shuffled per epoch from (seed, epoch); each
// token is consumed at most once per epoch. Partial trailing batches are
// dropped.
class BatchIterator {
 public:
  BatchIterator(const TokenShard* shard, int64_t batch, int64_t seq, uint64_t seed,
                bool shuffle = true);

  PackedBatch next();
  int64_t windows_per_epoch() const { return n_windows_; }
  int64_t batches_per_epoch() const { return n_windows_ / batch_; }
  int64_t epoch() const { return epoch_; }
  int64_t tokens_per_batch() const { return batch_ * seq_; }

 private:
  void start_epoch();
  const TokenShard* shard_;
  int64_t batch_, seq_, n_windows_;
  uint64_t seed_;
  bool shuffle_;
  int64_t epoch_ = -1;
  int64_t cursor_ = 0;
  std::vector<int64_t> order_;
};

// ---- byte-level fallback tokenizer ---------------------------------------------

inline constexpr int32_t kByteBos = 256;
inline constexpr int32_t kByteEos = 257;
inline constexpr int64_t kByteVocab = 258;  // 256 bytes + BOS + EOS

std::vector<int32_t> byte_encode(std::string_view text, bool add_bos = true, bool add_eos = true);
std::string byte_decode(const std::vector<int32_t>& ids);

}  // namespace scalelab
