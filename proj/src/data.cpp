#include "scalelab/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "scalelab/rng.hpp"

namespace scalelab {

using json = nlohmann::ordered_json;

PackedBatch PackedBatch::from_rows(const std::vector<std::vector<int32_t>>& rows) {
  PackedBatch b;
  if (rows.empty()) throw DataError("from_rows: no rows");
  b.batch = static_cast<int64_t>(rows.size());
  b.seq = static_cast<int64_t>(rows[0].size());
  for (const auto& r : rows) {
    if (static_cast<int64_t>(r.size()) != b.seq) throw DataError("from_rows: ragged rows");
    for (size_t t = 0; t < r.size(); ++t) {
      b.inputs.push_back(r[t]);
      b.targets.push_back(t + 1 < r.size() ? r[t + 1] : -1);
    }
  }
  return b;
}

void write_shard(const std::string& path_base, const TokenShard& shard) {
  if (shard.meta.n_tokens != static_cast<int64_t>(shard.tokens.size()))
    throw DataError("shard metadata n_tokens disagrees with payload");
  std::ofstream bin(path_base + ".bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw DataError("cannot write " + path_base + ".bin");
  for (int32_t t : shard.tokens) {
    uint32_t le = static_cast<uint32_t>(t);
    unsigned char b[4] = {static_cast<unsigned char>(le & 0xff),
                          static_cast<unsigned char>((le >> 8) & 0xff),
                          static_cast<unsigned char>((le >> 16) & 0xff),
                          static_cast<unsigned char>((le >> 24) & 0xff)};
    bin.write(reinterpret_cast<const char*>(b), 4);
  }
  bin.close();
  json side;
  side["vocab_size"] = shard.meta.vocab_size;
  side["n_tokens"] = shard.meta.n_tokens;
  side["split_tag"] = shard.meta.split_tag;
  side["source"] = shard.meta.source;
  side["seed"] = shard.meta.seed;
  std::ofstream js(path_base + ".json", std::ios::trunc);
  if (!js) throw DataError("cannot write " + path_base + ".json");
  js << side.dump(2) << "\n";
}

TokenShard load_shard(const std::string& path_base) {
  std::ifstream js(path_base + ".json");
  if (!js) throw DataError("missing shard sidecar " + path_base + ".json");
  json side = json::parse(js);
  TokenShard shard;
  shard.meta.vocab_size = side.at("vocab_size").get<int64_t>();
  shard.meta.n_tokens = side.at("n_tokens").get<int64_t>();
  shard.meta.split_tag = side.value("split_tag", "train");
  shard.meta.source = side.value("source", "");
  shard.meta.seed = side.value("seed", 0ULL);

  std::ifstream bin(path_base + ".bin", std::ios::binary);
  if (!bin) throw DataError("missing shard payload " + path_base + ".bin");
  bin.seekg(0, std::ios::end);
  int64_t bytes = bin.tellg();
  bin.seekg(0);
  if (bytes != shard.meta.n_tokens * 4)
    throw DataError("shard payload is " + std::to_string(bytes) + " bytes, sidecar says " +
                    std::to_string(shard.meta.n_tokens * 4));
  std::vector<unsigned char> buf(static_cast<size_t>(bytes));
  bin.read(reinterpret_cast<char*>(buf.data()), bytes);
  shard.tokens.resize(static_cast<size_t>(shard.meta.n_tokens));
  for (int64_t i = 0; i < shard.meta.n_tokens; ++i) {
    size_t o = static_cast<size_t>(i) * 4;
    uint32_t v = static_cast<uint32_t>(buf[o]) | (static_cast<uint32_t>(buf[o + 1]) << 8) |
                 (static_cast<uint32_t>(buf[o + 2]) << 16) |
                 (static_cast<uint32_t>(buf[o + 3]) << 24);
    if (v >= static_cast<uint32_t>(shard.meta.vocab_size))
      throw DataError("token id " + std::to_string(v) + " at offset " + std::to_string(i) +
                      " exceeds vocab " + std::to_string(shard.meta.vocab_size));
    shard.tokens[static_cast<size_t>(i)] = static_cast<int32_t>(v);
  }
  return shard;
}

// ---- synthetic corpus ---------------------------------------------------------

MarkovChain build_chain(const SyntheticSpec& spec) {
  if (spec.vocab_size < 2) throw ConfigError("synthetic vocab must be >= 2");
  if (spec.markov_order != 0 && spec.markov_order != 1)
    throw ConfigError("markov order must be 0 or 1");
  MarkovChain chain;
  chain.vocab = spec.vocab_size;
  chain.order = spec.markov_order;
  int64_t n_rows = spec.markov_order == 0 ? 1 : spec.vocab_size;
  chain.rows.resize(static_cast<size_t>(n_rows * spec.vocab_size));
  Rng rng(Rng::derive(spec.seed, Rng::hash_str("markov-rows")));
  for (int64_t r = 0; r < n_rows; ++r) {
    double* row = chain.rows.data() + r * spec.vocab_size;
    double mx = -1e300;
    for (int64_t j = 0; j < spec.vocab_size; ++j) {
      row[j] = spec.concentration * rng.uniform();
      mx = std::max(mx, row[j]);
    }
    double sum = 0;
    for (int64_t j = 0; j < spec.vocab_size; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int64_t j = 0; j < spec.vocab_size; ++j) row[j] /= sum;
  }
  return chain;
}

std::vector<double> MarkovChain::stationary() const {
  if (order == 0) return rows;
  // power iteration on pi' = pi P
  std::vector<double> pi(static_cast<size_t>(vocab), 1.0 / static_cast<double>(vocab));
  std::vector<double> nxt(static_cast<size_t>(vocab));
  for (int iter = 0; iter < 2000; ++iter) {
    std::fill(nxt.begin(), nxt.end(), 0.0);
    for (int64_t i = 0; i < vocab; ++i) {
      const double* r = rows.data() + i * vocab;
      for (int64_t j = 0; j < vocab; ++j) nxt[static_cast<size_t>(j)] += pi[static_cast<size_t>(i)] * r[j];
    }
    double diff = 0;
    for (int64_t j = 0; j < vocab; ++j) diff += std::fabs(nxt[static_cast<size_t>(j)] - pi[static_cast<size_t>(j)]);
    pi.swap(nxt);
    if (diff < 1e-14) break;
  }
  return pi;
}

double MarkovChain::entropy_per_token() const {
  auto h_row = [&](const double* r) {
    double h = 0;
    for (int64_t j = 0; j < vocab; ++j)
      if (r[j] > 0) h -= r[j] * std::log(r[j]);
    return h;
  };
  if (order == 0) return h_row(rows.data());
  std::vector<double> pi = stationary();
  double h = 0;
  for (int64_t i = 0; i < vocab; ++i) h += pi[static_cast<size_t>(i)] * h_row(rows.data() + i * vocab);
  return h;
}

TokenShard gen_synthetic(const SyntheticSpec& spec, int64_t n_tokens) {
  if (n_tokens < 1) throw ConfigError("n_tokens must be >= 1");
  MarkovChain chain = build_chain(spec);
  Rng rng(Rng::derive(spec.seed, Rng::hash_str("markov-sample")));
  TokenShard shard;
  shard.meta.vocab_size = spec.vocab_size;
  shard.meta.n_tokens = n_tokens;
  shard.meta.seed = spec.seed;
  char src[96];
  std::snprintf(src, sizeof(src), "synthetic-markov(order=%d,V=%lld,conc=%g)", spec.markov_order,
                static_cast<long long>(spec.vocab_size), spec.concentration);
  shard.meta.source = src;
  shard.tokens.resize(static_cast<size_t>(n_tokens));

  auto sample_row = [&](const double* row) {
    double u = rng.uniform();
    double acc = 0;
    for (int64_t j = 0; j < spec.vocab_size; ++j) {
      acc += row[j];
      if (u < acc) return static_cast<int32_t>(j);
    }
    return static_cast<int32_t>(spec.vocab_size - 1);
  };

  std::vector<double> start = chain.order == 0 ? chain.rows : chain.stationary();
  int32_t prev = sample_row(start.data());
  shard.tokens[0] = prev;
  for (int64_t i = 1; i < n_tokens; ++i) {
    prev = sample_row(chain.row(prev));
    shard.tokens[static_cast<size_t>(i)] = prev;
  }
  return shard;
}

std::pair<TokenShard, TokenShard> split_shard(const TokenShard& shard, double eval_fraction,
                                              uint64_t seed) {
  if (!(eval_fraction > 0.0 && eval_fraction < 0.5))
    throw ConfigError("eval_fraction must lie in (0, 0.5)");
  int64_t n = shard.meta.n_tokens;
  int64_t n_eval = static_cast<int64_t>(static_cast<double>(n) * eval_fraction);
  if (n_eval < 1 || n - n_eval < 1) throw ConfigError("shard too small to split");
  Rng rng(Rng::derive(seed, Rng::hash_str("split-offset")));
  int64_t offset = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n - n_eval + 1)));

  TokenShard train, eval;
  train.meta = shard.meta;
  eval.meta = shard.meta;
  train.meta.split_tag = "train";
  eval.meta.split_tag = "eval";
  eval.tokens.assign(shard.tokens.begin() + offset, shard.tokens.begin() + offset + n_eval);
  train.tokens.assign(shard.tokens.begin(), shard.tokens.begin() + offset);
  train.tokens.insert(train.tokens.end(), shard.tokens.begin() + offset + n_eval,
                      shard.tokens.end());
  train.meta.n_tokens = static_cast<int64_t>(train.tokens.size());
  eval.meta.n_tokens = n_eval;
  return {std::move(train), std::move(eval)};
}

// ---- batching ------------------------------------------------------------------

BatchIterator::BatchIterator(const TokenShard* shard, int64_t batch, int64_t seq, uint64_t seed,
                             bool shuffle)
    : shard_(shard), batch_(batch), seq_(seq), seed_(seed), shuffle_(shuffle) {
  if (batch < 1 || seq < 2) throw ConfigError("batch iterator needs B >= 1, S >= 2");
  n_windows_ = shard->meta.n_tokens / (seq + 1);
  if (n_windows_ < batch)
    throw DataError("shard has " + std::to_string(shard->meta.n_tokens) + " tokens, need at least " +
                    std::to_string(batch * (seq + 1)) + " for B=" + std::to_string(batch) +
                    " S=" + std::to_string(seq));
  start_epoch();
}

void BatchIterator::start_epoch() {
  ++epoch_;
  cursor_ = 0;
  if (order_.empty()) {
    order_.resize(static_cast<size_t>(n_windows_));
    for (int64_t i = 0; i < n_windows_; ++i) order_[static_cast<size_t>(i)] = i;
  }
  if (shuffle_) {
    // Fisher-Yates from the (seed, epoch) stream
    Rng rng(Rng::derive(seed_, static_cast<uint64_t>(epoch_) + 0x51AB5EEDULL));
    for (int64_t i = n_windows_ - 1; i > 0; --i) {
      int64_t j = static_cast<int64_t>(rng.below(static_cast<uint64_t>(i + 1)));
      std::swap(order_[static_cast<size_t>(i)], order_[static_cast<size_t>(j)]);
    }
  }
}

PackedBatch BatchIterator::next() {
  if (cursor_ + batch_ > n_windows_) start_epoch();
  PackedBatch b;
  b.batch = batch_;
  b.seq = seq_;
  b.inputs.resize(static_cast<size_t>(batch_ * seq_));
  b.targets.resize(static_cast<size_t>(batch_ * seq_));
  const int32_t* toks = shard_->tokens.data();
  for (int64_t r = 0; r < batch_; ++r) {
    int64_t w = order_[static_cast<size_t>(cursor_ + r)];
    const int32_t* win = toks + w * (seq_ + 1);
    for (int64_t t = 0; t < seq_; ++t) {
      b.inputs[static_cast<size_t>(r * seq_ + t)] = win[t];
      b.targets[static_cast<size_t>(r * seq_ + t)] = win[t + 1];
    }
  }
  cursor_ += batch_;
  return b;
}

// ---- byte tokenizer ---------------------------------------------------------------

std::vector<int32_t> byte_encode(std::string_view text, bool add_bos, bool add_eos) {
  std::vector<int32_t> out;
  out.reserve(text.size() + 2);
  if (add_bos) out.push_back(kByteBos);
  for (unsigned char c : text) out.push_back(static_cast<int32_t>(c));
  if (add_eos) out.push_back(kByteEos);
  return out;
}

std::string byte_decode(const std::vector<int32_t>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int32_t id : ids)
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  return out;
}

}  // namespace scalelab
