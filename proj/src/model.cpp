#include "scalelab/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace scalelab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint/shard formats assume a little-endian host");

const char* activation_name(Activation a) { return a == Activation::gelu ? "gelu" : "geglu"; }

Activation activation_from_name(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "geglu") return Activation::geglu;
  throw ConfigError("unknown activation: " + s);
}

const char* parametrization_name(Parametrization p) {
  return p == Parametrization::standard ? "standard" : "mup";
}

Parametrization parametrization_from_name(const std::string& s) {
  if (s == "standard") return Parametrization::standard;
  if (s == "mup") return Parametrization::mup;
  throw ConfigError("unknown parametrization: " + s);
}

void ModelConfig::validate() const {
  if (d_model < 1 || d_head < 1 || d_model % d_head != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " must be a positive multiple of d_head " +
                      std::to_string(d_head));
  if (d_head % 2 != 0) throw ConfigError("d_head must be even for rotary embedding");
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (seq_len < 2) throw ConfigError("seq_len must be >= 2");
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (base_width < 1) throw ConfigError("base_width must be >= 1");
  if (d_ff < 0) throw ConfigError("d_ff must be >= 0");
}

size_t ParamSet::add(std::string name, Tensor t, double mult) {
  index.emplace(name, tensors.size());
  names.push_back(std::move(name));
  tensors.push_back(std::move(t));
  lr_mult.push_back(mult);
  return tensors.size() - 1;
}

const Tensor& ParamSet::get(const std::string& name) const {
  auto it = index.find(name);
  if (it == index.end()) throw Error("no parameter named " + name);
  return tensors[it->second];
}

Tensor& ParamSet::get(const std::string& name) {
  auto it = index.find(name);
  if (it == index.end()) throw Error("no parameter named " + name);
  return tensors[it->second];
}

int64_t ParamSet::total_params() const {
  int64_t n = 0;
  for (const Tensor& t : tensors) n += t.numel();
  return n;
}

double ParamSet::global_rms() const {
  double ss = 0;
  int64_t n = 0;
  for (const Tensor& t : tensors) {
    ss += t.sumsq();
    n += t.numel();
  }
  return n == 0 ? 0.0 : std::sqrt(ss / static_cast<double>(n));
}

ParamCounts param_count(const ModelConfig& cfg) {
  // counting needs only positive extents (geometry constraints like head
  // divisibility do not affect the formulas)
  if (cfg.d_model < 1 || cfg.n_layers < 1 || cfg.vocab_size < 0 || cfg.d_ff < 0)
    throw ConfigError("param_count: bad dimensions");
  int64_t d = cfg.d_model, f = cfg.ff(), v = cfg.vocab_size, l = cfg.n_layers;
  ParamCounts c;
  c.backbone_approx = 12 * d * d * l;
  int64_t per_layer = 4 * d * d;                                     // wq wk wv wo
  per_layer += (cfg.activation == Activation::gelu ? 2 : 3) * d * f;  // mlp
  per_layer += 2 * d;                                                 // ln gains
  if (cfg.qk_norm) per_layer += 2 * d;
  c.backbone_exact = l * per_layer + d;  // + final ln gain
  c.embed_plus_head = 2 * d * v;
  return c;
}

ParamSet init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  int64_t d = cfg.d_model, f = cfg.ff(), v = cfg.vocab_size;
  bool mup = cfg.parametrization == Parametrization::mup;
  double hidden_mult = mup ? static_cast<double>(cfg.base_width) / static_cast<double>(d) : 1.0;
  ParamSet ps;

  auto tn = [&](const std::string& name, Shape shape, double sigma) {
    Tensor t(std::move(shape), cfg.dtype);
    Rng rng(Rng::derive(seed, Rng::hash_str(name.c_str())));
    t.fill_truncated_normal(rng, sigma);
    return t;
  };
  auto ones = [&](Shape shape) { return Tensor::full(std::move(shape), 1.0, cfg.dtype); };

  ps.add("embed", tn("embed", {v, d}, mup ? 1.0 : 0.02), 1.0);
  double sig_d = 1.0 / std::sqrt(static_cast<double>(d));
  double sig_f = 1.0 / std::sqrt(static_cast<double>(f));
  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    std::string p = "layers." + std::to_string(i) + ".";
    ps.add(p + "ln1.gain", ones({d}), 1.0);
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
      ps.add(p + w, tn(p + w, {d, d}, sig_d), hidden_mult);
    if (cfg.qk_norm) {
      ps.add(p + "attn.q_norm.gain", ones({d}), 1.0);
      ps.add(p + "attn.k_norm.gain", ones({d}), 1.0);
    }
    ps.add(p + "ln2.gain", ones({d}), 1.0);
    if (cfg.activation == Activation::gelu) {
      ps.add(p + "mlp.w_in", tn(p + "mlp.w_in", {d, f}, sig_d), hidden_mult);
    } else {
      ps.add(p + "mlp.w_gate", tn(p + "mlp.w_gate", {d, f}, sig_d), hidden_mult);
      ps.add(p + "mlp.w_val", tn(p + "mlp.w_val", {d, f}, sig_d), hidden_mult);
    }
    ps.add(p + "mlp.w_out", tn(p + "mlp.w_out", {f, d}, sig_f), hidden_mult);
  }
  ps.add("ln_f.gain", ones({d}), 1.0);
  if (mup)
    ps.add("head", Tensor::zeros({d, v}, cfg.dtype), hidden_mult);
  else
    ps.add("head", tn("head", {d, v}, sig_d), 1.0);
  return ps;
}

// ---- forward -------------------------------------------------------------------

Transformer::Transformer(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

namespace {

// Max over causally valid entries of (B,H,S,S) scores.
double causal_max(const Tensor& scores) {
  int64_t s = scores.dim(3);
  int64_t blocks = scores.numel() / (s * s);
  double mx = -1e300;
  auto scan = [&](auto data) {
    for (int64_t blk = 0; blk < blocks; ++blk) {
      const auto* base = data + blk * s * s;
      for (int64_t i = 0; i < s; ++i)
        for (int64_t j = 0; j <= i; ++j) mx = std::max(mx, static_cast<double>(base[i * s + j]));
    }
  };
  if (scores.dtype() == Dtype::f32)
    scan(scores.data<float>().data());
  else
    scan(scores.data<double>().data());
  return mx;
}

}  // namespace

Transformer::Traced Transformer::build_loss(Graph& g, const ParamSet& params,
                                            const PackedBatch& batch,
                                            bool want_position_losses) const {
  const ModelConfig& c = cfg_;
  if (batch.batch < 1 || batch.seq < 2) throw DataError("empty batch");
  if (static_cast<int64_t>(batch.inputs.size()) != batch.batch * batch.seq ||
      batch.targets.size() != batch.inputs.size())
    throw DataError("batch buffers do not match B*S");

  Traced tr;
  tr.param_ids.reserve(params.size());
  for (const Tensor& t : params.tensors) tr.param_ids.push_back(g.leaf(t, /*is_param=*/true));
  auto pid = [&](const std::string& name) { return tr.param_ids[params.index.at(name)]; };

  int64_t h = c.heads();
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(c.d_head));

  TensorId x = g.embed_gather(pid("embed"), batch.inputs, {batch.batch, batch.seq});
  std::vector<TensorId> block_outs;
  for (int64_t i = 0; i < c.n_layers; ++i) {
    std::string p = "layers." + std::to_string(i) + ".";
    TensorId hln = g.layer_norm(x, pid(p + "ln1.gain"), 1, c.ln_eps);
    TensorId q = g.matmul(hln, pid(p + "attn.wq"));
    TensorId k = g.matmul(hln, pid(p + "attn.wk"));
    TensorId v = g.matmul(hln, pid(p + "attn.wv"));
    q = g.rope_rotate(q, h, c.rope_base);
    k = g.rope_rotate(k, h, c.rope_base);
    if (c.qk_norm) {
      q = g.layer_norm(q, pid(p + "attn.q_norm.gain"), h, c.ln_eps);
      k = g.layer_norm(k, pid(p + "attn.k_norm.gain"), h, c.ln_eps);
    }
    TensorId scores = g.attn_scores(q, k, h, inv_sqrt_dh);
    tr.result.aux.max_attn_logit =
        std::max(tr.result.aux.max_attn_logit, causal_max(g.value(scores)));
    TensorId probs = g.softmax_last_axis(scores, /*causal=*/true);
    TensorId mix = g.attn_mix(probs, v, h);
    TensorId att = g.matmul(mix, pid(p + "attn.wo"));
    x = g.add(x, att);

    TensorId h2 = g.layer_norm(x, pid(p + "ln2.gain"), 1, c.ln_eps);
    TensorId m;
    if (c.activation == Activation::gelu) {
      m = g.matmul(g.gelu(g.matmul(h2, pid(p + "mlp.w_in"))), pid(p + "mlp.w_out"));
    } else {
      TensorId gate = g.matmul(h2, pid(p + "mlp.w_gate"));
      TensorId val = g.matmul(h2, pid(p + "mlp.w_val"));
      m = g.matmul(g.geglu_gate(gate, val), pid(p + "mlp.w_out"));
    }
    x = g.add(x, m);
    block_outs.push_back(x);
    tr.result.aux.layer_activation_rms.push_back(g.value(x).rms());
  }
  TensorId xf = g.layer_norm(x, pid("ln_f.gain"), 1, c.ln_eps);
  TensorId logits = g.matmul(xf, pid("head"));
  tr.loss_id = g.cross_entropy_mean(logits, batch.targets);
  tr.result.loss = g.value(tr.loss_id).at(0);
  if (want_position_losses) tr.result.aux.per_position_loss = g.last_per_position_loss();

  if (!std::isfinite(tr.result.loss)) {
    for (size_t i = 0; i < block_outs.size(); ++i) {
      int64_t bad = -1;
      if (!g.value(block_outs[i]).all_finite(&bad))
        throw NumericError("non-finite loss; first non-finite activation in layer " +
                           std::to_string(i) + " at index " + std::to_string(bad));
    }
    throw NumericError("non-finite loss with finite block activations (head/loss overflow)");
  }
  return tr;
}

ForwardResult Transformer::loss(const ParamSet& params, const PackedBatch& batch,
                                bool want_position_losses) const {
  Graph g(cfg_.dtype);
  return build_loss(g, params, batch, want_position_losses).result;
}

ForwardResult Transformer::loss_and_grads(const ParamSet& params, const PackedBatch& batch,
                                          std::vector<Tensor>& grads_out) const {
  Graph g(cfg_.dtype);
  Traced tr = build_loss(g, params, batch);
  auto gm = g.backward(tr.loss_id);
  grads_out.clear();
  grads_out.reserve(params.size());
  for (TensorId id : tr.param_ids) grads_out.push_back(std::move(gm.at(id)));
  return tr.result;
}

// ---- checkpoint ------------------------------------------------------------------

void save_checkpoint(const std::string& path, const ParamSet& params) {
  nlohmann::ordered_json idx;
  idx["tensors"] = nlohmann::ordered_json::array();
  uint64_t offset = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = params.tensors[i];
    uint64_t nbytes =
        static_cast<uint64_t>(t.numel()) * (t.dtype() == Dtype::f32 ? 4 : 8);
    idx["tensors"].push_back({{"name", params.names[i]},
                              {"dtype", dtype_name(t.dtype())},
                              {"shape", t.shape()},
                              {"offset", offset},
                              {"nbytes", nbytes}});
    offset += nbytes;
  }
  std::string header = idx.dump();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint " + path);
  f.write("SLCHKPT1", 8);
  uint64_t hlen = header.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const Tensor& t : params.tensors) {
    if (t.dtype() == Dtype::f32) {
      auto d = t.data<float>();
      f.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * 4));
    } else {
      auto d = t.data<double>();
      f.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * 8));
    }
  }
}

ParamSet load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read checkpoint " + path);
  char magic[8];
  f.read(magic, 8);
  if (std::memcmp(magic, "SLCHKPT1", 8) != 0) throw DataError("bad checkpoint magic in " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  std::string header(hlen, '\0');
  f.read(header.data(), static_cast<std::streamsize>(hlen));
  auto idx = nlohmann::json::parse(header);
  ParamSet ps;
  for (const auto& e : idx.at("tensors")) {
    Shape shape = e.at("shape").get<Shape>();
    Dtype dt = dtype_from_name(e.at("dtype").get<std::string>());
    Tensor t(shape, dt);
    if (dt == Dtype::f32) {
      auto d = t.data<float>();
      f.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * 4));
    } else {
      auto d = t.data<double>();
      f.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * 8));
    }
    ps.add(e.at("name").get<std::string>(), std::move(t));
  }
  if (!f) throw DataError("truncated checkpoint " + path);
  return ps;
}

}  // namespace scalelab
