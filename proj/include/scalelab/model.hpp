#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "scalelab/data.hpp"
#include "scalelab/graph.hpp"

namespace scalelab {

enum class Activation { gelu, geglu };
enum class Parametrization { standard, mup };

const char* activation_name(Activation a);
Activation activation_from_name(const std::string& s);
const char* parametrization_name(Parametrization p);
Parametrization parametrization_from_name(const std::string& s);

// Decoder-only transformer recipe: rotary embeddings, optional QK-Norm,
// untied head, no biases anywhere.
struct ModelConfig {
  int64_t d_model = 512;
  int64_t n_layers = 6;
  int64_t d_ff = 0;  // 0 = default for the activation (gelu: 4D, geglu: 6D)
  int64_t d_head = 64;
  int64_t vocab_size = 32101;
  int64_t seq_len = 512;
  Activation activation = Activation::gelu;
  bool qk_norm = true;
  Parametrization parametrization = Parametrization::standard;
  int64_t base_width = 512;  // muP base width
  double rope_base = 10000.0;
  double ln_eps = 1e-6;
  uint64_t seed = 0;
  Dtype dtype = Dtype::f32;

  int64_t heads() const { return d_model / d_head; }
  int64_t ff() const {
    if (d_ff > 0) return d_ff;
    return activation == Activation::gelu ? 4 * d_model : 6 * d_model;
  }
  void validate() const;
};

// Named parameter tensors in a fixed construction order; lr_mult carries the
// muP per-tensor learning-rate factors (1 everywhere for standard).
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  std::vector<double> lr_mult;
  std::unordered_map<std::string, size_t> index;

  size_t add(std::string name, Tensor t, double mult = 1.0);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  size_t size() const { return tensors.size(); }
  int64_t total_params() const;
  double global_rms() const;
};

struct ParamCounts {
  int64_t backbone_exact = 0;
  int64_t backbone_approx = 0;  // 12 D^2 L
  int64_t embed_plus_head = 0;  // 2 D V
};

ParamCounts param_count(const ModelConfig& cfg);

ParamSet init_params(const ModelConfig& cfg, uint64_t seed);

struct ForwardAux {
  double max_attn_logit = 0;                 // max pre-softmax logit over layers/heads
  std::vector<double> layer_activation_rms;  // residual-stream RMS after each block
  std::vector<double> per_position_loss;     // filled when requested
};

struct ForwardResult {
  double loss = 0;
  ForwardAux aux;
};

class Transformer {
 public:
  explicit Transformer(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  ParamSet init(uint64_t seed) const { return init_params(cfg_, seed); }

  // Evaluation-only forward (no tape kept afterwards).
  ForwardResult loss(const ParamSet& params, const PackedBatch& batch,
                     bool want_position_losses = false) const;

  // Traced forward: builds the loss subgraph on `g`, returning the loss id
  // and the parameter leaf ids aligned with `params` order.
  struct Traced {
    TensorId loss_id = -1;
    std::vector<TensorId> param_ids;
    ForwardResult result;
  };
  Traced build_loss(Graph& g, const ParamSet& params, const PackedBatch& batch,
                    bool want_position_losses = false) const;

  // One fused step: forward + backward; grads aligned with params order.
  ForwardResult loss_and_grads(const ParamSet& params, const PackedBatch& batch,
                               std::vector<Tensor>& grads_out) const;

 private:
  ModelConfig cfg_;
};

// ---- checkpoint ------------------------------------------------------------------

// Single-file dump: magic, JSON index header (name/dtype/shape/offset), then
// raw little-endian tensor payloads.
void save_checkpoint(const std::string& path, const ParamSet& params);
ParamSet load_checkpoint(const std::string& path);

}  // namespace scalelab
