#pragma once

// Performer language model in the row-wise F / prefix-sum / G decomposition.
//
// Layer r maps X (B x d_model) to
//   T     = [g(K_1), V_1 (x) g(K_1), ..., g(K_k), V_k (x) g(K_k)]   (B x D1)
//   Gamma = [X, g(Q_1), ..., g(Q_k)]                                (B x D2)
// and, with U = PS(T), back to the next X. Only the prefix sum mixes rows.
// Inside G: A = concat_j(R_j g(Q_j) / S_j . g(Q_j)), H = LN(A) + X,
// X' = LN(GeLU(H W1 + b1) W2 + b2) + H.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "slim/autograd.hpp"
#include "slim/linattn.hpp"
#include "slim/rng.hpp"
#include "slim/tensor.hpp"

namespace slim {

struct ModelConfig {
  std::size_t seq_len = 256;
  std::size_t d_model = 32;
  std::size_t d_ff = 128;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t feature_dim = 16;
  std::size_t vocab = 256;
  FeatureMap feature_map{};
  std::size_t block_size = 64;
  double ln_eps = 1e-5;

  std::size_t head_dim() const { return d_model / heads; }
  std::size_t front_width() const { return feature_dim * (head_dim() + 1); }
  std::size_t d1() const { return front_width() * heads; }
  std::size_t d2() const { return feature_dim * heads + d_model; }

  // Throws ConfigError on an inconsistent configuration.
  void validate() const;

  // L = 256, d_model = 32, 2 heads, 2 layers, M = d = 16, vocab = 256.
  static ModelConfig desk();
};

struct LayerParams {
  std::vector<Tensor> wq, wk, wv;  // per head, d_model x d
  Tensor ln1_gain, ln1_bias;       // d_model
  Tensor w1, b1;                   // d_model x d_ff, d_ff
  Tensor w2, b2;                   // d_ff x d_model, d_model
  Tensor ln2_gain, ln2_bias;       // d_model
};

struct Params {
  Tensor token_embedding;  // vocab x d_model
  std::vector<LayerParams> layers;
  Tensor w_out, b_out;  // d_model x vocab, vocab

  // Zero-filled parameters with the shapes `cfg` prescribes.
  static Params zeros(const ModelConfig& cfg);
  // Uniform(-a, a) weights with a = 1/sqrt(fan_in), unit gains, zero biases.
  static Params init(const ModelConfig& cfg, std::uint64_t seed);

  // Visits every tensor in the fixed serialization order.
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  std::size_t size() const;
  Tensor flatten() const;
  void assign(std::span<const double> flat);
};

std::size_t param_count(const ModelConfig& cfg);

// Serialized form: u64 little-endian header length, JSON header
// {config, fields: [[name, shape], ...], n_param}, then n_param little-endian doubles.
std::string serialize_params(const ModelConfig& cfg, const Params& params);
void deserialize_params(const std::string& bytes, ModelConfig& cfg, Params& params);
void save_params(const std::string& path, const ModelConfig& cfg, const Params& params);
void load_params(const std::string& path, ModelConfig& cfg, Params& params);

// ---------------------------------------------------------------------------
// Graph construction.

struct LayerVars {
  std::vector<Var> wq, wk, wv;
  Var ln1_gain, ln1_bias, w1, b1, w2, b2, ln2_gain, ln2_bias;
};

struct ParamVars {
  Var token_embedding;
  std::vector<LayerVars> layers;
  Var w_out, b_out;
};

// Differentiable parameters whose gradients accumulate into `grads` (which
// must match `params` in shape) when given.
ParamVars bind_params(Tape& tape, const Params& params, Params* grads);
// Non-differentiable parameters.
ParamVars bind_constant_params(Tape& tape, const Params& params);

// Sinusoidal encoding of absolute positions [offset, offset + count).
Tensor positional_encoding(std::size_t offset, std::size_t count, std::size_t d_model);
Var embed(const ParamVars& p, std::span<const int> tokens, std::size_t offset);

struct LayerFOutput {
  Var t;      // B x D1
  Var gamma;  // B x D2
};

LayerFOutput layer_F(const Var& x, const LayerVars& lp, const ModelConfig& cfg);
Var layer_G(const Var& u, const Var& gamma, const LayerVars& lp, const ModelConfig& cfg);

// H = LN(A) + X, X' = LN(FFN(H)) + H, given the concatenated attention output A.
Var layer_tail(const Var& attn, const Var& x, const LayerVars& lp, const ModelConfig& cfg);

Var output_logits(const Var& x, const ParamVars& p);

// Per-position loss weights; entry l weights the loss on predicting token l+1.
// The weight of the last position is ignored.
using LossMask = std::vector<double>;
LossMask full_mask(std::size_t seq_len);

// (L-1)^-1 sum_{l in [offset, offset+rows)} mask_l CE(logits_l, tokens_{l+1}).
Var loss_slice(const Var& logits, std::span<const int> tokens, std::size_t offset,
               const LossMask& mask);
double loss_slice(const Tensor& logits, std::span<const int> tokens, std::size_t offset,
                  const LossMask& mask);

enum class AttentionMode {
  kBlock,      // fused block-iterative kernel with a custom backward
  kPrefixSum,  // explicit layer_F, prefix_sum, layer_G on the tape
};

// Per-layer hooks around the cross-row step of one segment.
struct SegmentHooks {
  // Called before layer r's attention with that layer's per-head g(K) and V
  // rows. Returns the 1 x D1 boundary state seeding the layer, or an invalid
  // Var for a zero start.
  std::function<Var(std::size_t layer, std::span<const Tensor> k_feat, std::span<const Tensor> v)>
      boundary_in;
  // Called with the 1 x D1 state after the segment's last row.
  std::function<void(std::size_t layer, const Var& boundary_out)> boundary_out;
};

// Embedding, s layers and the masked loss over rows [offset, offset+count).
Var run_segment(const ParamVars& p, const ModelConfig& cfg, std::span<const int> tokens,
                std::size_t offset, std::size_t count, const LossMask& mask, AttentionMode mode,
                const SegmentHooks& hooks = {});

// Same rows as run_segment, returning the logits instead of the loss.
Var segment_logits(const ParamVars& p, const ModelConfig& cfg, std::span<const int> tokens,
                   std::size_t offset, std::size_t count, AttentionMode mode,
                   const SegmentHooks& hooks = {});

struct LossAndGrad {
  double loss = 0;
  Params grad;
};

// Whole-sequence loss and gradient on one tape.
LossAndGrad forward_full(std::span<const int> tokens, const Params& params, const ModelConfig& cfg,
                         const LossMask& mask, AttentionMode mode = AttentionMode::kPrefixSum);
double model_loss(std::span<const int> tokens, const Params& params, const ModelConfig& cfg,
                  const LossMask& mask, AttentionMode mode = AttentionMode::kBlock);
// Whole-sequence logits (L x vocab).
Tensor model_logits(std::span<const int> tokens, const Params& params, const ModelConfig& cfg);

}  // namespace slim
