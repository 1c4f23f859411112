#pragma once

// Causal self-attention kernels.
//
// Three routes compute the same causal linear attention
//     Y_l = (sum_{l'<=l} V_l' g(K_l')^T) g(Q_l) / (sum_{l'<=l} g(K_l'))^T g(Q_l):
//   * attn_linear_direct: the quadratic double loop over (l, l');
//   * attn_linear_ps:     explicit prefix sums R = PS(V (x) g(K)), S = PS(g(K));
//   * attn_block_forward: block-iterative scan that keeps only a running
//     front (curR, curS) plus one block of workspace.
// attn_exp_oracle is softmax attention, used only as a reference point.
//
// Fronts are packed per head as [S (M entries), R (d x M, row-major in d)],
// which is the same order the model uses for the prefix-summed representation.

#include <cstddef>

#include "slim/autograd.hpp"
#include "slim/tensor.hpp"

namespace slim {

enum class FeatureMapKind {
  kSquare,  // g(x) = (x_i^2)_i, so M = d
  kExp,     // reserved; not implemented
};

struct FeatureMap {
  FeatureMapKind kind = FeatureMapKind::kSquare;

  std::size_t output_dim(std::size_t d) const;
};

Tensor feature_map_apply(const FeatureMap& g, const Tensor& x);
Var feature_map_apply(const FeatureMap& g, const Var& x);

// Denominators below this value are clamped (and counted in alloc_stats()).
inline constexpr double kDenominatorFloor = 1e-16;

Tensor attn_exp_oracle(const Tensor& q, const Tensor& k, const Tensor& v);
Tensor attn_linear_direct(const Tensor& q, const Tensor& k, const Tensor& v, const FeatureMap& g);
Tensor attn_linear_ps(const Tensor& q, const Tensor& k, const Tensor& v, const FeatureMap& g);
// The same prefix-sum route recorded on a tape.
Var attn_linear_ps(const Var& q, const Var& k, const Var& v, const FeatureMap& g);

struct AttentionFront {
  Tensor cur_r;   // d x M
  Tensor cur_s;   // M
  Tensor grad_r;  // d x M
  Tensor grad_s;  // M

  static AttentionFront zeros(std::size_t d, std::size_t m);
  std::size_t head_dim() const { return cur_r.extent(0); }
  std::size_t feature_dim() const { return cur_s.numel(); }

  // 1 x M(d+1) rows in [S, R] order.
  Tensor packed_state() const;
  Tensor packed_grad() const;
  void load_state(std::span<const double> packed);
  void load_grad(std::span<const double> packed);
};

struct AttnBlockOutput {
  Tensor y;            // B x d
  Tensor numerator;    // B x d
  Tensor denominator;  // B
};

// Scratch for one block; its extent never depends on the sequence length.
struct AttnBlockWorkspace {
  AttnBlockWorkspace(std::size_t block, std::size_t d, std::size_t m);

  std::size_t block_size;
  Tensor block_r;       // block x d x M
  Tensor block_s;       // block x M
  Tensor block_grad_r;  // block x d x M
  Tensor block_grad_s;  // block x M
};

// Consumes B rows of feature-mapped queries/keys and values, advancing the
// front's (curR, curS) by the segment's contribution. `block_size` >= 1.
AttnBlockOutput attn_block_forward(const Tensor& q_feat, const Tensor& k_feat, const Tensor& v,
                                   AttentionFront& front, std::size_t block_size);

struct AttnBlockGrads {
  Tensor q_feat;
  Tensor k_feat;
  Tensor v;
};

// Reverse block sweep. On entry `front` holds the state after the forward
// segment and, in (grad_r, grad_s), the gradient with respect to that state.
// On exit (cur_r, cur_s) are rewound to the segment-start state and
// (grad_r, grad_s) hold the gradient with respect to it.
AttnBlockGrads attn_block_backward(const Tensor& grad_numerator, const Tensor& grad_denominator,
                                   const Tensor& q_feat, const Tensor& k_feat, const Tensor& v,
                                   AttentionFront& front, std::size_t block_size);

struct AttentionVars {
  Var y;      // B x d
  Var front;  // 1 x M(d+1), packed state after the segment
};

// Differentiable block attention for one head. `front_in` (1 x M(d+1)) seeds
// the running state; an invalid Var means a zero start state.
AttentionVars causal_linear_attention(const Var& q_feat, const Var& k_feat, const Var& v,
                                      const Var& front_in, std::size_t block_size);

}  // namespace slim
