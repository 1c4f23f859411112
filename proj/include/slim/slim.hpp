#pragma once

// Exact gradients of the sequence loss in memory proportional to the chunk
// length C rather than the sequence length L.
//
// Forward: chunks n = 1..N are processed in order; each layer's attention is
// seeded from the boundary buffer B (one prefix-sum row per layer) and B is
// overwritten with the state after the chunk. Only the loss and the terminal
// B survive.
//
// Backward: chunks n = N..1 are replayed. Before layer r's attention the
// replay subtracts the chunk's T-row sum from B_r, recovering the state that
// entered the chunk. The surrogate
//     Phi = chunk loss + sum_r <stop_grad(G_r), B_r after the chunk>
// is differentiated once: its parameter gradient is added to the total and
// its gradient with respect to the entering state becomes the next G.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "slim/performer.hpp"

namespace slim {

struct ChunkPlan {
  ChunkPlan(std::size_t seq_len, std::size_t chunk);

  std::size_t seq_len;
  std::size_t chunk;
  std::size_t count;  // ceil(L / C)

  // Zero-based chunk index n in [0, count).
  std::size_t offset(std::size_t n) const { return n * chunk; }
  std::size_t size(std::size_t n) const;
  std::vector<std::size_t> sizes() const;
};

// Persistent boundary state and its gradient, both layers x D1.
struct Buffers {
  Tensor b;
  Tensor g;

  static Buffers zeros(const ModelConfig& cfg);
  // Scalars held: 2 * layers * D1.
  std::size_t scalar_count() const { return b.numel() + g.numel(); }
};

struct ForwardPassResult {
  double loss = 0;
  Tensor boundary;                            // B after the last chunk
  std::vector<std::uint64_t> clamp_counts;    // denominator clamps per chunk
};

ForwardPassResult chunk_forward_pass(std::span<const int> tokens, const Params& params,
                                     const ModelConfig& cfg, const ChunkPlan& plan,
                                     const LossMask& mask);

// Packed [sum g(K), sum V (x) g(K)] per head over a chunk's rows for one
// layer (1 x D1), accumulated row by row in the order the forward kernel
// advances its fronts.
Tensor chunk_t_sum(std::span<const Tensor> k_feat, std::span<const Tensor> v);

// B_layer -= t_sum.
void rewind_boundary(Tensor& b, std::size_t layer, const Tensor& t_sum);

struct PhiResult {
  double phi = 0;
  double chunk_loss = 0;
  Tensor grad_b_prev;  // layers x D1
};

// Replays chunk n from the given entering state, evaluates Phi with the given
// Z (layers x D1) and adds its parameter gradient into `grad_accum`.
PhiResult phi_build_and_grad(std::span<const int> tokens, const Params& params,
                             const ModelConfig& cfg, const ChunkPlan& plan, std::size_t n,
                             const LossMask& mask, const Tensor& b_prev, const Tensor& z,
                             Params& grad_accum);

struct SlimResult {
  double loss = 0;
  Params grad;
  Buffers buffers;  // state left after the backward sweep
};

SlimResult slim_grad(std::span<const int> tokens, const Params& params, const ModelConfig& cfg,
                     std::size_t chunk, const LossMask& mask);

struct FlopReport {
  std::uint64_t full_forward = 0;
  std::uint64_t full_backward = 0;
  std::uint64_t slim_forward = 0;
  std::uint64_t slim_replay = 0;
  std::uint64_t slim_backward = 0;
  std::uint64_t slim_rewind = 0;
  std::uint64_t slim_boundary = 0;  // per-chunk terms, reported separately
  std::uint64_t expected_rewind = 0;  // L * s * M(d+1) * k

  std::uint64_t slim_total() const { return slim_forward + slim_replay + slim_backward + slim_rewind; }
  bool identities_hold() const;
};

// Operation counts of the whole-sequence block-mode gradient and of slim_grad.
FlopReport flop_report(std::span<const int> tokens, const Params& params, const ModelConfig& cfg,
                       std::size_t chunk, const LossMask& mask);

}  // namespace slim
