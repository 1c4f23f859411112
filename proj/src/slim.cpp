#include "slim/slim.hpp"

#include <algorithm>

#include "slim/errors.hpp"
#include "slim/instrument.hpp"

namespace slim {

ChunkPlan::ChunkPlan(std::size_t seq_len_, std::size_t chunk_)
    : seq_len(seq_len_), chunk(chunk_), count(0) {
  if (seq_len == 0) throw ConfigError("chunk plan: sequence length must be positive");
  if (chunk == 0 || chunk > seq_len) {
    throw ConfigError("chunk plan: C must lie in [1, " + std::to_string(seq_len) + "], got " +
                      std::to_string(chunk));
  }
  count = (seq_len + chunk - 1) / chunk;
}

std::size_t ChunkPlan::size(std::size_t n) const {
  if (n >= count) throw DimensionError("chunk plan: chunk index out of range");
  return std::min(chunk, seq_len - offset(n));
}

std::vector<std::size_t> ChunkPlan::sizes() const {
  std::vector<std::size_t> out;
  for (std::size_t n = 0; n < count; ++n) out.push_back(size(n));
  return out;
}

Buffers Buffers::zeros(const ModelConfig& cfg) {
  MemoryCategoryScope persistent(MemoryCategory::kPersistent);
  return Buffers{Tensor({cfg.layers, cfg.d1()}), Tensor({cfg.layers, cfg.d1()})};
}

namespace {

Tensor row_copy(const Tensor& m, std::size_t r) {
  const std::size_t w = m.row_size();
  Tensor out({1, w});
  std::copy_n(m.data() + r * w, w, out.data());
  return out;
}

void store_row(Tensor& m, std::size_t r, const Tensor& row) {
  const std::size_t w = m.row_size();
  if (row.numel() != w) throw DimensionError("boundary row width mismatch");
  std::copy_n(row.data(), w, m.data() + r * w);
}

void check_sequence(std::span<const int> tokens, const ModelConfig& cfg, const LossMask& mask) {
  cfg.validate();
  if (tokens.size() < 2) throw ConfigError("sequence length must be at least 2");
  if (mask.size() != tokens.size()) throw DimensionError("loss mask length differs from sequence length");
}

}  // namespace

ForwardPassResult chunk_forward_pass(std::span<const int> tokens, const Params& params,
                                     const ModelConfig& cfg, const ChunkPlan& plan,
                                     const LossMask& mask) {
  check_sequence(tokens, cfg, mask);
  if (plan.seq_len != tokens.size()) throw DimensionError("chunk plan length differs from sequence length");
  ForwardPassResult out;
  {
    MemoryCategoryScope persistent(MemoryCategory::kPersistent);
    out.boundary = Tensor({cfg.layers, cfg.d1()});
  }
  FlopPhaseScope phase(FlopPhase::kForward);
  for (std::size_t n = 0; n < plan.count; ++n) {
    const std::uint64_t clamps = alloc_stats().clamp_events();
    Tape tape;
    const ParamVars pv = bind_constant_params(tape, params);
    SegmentHooks hooks;
    hooks.boundary_in = [&](std::size_t r, std::span<const Tensor>, std::span<const Tensor>) {
      return tape.constant(row_copy(out.boundary, r));
    };
    hooks.boundary_out = [&](std::size_t r, const Var& state) { store_row(out.boundary, r, state.value()); };
    const Var loss = run_segment(pv, cfg, tokens, plan.offset(n), plan.size(n), mask, AttentionMode::kBlock, hooks);
    out.loss += loss.value()[0];
    out.clamp_counts.push_back(alloc_stats().clamp_events() - clamps);
  }
  return out;
}

Tensor chunk_t_sum(std::span<const Tensor> k_feat, std::span<const Tensor> v) {
  if (k_feat.size() != v.size() || k_feat.empty()) throw DimensionError("chunk_t_sum: head lists differ");
  const std::size_t heads = k_feat.size(), m = k_feat[0].row_size(), d = v[0].row_size();
  const std::size_t w = m * (d + 1);
  Tensor sum({1, heads * w});
  std::size_t rows = 0;
  for (std::size_t j = 0; j < heads; ++j) {
    const Tensor& k = k_feat[j];
    const Tensor& vv = v[j];
    rows = k.rows();
    double* s = sum.data() + j * w;
    double* r = s + m;
    for (std::size_t l = 0; l < k.rows(); ++l) {
      if (l == 0) {
        for (std::size_t c = 0; c < m; ++c) s[c] = k(l, c);
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t c = 0; c < m; ++c) r[i * m + c] = vv(l, i) * k(l, c);
      } else {
        for (std::size_t c = 0; c < m; ++c) s[c] += k(l, c);
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t c = 0; c < m; ++c) r[i * m + c] += vv(l, i) * k(l, c);
      }
    }
  }
  charge_flops(rows * heads * w);
  return sum;
}

void rewind_boundary(Tensor& b, std::size_t layer, const Tensor& t_sum) {
  const std::size_t w = b.row_size();
  if (layer >= b.rows() || t_sum.numel() != w) throw DimensionError("rewind_boundary: shape mismatch");
  double* row = b.data() + layer * w;
  for (std::size_t i = 0; i < w; ++i) row[i] -= t_sum[i];
  charge_flops(w);
}

namespace {

using BoundaryProvider =
    std::function<Tensor(std::size_t layer, std::span<const Tensor> k_feat, std::span<const Tensor> v)>;

PhiResult build_phi(std::span<const int> tokens, const Params& params, const ModelConfig& cfg,
                    const ChunkPlan& plan, std::size_t n, const LossMask& mask, const Tensor& z,
                    Params& grad_accum, const BoundaryProvider& provider) {
  if (z.rows() != cfg.layers || z.row_size() != cfg.d1()) throw DimensionError("phi: Z must be layers x D1");
  Tape tape;
  const ParamVars pv = bind_params(tape, params, &grad_accum);
  std::vector<Var> entering(cfg.layers), leaving(cfg.layers);
  SegmentHooks hooks;
  hooks.boundary_in = [&](std::size_t r, std::span<const Tensor> k, std::span<const Tensor> v) {
    entering[r] = tape.leaf(provider(r, k, v));
    return entering[r];
  };
  hooks.boundary_out = [&](std::size_t r, const Var& state) { leaving[r] = state; };

  Var loss;
  {
    FlopPhaseScope phase(FlopPhase::kReplay);
    loss = run_segment(pv, cfg, tokens, plan.offset(n), plan.size(n), mask, AttentionMode::kBlock, hooks);
  }
  Var phi = loss;
  {
    FlopPhaseScope phase(FlopPhase::kBoundary);
    for (std::size_t r = 0; r < cfg.layers; ++r) {
      const Var zr = stop_gradient(tape.constant(row_copy(z, r)));
      phi = add(phi, dot(zr, leaving[r]));
    }
  }
  PhiResult out;
  out.chunk_loss = loss.value()[0];
  out.phi = phi.value()[0];
  const GradMap grads = tape.backward(phi);
  out.grad_b_prev = Tensor({cfg.layers, cfg.d1()});
  for (std::size_t r = 0; r < cfg.layers; ++r) store_row(out.grad_b_prev, r, grads.at(entering[r]));
  tape.release();
  return out;
}

}  // namespace

PhiResult phi_build_and_grad(std::span<const int> tokens, const Params& params,
                             const ModelConfig& cfg, const ChunkPlan& plan, std::size_t n,
                             const LossMask& mask, const Tensor& b_prev, const Tensor& z,
                             Params& grad_accum) {
  check_sequence(tokens, cfg, mask);
  if (b_prev.rows() != cfg.layers || b_prev.row_size() != cfg.d1()) {
    throw DimensionError("phi: B must be layers x D1");
  }
  return build_phi(tokens, params, cfg, plan, n, mask, z, grad_accum,
                   [&](std::size_t r, std::span<const Tensor>, std::span<const Tensor>) {
                     return row_copy(b_prev, r);
                   });
}

SlimResult slim_grad(std::span<const int> tokens, const Params& params, const ModelConfig& cfg,
                     std::size_t chunk, const LossMask& mask) {
  check_sequence(tokens, cfg, mask);
  const ChunkPlan plan(tokens.size(), chunk);
  SlimResult res;
  res.buffers = Buffers::zeros(cfg);
  {
    MemoryCategoryScope persistent(MemoryCategory::kPersistent);
    res.grad = Params::zeros(cfg);
  }
  Buffers& buf = res.buffers;

  // Forward: only the loss and the terminal boundary state are kept.
  std::vector<std::uint64_t> clamp_counts(plan.count);
  {
    FlopPhaseScope phase(FlopPhase::kForward);
    for (std::size_t n = 0; n < plan.count; ++n) {
      const std::uint64_t before = alloc_stats().clamp_events();
      Tape tape;
      const ParamVars pv = bind_constant_params(tape, params);
      SegmentHooks hooks;
      hooks.boundary_in = [&](std::size_t r, std::span<const Tensor>, std::span<const Tensor>) {
        return tape.constant(row_copy(buf.b, r));
      };
      hooks.boundary_out = [&](std::size_t r, const Var& state) { store_row(buf.b, r, state.value()); };
      const Var loss =
          run_segment(pv, cfg, tokens, plan.offset(n), plan.size(n), mask, AttentionMode::kBlock, hooks);
      res.loss += loss.value()[0];
      clamp_counts[n] = alloc_stats().clamp_events() - before;
    }
  }

  // Backward: G starts at zero; each replay rewinds B layer by layer.
  buf.g.fill(0.0);
  for (std::size_t n = plan.count; n-- > 0;) {
    const std::uint64_t before = alloc_stats().clamp_events();
    PhiResult phi = build_phi(tokens, params, cfg, plan, n, mask, buf.g, res.grad,
                              [&](std::size_t r, std::span<const Tensor> k, std::span<const Tensor> v) {
                                Tensor t;
                                {
                                  FlopPhaseScope phase(FlopPhase::kRewind);
                                  t = chunk_t_sum(k, v);
                                }
                                {
                                  FlopPhaseScope phase(FlopPhase::kBoundary);
                                  rewind_boundary(buf.b, r, t);
                                }
                                return row_copy(buf.b, r);
                              });
    const std::uint64_t replay_clamps = alloc_stats().clamp_events() - before;
    if (replay_clamps != clamp_counts[n]) {
      throw Error("slim_grad: chunk " + std::to_string(n) + " clamped " + std::to_string(replay_clamps) +
                  " denominators on replay but " + std::to_string(clamp_counts[n]) + " in the forward pass");
    }
    std::copy_n(phi.grad_b_prev.data(), buf.g.numel(), buf.g.data());
  }
  return res;
}

bool FlopReport::identities_hold() const {
  return slim_forward == full_forward && slim_replay == full_forward &&
         slim_backward == full_backward && slim_rewind == expected_rewind;
}

FlopReport flop_report(std::span<const int> tokens, const Params& params, const ModelConfig& cfg,
                       std::size_t chunk, const LossMask& mask) {
  FlopLedger& ledger = flop_ledger();
  const FlopLedger saved = ledger;
  FlopReport rep;

  ledger.reset();
  {
    FlopPhaseScope phase(FlopPhase::kForward);
    forward_full(tokens, params, cfg, mask, AttentionMode::kBlock);
  }
  rep.full_forward = ledger.count(FlopPhase::kForward);
  rep.full_backward = ledger.count(FlopPhase::kBackward);

  ledger.reset();
  slim_grad(tokens, params, cfg, chunk, mask);
  rep.slim_forward = ledger.count(FlopPhase::kForward);
  rep.slim_replay = ledger.count(FlopPhase::kReplay);
  rep.slim_backward = ledger.count(FlopPhase::kBackward);
  rep.slim_rewind = ledger.count(FlopPhase::kRewind);
  rep.slim_boundary = ledger.count(FlopPhase::kBoundary);
  rep.expected_rewind = static_cast<std::uint64_t>(tokens.size()) * cfg.layers * cfg.d1();

  ledger = saved;
  return rep;
}

}  // namespace slim
