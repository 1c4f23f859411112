#include "slim/linattn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace slim {

std::size_t FeatureMap::output_dim(std::size_t d) const {
  switch (kind) {
    case FeatureMapKind::kSquare: return d;
    case FeatureMapKind::kExp: break;
  }
  throw ConfigError("feature map kind 'exp' is reserved and not implemented");
}

Tensor feature_map_apply(const FeatureMap& g, const Tensor& x) {
  g.output_dim(x.row_size());
  return square(x);
}

Var feature_map_apply(const FeatureMap& g, const Var& x) {
  g.output_dim(x.value().row_size());
  return square(x);
}

namespace {

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const char* what) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.shape() != k.shape() ||
      v.rows() != q.rows()) {
    throw DimensionError(std::string(what) + ": Q and K must share a shape and V their row count; got " +
                         shape_string(q.shape()) + ", " + shape_string(k.shape()) + ", " +
                         shape_string(v.shape()));
  }
}

double guard(double den) {
  if (den >= kDenominatorFloor) return den;
  alloc_stats().on_clamp();
  return kDenominatorFloor;
}

}  // namespace

Tensor attn_exp_oracle(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_qkv(q, k, v, "attn_exp_oracle");
  const std::size_t n = q.rows(), d = q.row_size(), dv = v.row_size();
  Tensor y({n, dv});
  std::vector<double> logits(n);
  for (std::size_t l = 0; l < n; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j <= l; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < d; ++i) s += q(l, i) * k(j, i);
      logits[j] = s;
      mx = std::max(mx, s);
    }
    double den = 0;
    for (std::size_t j = 0; j <= l; ++j) {
      const double w = std::exp(logits[j] - mx);
      den += w;
      for (std::size_t i = 0; i < dv; ++i) y(l, i) += w * v(j, i);
    }
    for (std::size_t i = 0; i < dv; ++i) y(l, i) /= den;
  }
  return y;
}

Tensor attn_linear_direct(const Tensor& q, const Tensor& k, const Tensor& v, const FeatureMap& g) {
  check_qkv(q, k, v, "attn_linear_direct");
  const Tensor qf = feature_map_apply(g, q);
  const Tensor kf = feature_map_apply(g, k);
  const std::size_t n = q.rows(), m = qf.row_size(), dv = v.row_size();
  Tensor y({n, dv});
  std::vector<double> num(dv);
  for (std::size_t l = 0; l < n; ++l) {
    std::fill(num.begin(), num.end(), 0.0);
    double den = 0;
    for (std::size_t j = 0; j <= l; ++j) {
      double w = 0;
      for (std::size_t i = 0; i < m; ++i) w += kf(j, i) * qf(l, i);
      den += w;
      for (std::size_t i = 0; i < dv; ++i) num[i] += v(j, i) * w;
    }
    const double used = guard(den);
    for (std::size_t i = 0; i < dv; ++i) y(l, i) = num[i] / used;
  }
  return y;
}

Tensor attn_linear_ps(const Tensor& q, const Tensor& k, const Tensor& v, const FeatureMap& g) {
  check_qkv(q, k, v, "attn_linear_ps");
  const Tensor qf = feature_map_apply(g, q);
  const Tensor kf = feature_map_apply(g, k);
  const std::size_t n = q.rows(), m = qf.row_size(), dv = v.row_size();
  Tensor outer({n, dv * m});
  for (std::size_t l = 0; l < n; ++l)
    for (std::size_t i = 0; i < dv; ++i)
      for (std::size_t j = 0; j < m; ++j) outer(l, i * m + j) = v(l, i) * kf(l, j);
  const Tensor r = prefix_sum(outer);
  const Tensor s = prefix_sum(kf);
  Tensor y({n, dv});
  for (std::size_t l = 0; l < n; ++l) {
    double den = 0;
    for (std::size_t j = 0; j < m; ++j) den += s(l, j) * qf(l, j);
    const double used = guard(den);
    for (std::size_t i = 0; i < dv; ++i) {
      double num = 0;
      for (std::size_t j = 0; j < m; ++j) num += r(l, i * m + j) * qf(l, j);
      y(l, i) = num / used;
    }
  }
  return y;
}

Var attn_linear_ps(const Var& q, const Var& k, const Var& v, const FeatureMap& g) {
  const Var qf = feature_map_apply(g, q);
  const Var kf = feature_map_apply(g, k);
  const Var r = prefix_sum(row_outer(v, kf));
  const Var s = prefix_sum(kf);
  return guarded_row_divide(row_matvec(r, qf), row_dot(s, qf), kDenominatorFloor);
}

// ---------------------------------------------------------------------------
// Fronts and workspaces.

AttentionFront AttentionFront::zeros(std::size_t d, std::size_t m) {
  return AttentionFront{Tensor({d, m}), Tensor({m}), Tensor({d, m}), Tensor({m})};
}

namespace {

Tensor pack(const Tensor& s, const Tensor& r) {
  Tensor out({1, s.numel() + r.numel()});
  std::copy_n(s.data(), s.numel(), out.data());
  std::copy_n(r.data(), r.numel(), out.data() + s.numel());
  return out;
}

void unpack(std::span<const double> packed, Tensor& s, Tensor& r) {
  if (packed.size() != s.numel() + r.numel()) {
    throw DimensionError("attention front: packed state has " + std::to_string(packed.size()) +
                         " entries, expected " + std::to_string(s.numel() + r.numel()));
  }
  std::copy_n(packed.data(), s.numel(), s.data());
  std::copy_n(packed.data() + s.numel(), r.numel(), r.data());
}

}  // namespace

Tensor AttentionFront::packed_state() const { return pack(cur_s, cur_r); }
Tensor AttentionFront::packed_grad() const { return pack(grad_s, grad_r); }
void AttentionFront::load_state(std::span<const double> packed) { unpack(packed, cur_s, cur_r); }
void AttentionFront::load_grad(std::span<const double> packed) { unpack(packed, grad_s, grad_r); }

AttnBlockWorkspace::AttnBlockWorkspace(std::size_t block, std::size_t d, std::size_t m)
    : block_size(block),
      block_r({block, d, m}),
      block_s({block, m}),
      block_grad_r({block, d, m}),
      block_grad_s({block, m}) {}

// ---------------------------------------------------------------------------
// Block-iterative kernels.
//
// Within a block the running state is advanced by a seeded scan: row l' of
// blockR is curR + sum_{j<=l'} V_j K_j^T, accumulated one row at a time, so
// the state handed to the next block is exactly the scan's last row. The
// backward sweep runs the same scans in reverse, subtracting rows from the
// saved end state and adding upstream terms to the gradient front, so every
// block costs work proportional to its row count.

namespace {

void check_front(const AttentionFront& f, std::size_t d, std::size_t m) {
  if (f.cur_r.rows() != d || f.cur_r.row_size() != m || f.cur_s.numel() != m ||
      f.grad_r.numel() != d * m || f.grad_s.numel() != m) {
    throw DimensionError("attention front does not match head dimensions d=" + std::to_string(d) +
                         ", M=" + std::to_string(m));
  }
}

}  // namespace

AttnBlockOutput attn_block_forward(const Tensor& q_feat, const Tensor& k_feat, const Tensor& v,
                                   AttentionFront& front, std::size_t block_size) {
  check_qkv(q_feat, k_feat, v, "attn_block_forward");
  if (block_size == 0) throw ConfigError("attention block size must be at least 1");
  const std::size_t n = q_feat.rows(), m = q_feat.row_size(), d = v.row_size();
  check_front(front, d, m);
  const std::size_t cap = std::min(block_size, std::max<std::size_t>(n, 1));
  Tensor block_r({cap, d, m});
  Tensor block_s({cap, m});
  AttnBlockOutput out{Tensor({n, d}), Tensor({n, d}), Tensor({n})};
  const std::size_t dm = d * m;

  for (std::size_t b0 = 0; b0 < n; b0 += cap) {
    const std::size_t nb = std::min(cap, n - b0);
    for (std::size_t j = 0; j < nb; ++j) {
      const std::size_t l = b0 + j;
      const double* prev_r = j == 0 ? front.cur_r.data() : block_r.data() + (j - 1) * dm;
      const double* prev_s = j == 0 ? front.cur_s.data() : block_s.data() + (j - 1) * m;
      double* br = block_r.data() + j * dm;
      double* bs = block_s.data() + j * m;
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t c = 0; c < m; ++c) br[i * m + c] = prev_r[i * m + c] + v(l, i) * k_feat(l, c);
      for (std::size_t c = 0; c < m; ++c) bs[c] = prev_s[c] + k_feat(l, c);

      double den = 0;
      for (std::size_t c = 0; c < m; ++c) den += bs[c] * q_feat(l, c);
      out.denominator[l] = den;
      const double used = guard(den);
      for (std::size_t i = 0; i < d; ++i) {
        double num = 0;
        for (std::size_t c = 0; c < m; ++c) num += br[i * m + c] * q_feat(l, c);
        out.numerator(l, i) = num;
        out.y(l, i) = num / used;
      }
    }
    std::copy_n(block_r.data() + (nb - 1) * dm, dm, front.cur_r.data());
    std::copy_n(block_s.data() + (nb - 1) * m, m, front.cur_s.data());
  }
  // scan (d*M + M), numerator (d*M), denominator (M), division (d) per row
  charge_flops(n * (2 * dm + 2 * m + d));
  return out;
}

AttnBlockGrads attn_block_backward(const Tensor& grad_numerator, const Tensor& grad_denominator,
                                   const Tensor& q_feat, const Tensor& k_feat, const Tensor& v,
                                   AttentionFront& front, std::size_t block_size) {
  check_qkv(q_feat, k_feat, v, "attn_block_backward");
  if (block_size == 0) throw ConfigError("attention block size must be at least 1");
  const std::size_t n = q_feat.rows(), m = q_feat.row_size(), d = v.row_size();
  check_front(front, d, m);
  if (grad_numerator.rows() != n || grad_numerator.row_size() != d ||
      grad_denominator.numel() != n) {
    throw DimensionError("attn_block_backward: upstream gradients do not match the segment");
  }
  const std::size_t cap = std::min(block_size, std::max<std::size_t>(n, 1));
  AttnBlockWorkspace ws(cap, d, m);
  AttnBlockGrads grads{Tensor(q_feat.shape()), Tensor(k_feat.shape()), Tensor(v.shape())};
  const std::size_t dm = d * m;
  const std::size_t blocks = n == 0 ? 0 : (n + cap - 1) / cap;

  for (std::size_t b = blocks; b-- > 0;) {
    const std::size_t b0 = b * cap;
    const std::size_t nb = std::min(cap, n - b0);

    // Rewind: blockR rows from the end state back through the block.
    for (std::size_t j = nb; j-- > 0;) {
      const std::size_t l = b0 + j;
      const double* next_r = j + 1 == nb ? front.cur_r.data() : ws.block_r.data() + (j + 1) * dm;
      const double* next_s = j + 1 == nb ? front.cur_s.data() : ws.block_s.data() + (j + 1) * m;
      double* br = ws.block_r.data() + j * dm;
      double* bs = ws.block_s.data() + j * m;
      if (j + 1 == nb) {
        std::copy_n(next_r, dm, br);
        std::copy_n(next_s, m, bs);
      } else {
        const std::size_t ln = l + 1;
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t c = 0; c < m; ++c)
            br[i * m + c] = next_r[i * m + c] - v(ln, i) * k_feat(ln, c);
        for (std::size_t c = 0; c < m; ++c) bs[c] = next_s[c] - k_feat(ln, c);
      }
    }
    // Front at the block start.
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t c = 0; c < m; ++c)
        front.cur_r(i, c) = ws.block_r[i * m + c] - v(b0, i) * k_feat(b0, c);
    for (std::size_t c = 0; c < m; ++c) front.cur_s[c] = ws.block_s[c] - k_feat(b0, c);

    // Query gradients from the reconstructed block state.
    for (std::size_t j = 0; j < nb; ++j) {
      const std::size_t l = b0 + j;
      const double* br = ws.block_r.data() + j * dm;
      const double* bs = ws.block_s.data() + j * m;
      for (std::size_t c = 0; c < m; ++c) {
        double acc = grad_denominator[l] * bs[c];
        for (std::size_t i = 0; i < d; ++i) acc += br[i * m + c] * grad_numerator(l, i);
        grads.q_feat(l, c) = acc;
      }
    }

    // Gradient with respect to each row's contribution: the gradient front at
    // the block end plus upstream terms from this row to the block end.
    for (std::size_t j = nb; j-- > 0;) {
      const std::size_t l = b0 + j;
      const double* next_r = j + 1 == nb ? front.grad_r.data() : ws.block_grad_r.data() + (j + 1) * dm;
      const double* next_s = j + 1 == nb ? front.grad_s.data() : ws.block_grad_s.data() + (j + 1) * m;
      double* gr = ws.block_grad_r.data() + j * dm;
      double* gs = ws.block_grad_s.data() + j * m;
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t c = 0; c < m; ++c)
          gr[i * m + c] = next_r[i * m + c] + grad_numerator(l, i) * q_feat(l, c);
      for (std::size_t c = 0; c < m; ++c) gs[c] = next_s[c] + grad_denominator[l] * q_feat(l, c);
    }
    std::copy_n(ws.block_grad_r.data(), dm, front.grad_r.data());
    std::copy_n(ws.block_grad_s.data(), m, front.grad_s.data());

    for (std::size_t j = 0; j < nb; ++j) {
      const std::size_t l = b0 + j;
      const double* gr = ws.block_grad_r.data() + j * dm;
      const double* gs = ws.block_grad_s.data() + j * m;
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0;
        for (std::size_t c = 0; c < m; ++c) acc += gr[i * m + c] * k_feat(l, c);
        grads.v(l, i) = acc;
      }
      for (std::size_t c = 0; c < m; ++c) {
        double acc = gs[c];
        for (std::size_t i = 0; i < d; ++i) acc += gr[i * m + c] * v(l, i);
        grads.k_feat(l, c) = acc;
      }
    }
  }
  // rewind scan, query gradient, gradient scan, value and key gradients
  charge_flops(n * (5 * dm + 4 * m));
  return grads;
}

// ---------------------------------------------------------------------------
// Differentiable wrapper.

AttentionVars causal_linear_attention(const Var& q_feat, const Var& k_feat, const Var& v,
                                      const Var& front_in, std::size_t block_size) {
  Tape& tape = q_feat.tape();
  const Tensor& qv = q_feat.value();
  const Tensor& vv = v.value();
  const std::size_t m = qv.row_size(), d = vv.row_size();
  AttentionFront front = AttentionFront::zeros(d, m);
  std::vector<Var> inputs{q_feat, k_feat, v};
  if (front_in.valid()) {
    front.load_state(front_in.value().values());
    inputs.push_back(front_in);
  }
  AttnBlockOutput out = attn_block_forward(qv, k_feat.value(), vv, front, block_size);

  std::vector<Tensor> outputs;
  outputs.push_back(std::move(out.y));
  outputs.push_back(front.packed_state());
  std::vector<Tensor> saved;
  saved.push_back(std::move(out.denominator));

  auto vars = tape.record(
      "causal_linear_attention", std::move(inputs), std::move(outputs), std::move(saved),
      [d, m, block_size](BackwardContext& ctx) {
        const Tensor& y = ctx.output(0);
        const Tensor& den = ctx.saved(0);
        const std::size_t n = y.rows();
        Tensor grad_num({n, d});
        Tensor grad_den({n});
        if (const Tensor* gy = ctx.out_grad(0)) {
          for (std::size_t l = 0; l < n; ++l) {
            const bool clamped = !(den[l] >= kDenominatorFloor);
            const double used = clamped ? kDenominatorFloor : den[l];
            double s = 0;
            for (std::size_t i = 0; i < d; ++i) {
              grad_num(l, i) = (*gy)(l, i) / used;
              s += (*gy)(l, i) * y(l, i);
            }
            grad_den[l] = clamped ? 0.0 : -s / used;
          }
        }
        charge_flops(2 * n * d);

        AttentionFront front = AttentionFront::zeros(d, m);
        front.load_state(ctx.output(1).values());
        if (const Tensor* gf = ctx.out_grad(1)) front.load_grad(gf->values());
        AttnBlockGrads g = attn_block_backward(grad_num, grad_den, ctx.input(0), ctx.input(1),
                                               ctx.input(2), front, block_size);
        auto accumulate = [&](std::size_t i, const Tensor& src) {
          if (!ctx.needs_grad(i)) return;
          Tensor& dst = ctx.grad(i);
          for (std::size_t j = 0; j < src.numel(); ++j) dst[j] += src[j];
        };
        accumulate(0, g.q_feat);
        accumulate(1, g.k_feat);
        accumulate(2, g.v);
        if (ctx.needs_grad(0) || ctx.needs_grad(1) || ctx.needs_grad(2)) charge_flops(n * (2 * m + d));
        if (ctx.input_count() > 3 && ctx.needs_grad(3)) {
          const Tensor packed = front.packed_grad();
          Tensor& dst = ctx.grad(3);
          for (std::size_t j = 0; j < packed.numel(); ++j) dst[j] += packed[j];
        }
      });
  return AttentionVars{vars[0], vars[1]};
}

}  // namespace slim
