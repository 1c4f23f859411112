#include "slim/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace slim {

// ---------------------------------------------------------------------------
// Var / GradMap

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw TapeError("use of an unbound Var");
  return tape_->value(*this);
}

Tape& Var::tape() const {
  if (tape_ == nullptr) throw TapeError("use of an unbound Var");
  return *tape_;
}

bool Var::requires_grad() const { return tape().requires_grad(*this); }

const Tensor& GradMap::at(const Var& v) const {
  auto it = grads_.find(v.node());
  if (it == grads_.end()) throw TapeError("no gradient recorded for node " + std::to_string(v.node()));
  return it->second;
}

// ---------------------------------------------------------------------------
// Tape

Tape::~Tape() = default;

void Tape::check_owned(const Var& v) const {
  if (v.tape_ != this) throw TapeError("Var belongs to a different tape");
  if (released_) throw TapeError("tape has been released");
  if (v.node_ >= nodes_.size()) throw TapeError("Var refers to a missing node");
}

const Tensor& Tape::value(const Var& v) const {
  check_owned(v);
  const Node& n = nodes_[v.node_];
  if (n.external != nullptr) return *n.external;
  return n.outputs.at(v.slot_);
}

bool Tape::requires_grad(const Var& v) const {
  check_owned(v);
  return nodes_[v.node_].requires_grad;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (released_) throw TapeError("tape has been released");
  Node n;
  n.kind = requires_grad ? "leaf" : "constant";
  n.outputs.push_back(std::move(value));
  n.grads.resize(1);
  n.requires_grad = requires_grad;
  n.leaf = true;
  n.phase = flop_ledger().phase();
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1, 0);
}

Var Tape::parameter(const Tensor& value, Tensor* grad_sink) {
  if (released_) throw TapeError("tape has been released");
  if (grad_sink != nullptr && grad_sink->shape() != value.shape()) {
    throw DimensionError("parameter: gradient sink shape " + shape_string(grad_sink->shape()) +
                         " differs from value shape " + shape_string(value.shape()));
  }
  Node n;
  n.kind = "parameter";
  n.external = &value;
  n.grads.resize(1);
  n.sink = grad_sink;
  n.requires_grad = true;
  n.leaf = true;
  n.phase = flop_ledger().phase();
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1, 0);
}

Var Tape::external(const Tensor& value) {
  if (released_) throw TapeError("tape has been released");
  Node n;
  n.kind = "external";
  n.external = &value;
  n.grads.resize(1);
  n.leaf = true;
  n.phase = flop_ledger().phase();
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1, 0);
}

std::vector<Var> Tape::record(const char* kind, std::vector<Var> inputs,
                              std::vector<Tensor> outputs, std::vector<Tensor> saved,
                              BackwardFn backward) {
  if (released_) throw TapeError("tape has been released");
  bool needs = false;
  for (const Var& v : inputs) {
    check_owned(v);
    needs = needs || nodes_[v.node_].requires_grad;
  }
  Node n;
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.grads.resize(outputs.size());
  n.outputs = std::move(outputs);
  n.requires_grad = needs && static_cast<bool>(backward);
  if (n.requires_grad) {
    n.saved = std::move(saved);
    n.backward = std::move(backward);
  }
  n.phase = flop_ledger().phase();
  const std::size_t id = nodes_.size();
  const std::size_t slots = n.outputs.size();
  nodes_.push_back(std::move(n));
  std::vector<Var> out;
  out.reserve(slots);
  for (std::size_t s = 0; s < slots; ++s) out.push_back(Var(this, id, s));
  return out;
}

Var Tape::record1(const char* kind, std::vector<Var> inputs, Tensor output,
                  std::vector<Tensor> saved, BackwardFn backward) {
  std::vector<Tensor> outputs;
  outputs.push_back(std::move(output));
  return record(kind, std::move(inputs), std::move(outputs), std::move(saved),
                std::move(backward))[0];
}

Var Tape::alias_without_grad(const Var& source, const char* kind) {
  check_owned(source);
  Node n;
  n.kind = kind;
  n.external = &value(source);
  n.grads.resize(1);
  n.phase = flop_ledger().phase();
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1, 0);
}

Tensor& Tape::grad_slot(const Var& v) {
  Node& n = nodes_[v.node_];
  if (n.sink != nullptr) return *n.sink;
  Tensor& g = n.grads[v.slot_];
  if (g.empty()) g = Tensor(value(v).shape());
  return g;
}

namespace {

FlopPhase backward_phase(FlopPhase forward) {
  return forward == FlopPhase::kBoundary ? FlopPhase::kBoundary : FlopPhase::kBackward;
}

}  // namespace

GradMap Tape::backward(const Var& root) {
  check_owned(root);
  if (value(root).numel() != 1) {
    throw TapeError("backward: root must be scalar, got shape " +
                    shape_string(value(root).shape()));
  }
  visits_ = 0;
  GradMap result;
  if (nodes_[root.node_].requires_grad) {
    Tensor seed(value(root).shape(), 1.0);
    Node& r = nodes_[root.node_];
    if (r.sink != nullptr) {
      (*r.sink)[0] += 1.0;
    } else {
      r.grads[root.slot_] = std::move(seed);
    }
    for (std::size_t id = root.node_ + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad) continue;
      const bool reached =
          std::any_of(n.grads.begin(), n.grads.end(), [](const Tensor& g) { return !g.empty(); });
      if (n.leaf) {
        if (n.sink == nullptr && reached) result.grads_[id] = std::move(n.grads[0]);
        continue;
      }
      if (!reached) continue;
      {
        FlopPhaseScope phase(backward_phase(n.phase));
        BackwardContext ctx(*this, n);
        n.backward(ctx);
      }
      ++visits_;
      for (Tensor& g : n.grads) g.release();
    }
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.leaf && n.requires_grad && n.sink == nullptr && !result.grads_.count(id)) {
      result.grads_[id] = Tensor(value(Var(this, id, 0)).shape());
    }
  }
  return result;
}

void Tape::release() {
  if (released_) return;
  nodes_.clear();
  nodes_.shrink_to_fit();
  released_ = true;
}

std::size_t Tape::live_bytes() const {
  std::size_t total = 0;
  for (const Node& n : nodes_) {
    for (const Tensor& t : n.outputs) total += t.bytes();
    for (const Tensor& t : n.saved) total += t.bytes();
    for (const Tensor& t : n.grads) total += t.bytes();
  }
  return total;
}

// ---------------------------------------------------------------------------
// BackwardContext

const Tensor* BackwardContext::out_grad(std::size_t slot) const {
  const Tensor& g = node_.grads.at(slot);
  return g.empty() ? nullptr : &g;
}

const Tensor& BackwardContext::input(std::size_t i) const {
  return tape_.value(node_.inputs.at(i));
}

const Tensor& BackwardContext::output(std::size_t slot) const { return node_.outputs.at(slot); }

const Tensor& BackwardContext::saved(std::size_t i) const { return node_.saved.at(i); }

bool BackwardContext::needs_grad(std::size_t i) const {
  return tape_.requires_grad(node_.inputs.at(i));
}

Tensor& BackwardContext::grad(std::size_t i) { return tape_.grad_slot(node_.inputs.at(i)); }

// ---------------------------------------------------------------------------
// Primitives

namespace {

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw TapeError("operands belong to different tapes");
}

// g += src without charging (pure data movement in the backward of views).
void accumulate_uncharged(Tensor& g, std::span<const double> src, std::size_t offset = 0) {
  for (std::size_t i = 0; i < src.size(); ++i) g[offset + i] += src[i];
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return a.tape().record1("add", {a, b}, slim::add(a.value(), b.value()), {},
                          [](BackwardContext& ctx) {
                            const Tensor& g = *ctx.out_grad();
                            if (ctx.needs_grad(0)) axpy(ctx.grad(0), 1.0, g);
                            if (ctx.needs_grad(1)) axpy(ctx.grad(1), 1.0, g);
                          });
}

Var sub(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return a.tape().record1("sub", {a, b}, slim::sub(a.value(), b.value()), {},
                          [](BackwardContext& ctx) {
                            const Tensor& g = *ctx.out_grad();
                            if (ctx.needs_grad(0)) axpy(ctx.grad(0), 1.0, g);
                            if (ctx.needs_grad(1)) axpy(ctx.grad(1), -1.0, g);
                          });
}

Var mul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return a.tape().record1("mul", {a, b}, hadamard(a.value(), b.value()), {},
                          [](BackwardContext& ctx) {
                            const Tensor& g = *ctx.out_grad();
                            if (ctx.needs_grad(0)) {
                              Tensor& ga = ctx.grad(0);
                              const Tensor& bv = ctx.input(1);
                              for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
                              charge_flops(g.numel());
                            }
                            if (ctx.needs_grad(1)) {
                              Tensor& gb = ctx.grad(1);
                              const Tensor& av = ctx.input(0);
                              for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
                              charge_flops(g.numel());
                            }
                          });
}

Var scale(const Var& x, double c) {
  return x.tape().record1("scale", {x}, slim::scale(x.value(), c), {},
                          [c](BackwardContext& ctx) { axpy(ctx.grad(0), c, *ctx.out_grad()); });
}

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return a.tape().record1("matmul", {a, b}, slim::matmul(a.value(), b.value()), {},
                          [](BackwardContext& ctx) {
                            const Tensor& g = *ctx.out_grad();
                            if (ctx.needs_grad(0))
                              matmul_accumulate(ctx.grad(0), g, false, ctx.input(1), true);
                            if (ctx.needs_grad(1))
                              matmul_accumulate(ctx.grad(1), ctx.input(0), true, g, false);
                          });
}

Var add_row_broadcast(const Var& x, const Var& row) {
  require_same_tape(x, row);
  return x.tape().record1("add_row_broadcast", {x, row},
                          slim::add_row_broadcast(x.value(), row.value()), {},
                          [](BackwardContext& ctx) {
                            const Tensor& g = *ctx.out_grad();
                            if (ctx.needs_grad(0)) axpy(ctx.grad(0), 1.0, g);
                            if (ctx.needs_grad(1)) {
                              Tensor& gr = ctx.grad(1);
                              const std::size_t w = g.row_size();
                              for (std::size_t i = 0; i < g.rows(); ++i)
                                for (std::size_t j = 0; j < w; ++j) gr[j] += g[i * w + j];
                              charge_flops(g.numel());
                            }
                          });
}

Var square(const Var& x) {
  return x.tape().record1("square", {x}, slim::square(x.value()), {}, [](BackwardContext& ctx) {
    const Tensor& g = *ctx.out_grad();
    const Tensor& xv = ctx.input(0);
    Tensor& gx = ctx.grad(0);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += 2.0 * xv[i] * g[i];
    charge_flops(g.numel());
  });
}

Var gelu(const Var& x) {
  return x.tape().record1("gelu", {x}, slim::gelu(x.value()), {}, [](BackwardContext& ctx) {
    const Tensor& g = *ctx.out_grad();
    const Tensor& xv = ctx.input(0);
    Tensor& gx = ctx.grad(0);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += gelu_derivative(xv[i]) * g[i];
    charge_flops(g.numel());
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  require_same_tape(x, gain);
  require_same_tape(x, bias);
  auto r = layer_norm_with_stats(x.value(), gain.value(), bias.value(), eps);
  std::vector<Tensor> saved;
  saved.push_back(std::move(r.normalized));
  saved.push_back(std::move(r.rstd));
  return x.tape().record1(
      "layer_norm", {x, gain, bias}, std::move(r.output), std::move(saved),
      [](BackwardContext& ctx) {
        const Tensor& g = *ctx.out_grad();
        const Tensor& xhat = ctx.saved(0);
        const Tensor& rstd = ctx.saved(1);
        const Tensor& gain = ctx.input(1);
        const std::size_t n = g.rows(), d = g.row_size();
        if (ctx.needs_grad(1)) {
          Tensor& gg = ctx.grad(1);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
        }
        if (ctx.needs_grad(2)) {
          Tensor& gb = ctx.grad(2);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
        }
        if (ctx.needs_grad(0)) {
          Tensor& gx = ctx.grad(0);
          for (std::size_t i = 0; i < n; ++i) {
            double mean_dy = 0, mean_dy_xhat = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dy = g[i * d + j] * gain[j];
              mean_dy += dy;
              mean_dy_xhat += dy * xhat[i * d + j];
            }
            mean_dy /= double(d);
            mean_dy_xhat /= double(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dy = g[i * d + j] * gain[j];
              gx[i * d + j] += rstd[i] * (dy - mean_dy - xhat[i * d + j] * mean_dy_xhat);
            }
          }
        }
        charge_flops(8 * g.numel());
      });
}

namespace {

void prefix_sum_backward(BackwardContext& ctx) {
  const Tensor& g = *ctx.out_grad();
  if (ctx.needs_grad(0)) {
    Tensor back = suffix_sum(g);
    accumulate_uncharged(ctx.grad(0), back.values());
  }
}

}  // namespace

Var prefix_sum(const Var& x) {
  return x.tape().record1("prefix_sum", {x}, slim::prefix_sum(x.value()), {},
                          prefix_sum_backward);
}

Var prefix_sum(const Var& x, const Var& seed) {
  require_same_tape(x, seed);
  if (seed.value().numel() != x.value().row_size()) {
    throw DimensionError("prefix_sum: seed must hold exactly one row");
  }
  return x.tape().record1("prefix_sum", {x, seed}, slim::prefix_sum(x.value(), seed.value().values()),
                          {}, [](BackwardContext& ctx) {
                            prefix_sum_backward(ctx);
                            if (ctx.needs_grad(1)) {
                              // d(seed) = column sums of the incoming gradient
                              // = row 0 of its suffix sum.
                              const Tensor& g = *ctx.out_grad();
                              Tensor& gs = ctx.grad(1);
                              const std::size_t w = g.row_size();
                              for (std::size_t i = 0; i < g.rows(); ++i)
                                for (std::size_t j = 0; j < w; ++j) gs[j] += g[i * w + j];
                              charge_flops(g.numel());
                            }
                          });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t width = 0;
  std::vector<Var> inputs;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    if (p.value().rank() != 2 || p.value().rows() != rows) {
      throw DimensionError("concat_cols: all inputs must be 2-D with equal row counts");
    }
    inputs.push_back(p);
    offsets.push_back(width);
    width += p.value().row_size();
  }
  Tensor out({rows, width});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    const std::size_t w = v.row_size();
    for (std::size_t i = 0; i < rows; ++i)
      std::copy_n(v.data() + i * w, w, out.data() + i * width + offsets[k]);
  }
  return parts[0].tape().record1(
      "concat_cols", std::move(inputs), std::move(out), {},
      [offsets, width](BackwardContext& ctx) {
        const Tensor& g = *ctx.out_grad();
        for (std::size_t k = 0; k < offsets.size(); ++k) {
          if (!ctx.needs_grad(k)) continue;
          Tensor& gk = ctx.grad(k);
          const std::size_t w = gk.row_size();
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < w; ++j) gk[i * w + j] += g[i * width + offsets[k] + j];
        }
      });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
  const Tensor& v = x.value();
  if (v.rank() != 2 || begin + count > v.row_size()) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + shape_string(v.shape()));
  }
  const std::size_t rows = v.rows(), width = v.row_size();
  Tensor out({rows, count});
  for (std::size_t i = 0; i < rows; ++i)
    std::copy_n(v.data() + i * width + begin, count, out.data() + i * count);
  return x.tape().record1("slice_cols", {x}, std::move(out), {},
                          [begin, count, width](BackwardContext& ctx) {
                            const Tensor& g = *ctx.out_grad();
                            Tensor& gx = ctx.grad(0);
                            for (std::size_t i = 0; i < g.rows(); ++i)
                              for (std::size_t j = 0; j < count; ++j)
                                gx[i * width + begin + j] += g[i * count + j];
                          });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
  const Tensor& v = x.value();
  if (v.rank() == 0 || begin + count > v.rows()) {
    throw DimensionError("slice_rows: range outside " + shape_string(v.shape()));
  }
  Shape shape = v.shape();
  shape[0] = count;
  const std::size_t w = v.row_size();
  Tensor out = Tensor::from_values(shape, v.values().subspan(begin * w, count * w));
  return x.tape().record1("slice_rows", {x}, std::move(out), {},
                          [begin, w](BackwardContext& ctx) {
                            accumulate_uncharged(ctx.grad(0), ctx.out_grad()->values(), begin * w);
                          });
}

Var sum(const Var& x) {
  Tensor out({1}, {slim::sum(x.value())});
  return x.tape().record1("sum", {x}, std::move(out), {}, [](BackwardContext& ctx) {
    const double g = (*ctx.out_grad())[0];
    Tensor& gx = ctx.grad(0);
    for (auto& v : gx.values()) v += g;
    charge_flops(gx.numel());
  });
}

Var dot(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "dot");
  Tensor out({1}, {slim::dot(a.value(), b.value())});
  return a.tape().record1("dot", {a, b}, std::move(out), {}, [](BackwardContext& ctx) {
    const double g = (*ctx.out_grad())[0];
    if (ctx.needs_grad(0)) axpy(ctx.grad(0), g, ctx.input(1));
    if (ctx.needs_grad(1)) axpy(ctx.grad(1), g, ctx.input(0));
  });
}

Var stop_gradient(const Var& x) { return x.tape().alias_without_grad(x, "stop_gradient"); }

Var embedding(const Var& table, std::span<const int> tokens) {
  const Tensor& t = table.value();
  require_rank(t, 2, "embedding");
  const std::size_t vocab = t.rows(), width = t.row_size();
  std::vector<int> ids(tokens.begin(), tokens.end());
  Tensor out({ids.size(), width});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("embedding: token " + std::to_string(ids[i]) + " outside vocabulary of " +
                           std::to_string(vocab));
    }
    std::copy_n(t.data() + ids[i] * width, width, out.data() + i * width);
  }
  return table.tape().record1("embedding", {table}, std::move(out), {},
                              [ids = std::move(ids), width](BackwardContext& ctx) {
                                const Tensor& g = *ctx.out_grad();
                                Tensor& gt = ctx.grad(0);
                                for (std::size_t i = 0; i < ids.size(); ++i)
                                  for (std::size_t j = 0; j < width; ++j)
                                    gt[ids[i] * width + j] += g[i * width + j];
                                charge_flops(g.numel());
                              });
}

Var row_outer(const Var& a, const Var& b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows()) {
    throw DimensionError("row_outer: operands must be 2-D with equal row counts");
  }
  const std::size_t n = av.rows(), p = av.row_size(), q = bv.row_size();
  Tensor out({n, p * q});
  for (std::size_t l = 0; l < n; ++l)
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t m = 0; m < q; ++m) out[(l * p + i) * q + m] = av[l * p + i] * bv[l * q + m];
  charge_flops(n * p * q);
  return a.tape().record1("row_outer", {a, b}, std::move(out), {},
                          [n, p, q](BackwardContext& ctx) {
                            const Tensor& g = *ctx.out_grad();
                            const Tensor& av = ctx.input(0);
                            const Tensor& bv = ctx.input(1);
                            if (ctx.needs_grad(0)) {
                              Tensor& ga = ctx.grad(0);
                              for (std::size_t l = 0; l < n; ++l)
                                for (std::size_t i = 0; i < p; ++i) {
                                  double s = 0;
                                  for (std::size_t m = 0; m < q; ++m)
                                    s += g[(l * p + i) * q + m] * bv[l * q + m];
                                  ga[l * p + i] += s;
                                }
                              charge_flops(n * p * q);
                            }
                            if (ctx.needs_grad(1)) {
                              Tensor& gb = ctx.grad(1);
                              for (std::size_t l = 0; l < n; ++l)
                                for (std::size_t i = 0; i < p; ++i)
                                  for (std::size_t m = 0; m < q; ++m)
                                    gb[l * q + m] += g[(l * p + i) * q + m] * av[l * p + i];
                              charge_flops(n * p * q);
                            }
                          });
}

Var row_matvec(const Var& r, const Var& q) {
  require_same_tape(r, q);
  const Tensor& rv = r.value();
  const Tensor& qv = q.value();
  if (rv.rank() != 2 || qv.rank() != 2 || rv.rows() != qv.rows() || qv.row_size() == 0 ||
      rv.row_size() % qv.row_size() != 0) {
    throw DimensionError("row_matvec: incompatible shapes " + shape_string(rv.shape()) + " and " +
                         shape_string(qv.shape()));
  }
  const std::size_t n = rv.rows(), m = qv.row_size(), d = rv.row_size() / m;
  Tensor out({n, d});
  for (std::size_t l = 0; l < n; ++l)
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < m; ++k) s += rv[(l * d + i) * m + k] * qv[l * m + k];
      out[l * d + i] = s;
    }
  charge_flops(n * d * m);
  return r.tape().record1("row_matvec", {r, q}, std::move(out), {},
                          [n, d, m](BackwardContext& ctx) {
                            const Tensor& g = *ctx.out_grad();
                            const Tensor& rv = ctx.input(0);
                            const Tensor& qv = ctx.input(1);
                            if (ctx.needs_grad(0)) {
                              Tensor& gr = ctx.grad(0);
                              for (std::size_t l = 0; l < n; ++l)
                                for (std::size_t i = 0; i < d; ++i)
                                  for (std::size_t k = 0; k < m; ++k)
                                    gr[(l * d + i) * m + k] += g[l * d + i] * qv[l * m + k];
                              charge_flops(n * d * m);
                            }
                            if (ctx.needs_grad(1)) {
                              Tensor& gq = ctx.grad(1);
                              for (std::size_t l = 0; l < n; ++l)
                                for (std::size_t i = 0; i < d; ++i)
                                  for (std::size_t k = 0; k < m; ++k)
                                    gq[l * m + k] += g[l * d + i] * rv[(l * d + i) * m + k];
                              charge_flops(n * d * m);
                            }
                          });
}

Var row_dot(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "row_dot");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t n = av.rows(), w = av.row_size();
  Tensor out({n, 1});
  for (std::size_t l = 0; l < n; ++l) {
    double s = 0;
    for (std::size_t j = 0; j < w; ++j) s += av[l * w + j] * bv[l * w + j];
    out[l] = s;
  }
  charge_flops(n * w);
  return a.tape().record1("row_dot", {a, b}, std::move(out), {}, [n, w](BackwardContext& ctx) {
    const Tensor& g = *ctx.out_grad();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.needs_grad(k)) continue;
      const Tensor& other = ctx.input(1 - k);
      Tensor& gk = ctx.grad(k);
      for (std::size_t l = 0; l < n; ++l)
        for (std::size_t j = 0; j < w; ++j) gk[l * w + j] += g[l] * other[l * w + j];
      charge_flops(n * w);
    }
  });
}

Var guarded_row_divide(const Var& num, const Var& den, double floor) {
  require_same_tape(num, den);
  const Tensor& nv = num.value();
  const Tensor& dv = den.value();
  if (nv.rank() != 2 || dv.numel() != nv.rows()) {
    throw DimensionError("guarded_row_divide: need one denominator per numerator row");
  }
  const std::size_t n = nv.rows(), w = nv.row_size();
  Tensor used({n});
  std::int64_t clamped = 0;
  for (std::size_t l = 0; l < n; ++l) {
    used[l] = dv[l];
    if (!(dv[l] >= floor)) {
      used[l] = floor;
      ++clamped;
    }
  }
  if (clamped) alloc_stats().on_clamp(clamped);
  Tensor out(nv.shape());
  for (std::size_t l = 0; l < n; ++l)
    for (std::size_t j = 0; j < w; ++j) out[l * w + j] = nv[l * w + j] / used[l];
  charge_flops(nv.numel());
  std::vector<Tensor> saved;
  saved.push_back(std::move(used));
  return num.tape().record1(
      "guarded_row_divide", {num, den}, std::move(out), std::move(saved),
      [n, w, floor](BackwardContext& ctx) {
        const Tensor& g = *ctx.out_grad();
        const Tensor& used = ctx.saved(0);
        const Tensor& nv = ctx.input(0);
        const Tensor& dv = ctx.input(1);
        if (ctx.needs_grad(0)) {
          Tensor& gn = ctx.grad(0);
          for (std::size_t l = 0; l < n; ++l)
            for (std::size_t j = 0; j < w; ++j) gn[l * w + j] += g[l * w + j] / used[l];
          charge_flops(n * w);
        }
        if (ctx.needs_grad(1)) {
          Tensor& gd = ctx.grad(1);
          for (std::size_t l = 0; l < n; ++l) {
            if (!(dv[l] >= floor)) continue;
            double s = 0;
            for (std::size_t j = 0; j < w; ++j) s += g[l * w + j] * nv[l * w + j];
            gd[l] -= s / (used[l] * used[l]);
          }
          charge_flops(n * w);
        }
      });
}

Var cross_entropy(const Var& logits, std::span<const int> targets,
                  std::span<const double> weights) {
  const Tensor& z = logits.value();
  require_rank(z, 2, "cross_entropy");
  const std::size_t n = z.rows(), v = z.row_size();
  if (targets.size() != n || weights.size() != n) {
    throw DimensionError("cross_entropy: need one target and one weight per row");
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<double> wts(weights.begin(), weights.end());
  Tensor lse({n});
  double total = 0;
  for (std::size_t l = 0; l < n; ++l) {
    if (tgt[l] < 0 || static_cast<std::size_t>(tgt[l]) >= v) {
      throw DimensionError("cross_entropy: target " + std::to_string(tgt[l]) + " out of range");
    }
    const double* row = z.data() + l * v;
    const double mx = *std::max_element(row, row + v);
    double s = 0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    lse[l] = mx + std::log(s);
    total += wts[l] * (lse[l] - row[tgt[l]]);
  }
  charge_flops(3 * z.numel());
  std::vector<Tensor> saved;
  saved.push_back(std::move(lse));
  return logits.tape().record1(
      "cross_entropy", {logits}, Tensor({1}, {total}), std::move(saved),
      [tgt = std::move(tgt), wts = std::move(wts), n, v](BackwardContext& ctx) {
        const double g = (*ctx.out_grad())[0];
        const Tensor& z = ctx.input(0);
        const Tensor& lse = ctx.saved(0);
        Tensor& gz = ctx.grad(0);
        for (std::size_t l = 0; l < n; ++l) {
          const double c = g * wts[l];
          if (c == 0.0) continue;
          for (std::size_t j = 0; j < v; ++j) gz[l * v + j] += c * std::exp(z[l * v + j] - lse[l]);
          gz[l * v + tgt[l]] -= c;
        }
        charge_flops(2 * z.numel());
      });
}

}  // namespace slim
