#pragma once

// Define-by-run reverse-mode differentiation.
//
// A Tape records nodes in creation order, so parents always precede their
// children and a single reverse sweep visits nodes in a valid order. Each node
// keeps its output values plus whatever extra tensors its backward rule needs.
// Backward rules accumulate into their inputs' gradients in recording order,
// which keeps summation order, and therefore results, deterministic.
//
// Leaves come in three flavours:
//   * leaf(value):       owns a copy; its gradient is returned in the GradMap;
//   * constant(value):   owns a copy; never differentiated;
//   * parameter(value, sink): aliases caller storage without copying; its
//     gradient is added directly into `*sink` when one is given.
// Accumulating into a caller-owned sink is what lets several tapes add their
// contributions to one gradient without an extra pass.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "slim/instrument.hpp"
#include "slim/tensor.hpp"

namespace slim {

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const;
  std::size_t node() const { return node_; }
  std::size_t slot() const { return slot_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t node, std::size_t slot) : tape_(tape), node_(node), slot_(slot) {}

  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
  std::size_t slot_ = 0;
};

class GradMap {
 public:
  bool contains(const Var& v) const { return grads_.count(v.node()) != 0; }
  const Tensor& at(const Var& v) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::map<std::size_t, Tensor> grads_;
};

class BackwardContext;
using BackwardFn = std::function<void(BackwardContext&)>;

class Tape {
 public:
  Tape() = default;
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  // `value` (and `grad_sink`, if given) must outlive the tape. The sink must
  // have the same shape as the value.
  Var parameter(const Tensor& value, Tensor* grad_sink = nullptr);
  // Non-differentiable alias of caller storage.
  Var external(const Tensor& value);

  // Appends an operation node. `inputs` must all belong to this tape.
  std::vector<Var> record(const char* kind, std::vector<Var> inputs, std::vector<Tensor> outputs,
                          std::vector<Tensor> saved, BackwardFn backward);
  Var record1(const char* kind, std::vector<Var> inputs, Tensor output,
              std::vector<Tensor> saved, BackwardFn backward);

  // Output that shares storage with `source` but is cut from the graph.
  Var alias_without_grad(const Var& source, const char* kind);

  // Gradients of a scalar root with respect to every leaf created with
  // requires_grad and no sink. Intermediate gradients are freed as the sweep
  // passes them.
  GradMap backward(const Var& root);

  // Frees every stored value, saved tensor and gradient. Idempotent.
  void release();

  std::size_t size() const { return nodes_.size(); }
  bool released() const { return released_; }
  // Bytes currently held by node outputs, saved tensors and gradients.
  std::size_t live_bytes() const;
  // Number of backward rules executed by the last backward().
  std::size_t visit_count() const { return visits_; }
  const char* kind(std::size_t node) const { return nodes_.at(node).kind; }

  const Tensor& value(const Var& v) const;
  bool requires_grad(const Var& v) const;

 private:
  friend class BackwardContext;

  struct Node {
    const char* kind = "";
    std::vector<Var> inputs;
    std::vector<Tensor> outputs;
    const Tensor* external = nullptr;
    std::vector<Tensor> saved;
    std::vector<Tensor> grads;
    BackwardFn backward;
    Tensor* sink = nullptr;
    bool requires_grad = false;
    bool leaf = false;
    FlopPhase phase = FlopPhase::kForward;
  };

  void check_owned(const Var& v) const;
  Tensor& grad_slot(const Var& v);

  std::deque<Node> nodes_;
  bool released_ = false;
  std::size_t visits_ = 0;
};

class BackwardContext {
 public:
  // Incoming gradient for output `slot`; nullptr when no gradient reached it.
  const Tensor* out_grad(std::size_t slot = 0) const;
  const Tensor& input(std::size_t i) const;
  const Tensor& output(std::size_t slot = 0) const;
  const Tensor& saved(std::size_t i) const;
  bool needs_grad(std::size_t i) const;
  std::size_t input_count() const { return node_.inputs.size(); }
  // Accumulator for input i's gradient (zero-initialized on first use).
  Tensor& grad(std::size_t i);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, Tape::Node& node) : tape_(tape), node_(node) {}
  Tape& tape_;
  Tape::Node& node_;
};

// ---------------------------------------------------------------------------
// Differentiable primitives.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double c);
Var matmul(const Var& a, const Var& b);
Var add_row_broadcast(const Var& x, const Var& row);
Var square(const Var& x);
Var gelu(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps);
Var prefix_sum(const Var& x);
// Prefix sum seeded with `seed` (a single row): row i is seed + x_0 + ... + x_i.
Var prefix_sum(const Var& x, const Var& seed);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(const Var& x, std::size_t begin, std::size_t count);
Var slice_rows(const Var& x, std::size_t begin, std::size_t count);
Var sum(const Var& x);
Var dot(const Var& a, const Var& b);
Var stop_gradient(const Var& x);

// Row gather from an embedding table.
Var embedding(const Var& table, std::span<const int> tokens);
// Row l of the result is the row-major flattening of a_l b_l^T.
Var row_outer(const Var& a, const Var& b);
// Row l is R_l q_l where R_l is row l of `r` viewed as a (cols(r)/cols(q)) x cols(q) matrix.
Var row_matvec(const Var& r, const Var& q);
// Rows x 1 tensor of per-row inner products.
Var row_dot(const Var& a, const Var& b);
// Row l is num_l / max(den_l, floor). Every clamped row is reported to
// alloc_stats().on_clamp(); clamped rows pass no gradient to the denominator.
Var guarded_row_divide(const Var& num, const Var& den, double floor);
// sum_l weights[l] * CE(logits_l, targets[l]), a scalar. Computed with a
// max-shifted log-sum-exp.
Var cross_entropy(const Var& logits, std::span<const int> targets,
                  std::span<const double> weights);

}  // namespace slim
