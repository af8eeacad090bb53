#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mole/params.hpp"
#include "mole/tensor.hpp"

namespace mole::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor2& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records a computation graph in evaluation order and replays it backwards.
///
/// Parameter leaves alias the ParamStore values (no copy); `backward` adds
/// their gradients into the store's accumulators. A tape is single use:
/// build it, call `backward` at most once, drop it.
class Tape {
 public:
  /// Receives the gradient and value of the node's output and pushes
  /// contributions to its parents through `accumulate` / `grad_buffer`.
  using Backward =
      std::function<void(Tape&, const Tensor2& out_grad, const Tensor2& out_value)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor2 value);
  /// Leaf bound to `store[name]`. Repeated calls return the same node.
  Var param(ParamStore& store, const std::string& name);

  /// Appends an interior node. `backward` may be empty when no parent
  /// requires a gradient.
  Var record(Tensor2 value, std::span<const Var> parents, Backward backward);

  const Tensor2& value(Var v) const;
  bool requires_grad(Var v) const;
  /// Adds `contribution` to the gradient of `v` if it requires one.
  void accumulate(Var v, const Tensor2& contribution);
  /// Mutable gradient buffer of `v`, zero-initialised on first access.
  Tensor2& grad_buffer(Var v);
  /// Gradient of `v` after backward; empty tensor if none reached it.
  const Tensor2& grad(Var v) const;

  /// Seeds d(out)/d(out) = 1 for a 1×1 output and propagates to every
  /// parameter leaf.
  void backward(Var out);

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor2 own;
    const Tensor2* external = nullptr;
    Tensor2 grad;
    Tensor2* sink = nullptr;
    bool requires_grad = false;
    Backward backward;

    const Tensor2& value() const { return external != nullptr ? *external : own; }
  };

  Node& node(Var v);
  const Node& node(Var v) const;

  std::deque<Node> nodes_;
  std::map<std::pair<const ParamStore*, std::string>, std::size_t> param_ids_;
  bool backward_done_ = false;
};

// Differentiable primitives. All operands must live on the same tape.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var div(Var a, Var b);  // elementwise
Var scale(Var a, double k);
Var add_scalar(Var a, double k);
Var relu(Var a);
Var sqrt(Var a);
/// Replaces entries with |x| < floor by ±floor (sign kept, +floor at zero).
/// Gradient is zero on replaced entries.
Var guard_magnitude(Var a, double floor);
Var softmax_rows(Var a);
Var row_sum(Var a);   // r×c -> r×1
Var row_mean(Var a);  // r×c -> r×1
Var row_var(Var a);   // r×c -> r×1, population variance
Var sum_all(Var a);   // -> 1×1
/// r×1 column repeated across `cols` columns.
Var broadcast_cols(Var column, std::size_t cols);
/// Adds a 1×c row vector to every row of an r×c matrix.
Var add_row_bias(Var x, Var bias);
/// Stacks `times` copies of `a` vertically.
Var tile_rows(Var a, std::size_t times);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
/// Row-major reinterpretation with the same element count.
Var reshape(Var a, std::size_t rows, std::size_t cols);
/// Mean of squared differences over all elements -> 1×1.
Var mse(Var prediction, Var target);

/// x·W + b with W (in×out) and b (1×out).
Var linear(Var x, Var weight, Var bias);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

}  // namespace mole::ad
