#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "dynainfer/tensor.hpp"

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape owns every intermediate value of one forward evaluation. Operations
// append nodes in evaluation order, so reverse index order is a valid
// topological order and Tape::backward visits each node exactly once.
// Gradients accumulate additively into leaves.

namespace dynainfer::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Propagates the gradient of node `self` into its parents.
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);
  Var record(Tensor value, std::span<const Var> parents, Backward backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, allocated as zeros on first use.
  Tensor& grad(std::size_t id);
  /// Null when nothing has flowed into the node yet.
  const Tensor* grad_if_any(std::size_t id) const;

  /// Seeds d(root)/d(root) = 1 and runs the reverse sweep. Root must hold a
  /// single value.
  void backward(Var root);

  /// Gradient of the last backward sweep with respect to `v` (zeros if none).
  Tensor gradient(Var v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

inline constexpr std::size_t kNoBias = std::numeric_limits<std::size_t>::max();

// Elementwise arithmetic; operands must share a shape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// a + s * b
Var axpy(Var a, double s, Var b);
Var swish(Var a);
/// max(a, floor); gradient passes only where a > floor.
Var clamp_min(Var a, double floor);

Var sum(Var a);
/// Sum of squares.
Var sq_norm(Var a);
/// Sum of absolute values; subgradient 0 at 0.
Var l1_norm(Var a);
/// sum_r weights[r] * sum_c (pred[r, c] - target[r, c])^2
Var weighted_sq_error(Var pred, const Tensor& target,
                      std::span<const double> row_weights);

/// Affine map whose weights live inside a flat parameter vector:
/// y[rows, out] = x[rows, in] * W + b, W at params[w_offset], b at
/// params[b_offset] (or no bias when b_offset == kNoBias).
Var linear(Var x, Var params, std::size_t w_offset, std::size_t b_offset,
           std::size_t in, std::size_t out);

/// (m, n) rows -> (m, n, m*n) rows.
Var lv_basis(Var states);

/// Gray-Scott field batch [batch, 2*side*side] (m field then n field) to
/// per-cell features [batch*side*side, 4] = (m, n, lap m, lap n).
Var gs_stencil_features(Var states, std::size_t side, double ds);
/// Per-cell features [batch*side*side, 2] = (m, n) without the Laplacian.
Var gs_cell_states(Var states, std::size_t side);
/// Per-cell outputs [batch*side*side, 2] back to field layout
/// [batch, 2*side*side].
Var gs_cells_to_fields(Var cells, std::size_t side);

/// Gradient of a scalar-valued function at `params`.
/// Throws NumericError if the function value is not finite.
Tensor gradient(const std::function<Var(Var)>& loss_fn, const Tensor& params);

}  // namespace dynainfer::ad
