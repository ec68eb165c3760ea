#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>

#include "octc/tensor.hpp"

namespace octc {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order,
/// so reverse insertion order is a valid topological order for backward.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  explicit Tape(const ParameterSet& params) : params_(&params) {}
  /// With `track_grads` false, parameters behave as constants and no backward
  /// closures are kept (inference).
  Tape(const ParameterSet& params, bool track_grads) : params_(&params), track_grads_(track_grads) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);
  /// Leaf view of a named parameter; repeated lookups return the same node.
  Var param(const std::string& name);

  /// Appends an op output. `backward` is dropped when no input needs grad.
  Var record(Tensor value, bool requires_grad, BackwardFn backward);

  const Tensor& value(std::uint32_t id) const;
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  /// Gradient accumulator for a node, allocated as zeros on first use.
  Tensor& grad(std::uint32_t id);
  const Tensor* grad_if_any(std::uint32_t id) const;

  /// Runs reverse accumulation from a scalar. Returns one gradient per entry
  /// of the bound ParameterSet; unused parameters get zeros.
  Gradients backward(const Var& loss);

  std::size_t size() const { return nodes_.size(); }
  const ParameterSet* parameters() const { return params_; }

  /// Number of attention score cells (heads x queries x keys) evaluated.
  std::size_t attention_cells = 0;

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  const ParameterSet* params_ = nullptr;
  bool track_grads_ = true;
  std::deque<Node> nodes_;
  std::map<std::string, std::uint32_t> param_nodes_;
  bool backward_done_ = false;
};

/// backward(loss) on the loss's tape.
Gradients backward(const Var& loss);

}  // namespace octc
