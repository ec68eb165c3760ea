#include "octc/autodiff.hpp"

#include <stdexcept>

namespace octc {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::param(const std::string& name) {
  if (params_ == nullptr) throw std::logic_error("tape has no parameter set");
  if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return Var(this, it->second);
  auto it = params_->find(name);
  if (it == params_->end()) throw std::out_of_range("unknown parameter: " + name);
  Node n;
  n.external = &it->second;
  n.requires_grad = track_grads_;
  nodes_.push_back(std::move(n));
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  param_nodes_.emplace(name, id);
  return Var(this, id);
}

Var Tape::record(Tensor value, bool requires_grad, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

const Tensor& Tape::value(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

Tensor& Tape::grad(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(value(id).shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

const Tensor* Tape::grad_if_any(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.has_grad ? &n.grad : nullptr;
}

Gradients Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw std::logic_error("loss belongs to another tape");
  if (value(loss.id()).size() != 1 || value(loss.id()).rank() > 1) {
    throw ShapeError("backward requires a scalar loss, got " +
                     shape_string(value(loss.id()).shape()));
  }
  if (backward_done_) throw std::logic_error("backward already ran on this tape");
  backward_done_ = true;

  if (requires_grad(loss.id())) {
    grad(loss.id())[0] = 1.0;
    for (std::uint32_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.has_grad) n.backward(*this, i);
    }
  }

  Gradients out;
  if (params_ != nullptr) {
    for (const auto& [name, tensor] : *params_) {
      auto it = param_nodes_.find(name);
      if (it != param_nodes_.end() && nodes_[it->second].has_grad) {
        out.emplace(name, nodes_[it->second].grad);
      } else {
        out.emplace(name, Tensor(tensor.shape(), 0.0));
      }
    }
  }
  return out;
}

Gradients backward(const Var& loss) { return loss.tape().backward(loss); }

}  // namespace octc
