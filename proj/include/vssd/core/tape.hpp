#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>

#include "vssd/core/tensor.hpp"

namespace vssd {

template <Real T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <Real T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Reverse-mode tape. Operations append nodes in execution order; backward()
/// replays them in reverse. Leaves reference caller-owned tensors (parameters,
/// inputs) without copying, so those tensors must outlive the tape.
template <Real T>
class Tape {
 public:
  /// Called with the accumulated output gradient; adds into parent gradients
  /// through grad_buffer().
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(const Tensor<T>& t) { return leaf(t, t.requires_grad()); }

  Var<T> leaf(const Tensor<T>& t, bool requires_grad) {
    Node& n = nodes_.emplace_back();
    n.ref = &t;
    n.requires_grad = requires_grad;
    n.is_leaf = true;
    return {this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor<T> t) {
    Node& n = nodes_.emplace_back();
    n.owned = std::move(t);
    return {this, nodes_.size() - 1};
  }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    bool rg = false;
    if (grad_enabled_)
      for (const Var<T>& p : parents) rg = rg || requires_grad(p);
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(fn);
    return {this, nodes_.size() - 1};
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn fn) {
    bool rg = false;
    if (grad_enabled_)
      for (const Var<T>& p : parents) rg = rg || requires_grad(p);
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(fn);
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return node(v.id).value(); }
  bool requires_grad(Var<T> v) const { return node(v.id).requires_grad; }

  bool grad_enabled() const noexcept { return grad_enabled_; }
  void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }

  /// Zero-initialised on first touch.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = node(id);
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value().shape());
      n.has_grad = true;
    }
    return n.grad;
  }
  Tensor<T>& grad_buffer(Var<T> v) { return grad_buffer(v.id); }

  /// Gradient accumulated into v; exact zeros when v was never reached.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = node(v.id);
    return n.has_grad ? n.grad : Tensor<T>(n.value().shape());
  }

  const Tensor<T>* grad_if_any(Var<T> v) const {
    const Node& n = node(v.id);
    return n.has_grad ? &n.grad : nullptr;
  }

  /// Seeds d(root)/d(root) = 1 (root must be a single element) and replays the
  /// tape backwards. Intermediate gradients are released once consumed; leaf
  /// gradients stay available through grad().
  void backward(Var<T> root) {
    if (value(root).size() != 1) {
      throw DimensionError("backward root must be scalar, got " + to_string(value(root).shape()));
    }
    grad_buffer(root.id)[0] += T(1);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
      if (!n.is_leaf) {
        n.grad = Tensor<T>();
        n.has_grad = false;
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool has_grad = false;
    bool is_leaf = false;
    const Tensor<T>& value() const { return ref ? *ref : owned; }
  };

  Node& node(std::size_t id) { return nodes_.at(id); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

/// Disables recording of backward closures for the lifetime of the guard.
template <Real T>
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape<T>& t) : tape_(t), prev_(t.grad_enabled()) { t.set_grad_enabled(false); }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>& tape_;
  bool prev_;
};

}  // namespace vssd
