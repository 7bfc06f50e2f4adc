#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gravityflow/array.hpp"
#include "gravityflow/errors.hpp"

namespace gravityflow {

template <class T>
class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Array<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const { return tape_->requires_grad(*this); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records primitive operations in execution order so that backward() can walk
// them in reverse. One tape per training step; not shared across threads.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Array<T> value;
    Array<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    bool trainable = false;
    std::string name;
    BackwardFn backward;
  };

  // With grad_enabled=false, parameter() binds frozen leaves and no backward
  // closures are recorded (inference and finite-difference probes).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Array<T> value) { return push(std::move(value), false); }

  Var<T> leaf(Array<T> value, bool trainable, std::string name = {}) {
    Var<T> v = push(std::move(value), trainable);
    nodes_[v.id()].trainable = trainable;
    nodes_[v.id()].name = std::move(name);
    return v;
  }

  // Binds a named parameter once per tape; repeated calls return the same leaf.
  Var<T> parameter(const std::string& name, const Array<T>& value, bool trainable = true) {
    if (auto it = bound_.find(name); it != bound_.end()) return Var<T>(this, it->second);
    Var<T> v = leaf(value, trainable && grad_enabled_, name);
    bound_.emplace(name, v.id());
    return v;
  }

  // Adds an op output. requires_grad is inherited from the inputs; the caller
  // attaches a backward closure only when requires_grad is set.
  Var<T> record(Array<T> value, std::initializer_list<Var<T>> inputs) {
    bool rg = false;
    for (const auto& in : inputs) rg = rg || check(in).requires_grad;
    return push(std::move(value), rg);
  }
  Var<T> record(Array<T> value, const std::vector<Var<T>>& inputs) {
    bool rg = false;
    for (const auto& in : inputs) rg = rg || check(in).requires_grad;
    return push(std::move(value), rg);
  }

  void set_backward(const Var<T>& v, BackwardFn fn) { check(v).backward = std::move(fn); }

  const Array<T>& value(const Var<T>& v) const { return check(v).value; }
  const Array<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(const Var<T>& v) const { return check(v).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Upstream gradient of node `id` during backward.
  const Array<T>& upstream(std::size_t id) const { return nodes_[id].grad; }

  // Gradient accumulator of node `id`, zero-initialized on first touch.
  Array<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Array<T>::zeros(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(const Var<T>& loss) {
    Node& root = check(loss);
    if (root.value.size() != 1)
      throw ContractError("backward() needs a scalar loss, got shape " + shape_str(root.value.shape()));
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Array<T>();
    }
    grad_buffer(loss.id()).fill(T{1});
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.has_grad && n.backward) n.backward(*this, id);
    }
  }

  // Gradient of a node after backward(); exactly zero if it was never reached.
  Array<T> grad(const Var<T>& v) const {
    const Node& n = check(v);
    return n.has_grad ? n.grad : Array<T>::zeros(n.value.shape());
  }

  // Gradients of every trainable named leaf, keyed by name.
  std::map<std::string, Array<T>> parameter_grads() const {
    std::map<std::string, Array<T>> out;
    for (const auto& n : nodes_) {
      if (!n.trainable || n.name.empty()) continue;
      Array<T> g = n.has_grad ? n.grad : Array<T>::zeros(n.value.shape());
      auto [it, inserted] = out.emplace(n.name, g);
      if (!inserted)
        for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
    }
    return out;
  }

  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  Var<T> push(Array<T> value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  Node& check(const Var<T>& v) {
    if (&v.tape() != this) throw ContractError("variable belongs to a different tape");
    return nodes_.at(v.id());
  }
  const Node& check(const Var<T>& v) const {
    if (&v.tape() != this) throw ContractError("variable belongs to a different tape");
    return nodes_.at(v.id());
  }

  bool grad_enabled_ = true;
  std::deque<Node> nodes_;
  std::map<std::string, std::size_t> bound_;
};

}  // namespace gravityflow
