#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cookie/error.hpp"
#include "cookie/tensor.hpp"

namespace cookie {

/// A named learnable tensor. The name is the parameter's identity: it keys
/// gradients, optimizer moments and checkpoint blobs.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

/// Gradient of a scalar loss with respect to each parameter, keyed by name.
template <class T>
class GradientMap {
 public:
  bool contains(const std::string& name) const { return grads_.count(name) != 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = grads_.find(name);
    if (it == grads_.end()) throw ContractError("no gradient recorded for parameter '" + name + "'");
    return it->second;
  }

  Tensor<T>& operator[](const std::string& name) { return grads_[name]; }

  /// Inserts exact zeros for parameters the loss never reached.
  template <class ParamRange>
  void fill_missing(ParamRange&& params) {
    for (const Parameter<T>* p : params) {
      if (!contains(p->name)) grads_.emplace(p->name, Tensor<T>(p->value.shape()));
    }
  }

  void accumulate(const GradientMap& other) {
    for (const auto& [name, g] : other.grads_) {
      auto it = grads_.find(name);
      if (it == grads_.end()) {
        grads_.emplace(name, g);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
      }
    }
  }

  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }
  auto begin() { return grads_.begin(); }
  auto end() { return grads_.end(); }

 private:
  std::map<std::string, Tensor<T>> grads_;
};

template <class T>
class Tape;

/// Handle to a node recorded on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t index = 0;

  const Tensor<T>& value() const { return tape->value(index); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(int axis) const { return value().dim(axis); }
};

/// Records one forward pass; backward() replays it in reverse. A tape is
/// single-use: build, differentiate, discard.
template <class T>
class Tape {
 public:
  using Backprop = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, "constant"); }

  /// Leaf bound to a parameter. Each parameter gets one node per tape, so every
  /// use site accumulates into the same gradient.
  Var<T> param(const Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>{this, it->second};
    Var<T> v = push(p.value, recording_, "param");
    nodes_[v.index].param = &p;
    param_nodes_.emplace(&p, v.index);
    return v;
  }

  /// Names of every parameter bound on this tape.
  std::set<std::string> parameter_names() const {
    std::set<std::string> names;
    for (const auto& [p, idx] : param_nodes_) names.insert(p->name);
    return names;
  }

  /// Records the result of an operation. `backprop` receives the tape and the
  /// node index; it reads grad(index) and adds into the inputs' gradients.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, const char* op, Backprop backprop) {
    bool needs = false;
    if (recording_) {
      for (const Var<T>& in : inputs) {
        check_owner(in);
        needs = needs || nodes_[in.index].requires_grad;
      }
    }
    Var<T> v = push(std::move(value), needs, op);
    if (needs) nodes_[v.index].backprop = std::move(backprop);
    return v;
  }

  const Tensor<T>& value(std::size_t i) const { return nodes_[i].value; }
  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }
  const char* op_name(std::size_t i) const { return nodes_[i].op; }

  /// Gradient buffer of node i, allocated as zeros on first access.
  Tensor<T>& grad(std::size_t i) {
    Node& n = nodes_[i];
    if (n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  bool has_grad(std::size_t i) const { return nodes_[i].grad.size() == nodes_[i].value.size() && nodes_[i].value.size(); }

  /// Reverse-mode accumulation from a scalar loss.
  GradientMap<T> backward(Var<T> loss) {
    check_owner(loss);
    if (loss.value().size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    Tensor<T> seed(loss.shape(), T{1});
    return backward({loss}, {seed});
  }

  /// Reverse-mode accumulation from arbitrary outputs with caller-supplied
  /// upstream gradients (vector-Jacobian product).
  GradientMap<T> backward(const std::vector<Var<T>>& outputs, const std::vector<Tensor<T>>& seeds) {
    if (!recording_) throw ContractError("backward on a tape that was not recording");
    if (outputs.size() != seeds.size()) throw ContractError("backward: outputs and seeds differ in count");
    std::size_t last = 0;
    for (std::size_t k = 0; k < outputs.size(); ++k) {
      check_owner(outputs[k]);
      if (seeds[k].shape() != outputs[k].shape()) {
        throw DimensionError("backward seed shape " + to_string(seeds[k].shape()) + " vs output " +
                             to_string(outputs[k].shape()));
      }
      Tensor<T>& g = grad(outputs[k].index);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += seeds[k][i];
      last = std::max(last, outputs[k].index);
    }
    for (std::size_t i = last + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backprop || !has_grad(i)) continue;
      n.backprop(*this, i);
    }
    GradientMap<T> out;
    for (const auto& [p, idx] : param_nodes_) {
      out[p->name] = has_grad(idx) ? nodes_[idx].grad : Tensor<T>(nodes_[idx].value.shape());
    }
    return out;
  }

  /// Gradient with respect to an arbitrary node after backward().
  Tensor<T> grad_of(Var<T> v) {
    check_owner(v);
    return has_grad(v.index) ? nodes_[v.index].grad : Tensor<T>(v.shape());
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backprop backprop;
    const Parameter<T>* param = nullptr;
    const char* op = "";
    bool requires_grad = false;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, const char* op) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_owner(const Var<T>& v) const {
    if (v.tape != this || v.index >= nodes_.size()) throw ContractError("variable does not belong to this tape");
  }

  bool recording_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
};

}  // namespace cookie
