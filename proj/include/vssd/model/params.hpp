#pragma once

#include <deque>
#include <string>
#include <vector>

#include "vssd/core/tape.hpp"

namespace vssd::model {

template <Real T>
struct Param {
  std::string name;
  Tensor<T> value;
  bool decay = true;  // false for norms, biases and SSM scalars
};

/// Ordered, named parameter list. Storage is a deque so references stay
/// valid while parameters are appended during construction.
template <Real T>
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor<T> value, bool decay) {
    for (const auto& p : params_)
      if (p.name == name) throw InternalConsistencyError("duplicate parameter name " + name);
    params_.push_back({std::move(name), std::move(value), decay});
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Param<T>& operator[](std::size_t i) { return params_.at(i); }
  const Param<T>& operator[](std::size_t i) const { return params_.at(i); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  const Param<T>* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Registers every parameter as a tape leaf.
  std::vector<Var<T>> bind(Tape<T>& tape, bool requires_grad) const {
    std::vector<Var<T>> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) vars.push_back(tape.leaf(p.value, requires_grad));
    return vars;
  }

 private:
  std::deque<Param<T>> params_;
};

}  // namespace vssd::model
