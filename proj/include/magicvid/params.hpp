#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "magicvid/autodiff.hpp"
#include "magicvid/tensor.hpp"

namespace magicvid {

// Insertion-ordered named tensor collection. Iteration order is the order
// tensors were registered, which fixes the optimizer update and
// serialization order.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("param store: duplicate name " + name);
    index_[name] = names_.size();
    names_.push_back(name);
    values_.push_back(std::move(value));
    return values_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("param store: missing tensor " + name);
    return values_[it->second];
  }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("param store: missing tensor " + name);
    return values_[it->second];
  }

  const std::vector<std::string>& names() const { return names_; }
  size_t size() const { return names_.size(); }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& v : values_) n += v.numel();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (size_t i = 0; i < names_.size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, size_t> index_;
  std::vector<Tensor<T>> values_;
};

// Leaf Vars over a ParamStore snapshot; one graph's worth of handles.
template <typename T>
class VarMap {
 public:
  static VarMap from(const ParamStore<T>& ps, bool requires_grad) {
    VarMap vm;
    for (const auto& name : ps.names()) {
      vm.vars_.emplace(name, Var<T>::leaf(ps.get(name), requires_grad));
      vm.names_.push_back(name);
    }
    return vm;
  }

  Var<T>& operator[](const std::string& name) {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("var map: missing tensor " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return vars_.count(name) != 0; }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::unordered_map<std::string, Var<T>> vars_;
  std::vector<std::string> names_;
};

}  // namespace magicvid
