#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "jbf/tensor.hpp"

namespace jbf {

/// Named, ordered collection of parameter tensors. Insertion order is the
/// serialization and iteration order.
template <class T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  Tensor<T>& add(std::string name, Tensor<T> tensor);
  bool contains(std::string_view name) const;
  Tensor<T>& at(std::string_view name);
  const Tensor<T>& at(std::string_view name) const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  /// Total scalar count over all tensors.
  std::size_t value_count() const;
  /// Scalar count over tensors whose names start with `prefix`.
  std::size_t value_count(std::string_view prefix) const;

  void zero_grad();
  void set_requires_grad(bool on);
  /// Deep copy; the copy shares no storage with this set.
  ParamSet clone() const;
  /// Copies values (not gradients) from a set with identical names and shapes.
  void assign_values(const ParamSet& other);

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& e : entries_) {
      auto v = e.tensor.values();
      Tensor<U> t(e.tensor.shape(), std::vector<U>(v.begin(), v.end()));
      t.set_requires_grad(e.tensor.requires_grad());
      out.add(e.name, std::move(t));
    }
    return out;
  }

 private:
  const Entry* find(std::string_view name) const;
  std::vector<Entry> entries_;
};

extern template class ParamSet<float>;
extern template class ParamSet<double>;

}  // namespace jbf
