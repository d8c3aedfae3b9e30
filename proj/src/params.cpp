#include "jbf/params.hpp"

#include <stdexcept>

namespace jbf {

template <class T>
Tensor<T>& ParamSet<T>::add(std::string name, Tensor<T> tensor) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  entries_.push_back(Entry{std::move(name), std::move(tensor)});
  return entries_.back().tensor;
}

template <class T>
const typename ParamSet<T>::Entry* ParamSet<T>::find(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

template <class T>
bool ParamSet<T>::contains(std::string_view name) const {
  return find(name) != nullptr;
}

template <class T>
Tensor<T>& ParamSet<T>::at(std::string_view name) {
  return const_cast<Tensor<T>&>(static_cast<const ParamSet&>(*this).at(name));
}

template <class T>
const Tensor<T>& ParamSet<T>::at(std::string_view name) const {
  const Entry* e = find(name);
  if (!e) throw std::out_of_range("unknown parameter: " + std::string(name));
  return e->tensor;
}

template <class T>
std::size_t ParamSet<T>::value_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

template <class T>
std::size_t ParamSet<T>::value_count(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (std::string_view(e.name).substr(0, prefix.size()) == prefix) n += e.tensor.numel();
  return n;
}

template <class T>
void ParamSet<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template <class T>
void ParamSet<T>::set_requires_grad(bool on) {
  for (auto& e : entries_) e.tensor.set_requires_grad(on);
}

template <class T>
ParamSet<T> ParamSet<T>::clone() const {
  ParamSet out;
  for (const auto& e : entries_) out.add(e.name, e.tensor.clone());
  return out;
}

template <class T>
void ParamSet<T>::assign_values(const ParamSet& other) {
  if (other.size() != size()) throw std::invalid_argument("assign_values: parameter sets differ in size");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& src = other.entries_[i];
    auto& dst = entries_[i];
    if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape()) {
      throw std::invalid_argument("assign_values: mismatch at " + dst.name);
    }
    auto sv = src.tensor.values();
    std::copy(sv.begin(), sv.end(), dst.tensor.values().begin());
  }
}

template class ParamSet<float>;
template class ParamSet<double>;

}  // namespace jbf
