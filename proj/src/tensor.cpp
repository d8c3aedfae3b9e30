#include "jbf/tensor.hpp"

#include <sstream>

namespace jbf {

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (int extent : shape) {
    if (extent <= 0) throw ShapeError("non-positive extent in shape " + to_string(shape));
    n *= static_cast<std::size_t>(extent);
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
Tensor<T>::Tensor(Shape shape) : impl_(std::make_shared<Storage>()) {
  impl_->values.assign(element_count(shape), T(0));
  impl_->shape = std::move(shape);
}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<Storage>()) {
  if (element_count(shape) != values.size()) {
    throw ShapeError("shape " + to_string(shape) + " holds " + std::to_string(element_count(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor t(std::move(shape));
  std::fill(t.impl_->values.begin(), t.impl_->values.end(), value);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{1}, std::vector<T>{value});
}

template <class T>
const typename Tensor<T>::Storage& Tensor<T>::storage() const {
  if (!impl_) throw std::logic_error("use of an undefined tensor");
  return *impl_;
}

template <class T>
typename Tensor<T>::Storage& Tensor<T>::storage() {
  if (!impl_) throw std::logic_error("use of an undefined tensor");
  return *impl_;
}

template <class T>
const Shape& Tensor<T>::shape() const {
  return storage().shape;
}

template <class T>
int Tensor<T>::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

template <class T>
std::size_t Tensor<T>::numel() const {
  return storage().values.size();
}

template <class T>
std::span<T> Tensor<T>::values() {
  return storage().values;
}

template <class T>
std::span<const T> Tensor<T>::values() const {
  return storage().values;
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return storage().values[0];
}

template <class T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <class T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  storage().requires_grad = on;
  return *this;
}

template <class T>
bool Tensor<T>::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

template <class T>
std::span<const T> Tensor<T>::grad() const {
  return storage().grad;
}

template <class T>
std::span<T> Tensor<T>::grad_buffer() const {
  if (!impl_) throw std::logic_error("use of an undefined tensor");
  Storage& s = *impl_;
  if (s.grad.empty()) s.grad.assign(s.values.size(), T(0));
  return s.grad;
}

template <class T>
void Tensor<T>::zero_grad() {
  if (impl_) impl_->grad.clear();
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(shape(), std::vector<T>(values().begin(), values().end()));
  out.impl_->requires_grad = requires_grad();
  return out;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace jbf
