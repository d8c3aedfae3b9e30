#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace jbf {

/// Extents of a dense row-major array, last axis fastest.
using Shape = std::vector<int>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised for any extent or rank mismatch. The message names the offending axis
/// or stage.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <class T>
class Tape;

/// Shared handle to a dense array of reals with an optional gradient buffer.
///
/// Copies of a Tensor alias the same storage, so a parameter handed to a Tape
/// and held in a ParamSet is one object. Use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> values);

  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const;
  std::size_t numel() const;

  std::span<T> values();
  std::span<const T> values() const;
  T* data() { return values().data(); }
  const T* data() const { return values().data(); }
  T item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  bool has_grad() const;
  /// Gradient view; empty span when no gradient has been accumulated.
  std::span<const T> grad() const;
  /// Gradient buffer, allocated (zero-filled) on first use. Handles are
  /// shallow, so this is available through const handles.
  std::span<T> grad_buffer() const;
  void zero_grad();

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Tape<T>;

  struct Storage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
    const void* producer = nullptr;
  };

  const Storage& storage() const;
  Storage& storage();

  std::shared_ptr<Storage> impl_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace jbf
