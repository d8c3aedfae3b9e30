#pragma once

#include <array>
#include <functional>
#include <vector>

#include "jbf/conv_kernels.hpp"
#include "jbf/tensor.hpp"

namespace jbf {

struct AxisPad {
  int before = 0;
  int after = 0;
};

/// How the range weights of a bilateral window are derived from the range map.
enum class RangeMode {
  /// The range map value at each neighbor is used as its weight directly.
  Response,
  /// Weight is exp(-range_scale * (r(center) - r(neighbor))^2).
  Difference,
};

struct BilateralOptions {
  double eps = 1e-6;
  RangeMode mode = RangeMode::Response;
  double range_scale = 1.0;
};

/// Records differentiable operations in order and replays their adjoints in
/// reverse. All convolutions are cross-correlations (no kernel flip).
///
/// A tape constructed with `record = false` evaluates forward values only.
/// Tapes are not thread-safe; use one per thread.
template <class T>
class Tape {
 public:
  using TensorT = Tensor<T>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Elementwise. Binary operands must have equal shapes, or one of them a
  // single element that broadcasts.
  TensorT add(const TensorT& a, const TensorT& b);
  TensorT sub(const TensorT& a, const TensorT& b);
  TensorT mul(const TensorT& a, const TensorT& b);
  /// x / (y + eps); eps must be positive.
  TensorT div_guarded(const TensorT& x, const TensorT& y, T eps = T(1e-6));
  TensorT relu(const TensorT& x);
  TensorT leaky_relu(const TensorT& x, T slope = T(0.01));
  TensorT sigmoid(const TensorT& x);
  TensorT square(const TensorT& x);
  TensorT scale(const TensorT& x, T factor);

  TensorT sum(const TensorT& x);
  TensorT mean(const TensorT& x);

  /// x [cin, d, h, w], kernel [cout, cin, kd, kh, kw], bias [cout] or undefined.
  TensorT conv3d(const TensorT& x, const TensorT& kernel, const TensorT& bias, std::array<int, 3> pad);
  /// x [cin, h, w], kernel [cout, cin, kh, kw].
  TensorT conv2d(const TensorT& x, const TensorT& kernel, const TensorT& bias, std::array<int, 2> pad);
  /// The same 2D kernel applied to every depth slice of x [cin, d, h, w].
  TensorT conv2d_slices(const TensorT& x, const TensorT& kernel, const TensorT& bias, std::array<int, 2> pad);

  TensorT pad_zero(const TensorT& x, const std::vector<AxisPad>& pads);
  TensorT crop(const TensorT& x, const Shape& offsets, const Shape& extents);
  /// out[i] = x[i - offset] where in bounds, else 0. Same shape as x.
  TensorT shift(const TensorT& x, const std::vector<int>& offsets);
  /// Stacks equally shaped tensors along a new leading axis.
  TensorT stack(const std::vector<TensorT>& parts);
  /// x[index, ...] along the leading axis.
  TensorT select(const TensorT& x, int index);
  TensorT reshape(const TensorT& x, const Shape& shape);

  /// Normalized 3x3x3 joint bilateral aggregation.
  ///
  /// noisy and range are [3, h+2, w+2]; domain is [3, 3, 3]; the result is
  /// [h, w]. For output (y, x) and offset o = (dz, dy, dx):
  ///   out = sum_o noisy(o) * domain(o) * weight(o) / (sum_o domain(o) * weight(o) + eps)
  /// where weight(o) follows options.mode. No activation is applied.
  TensorT bilateral_aggregate(const TensorT& noisy, const TensorT& range, const TensorT& domain,
                              const BilateralOptions& options);

  /// Accumulates d(loss)/d(t) into every leaf with requires_grad set.
  /// `loss` must be a single element produced by this tape. A tape can be
  /// replayed only once.
  void backward(const TensorT& loss);

  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return record_; }

 private:
  struct Node {
    std::function<void()> backward;
  };

  TensorT result(Shape shape, std::initializer_list<const TensorT*> inputs);
  void record(const TensorT& out, std::function<void()> fn);

  template <class Fwd, class Bwd>
  TensorT unary(const TensorT& x, Fwd fwd, Bwd bwd);
  template <class Fwd, class BwdA, class BwdB>
  TensorT binary(const TensorT& a, const TensorT& b, const char* name, Fwd fwd, BwdA bwd_a, BwdB bwd_b);

  TensorT conv_impl(const TensorT& x, const TensorT& kernel, const TensorT& bias, const kernels::ConvGeometry& g,
                    Shape out_shape);

  bool record_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};


}  // namespace jbf
