#include "jbf/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace jbf {
namespace {

template <class T>
bool broadcast_ok(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() || a.numel() == 1 || b.numel() == 1;
}

std::string axis_mismatch(const char* what, int axis, int got, int want) {
  return std::string(what) + ": axis " + std::to_string(axis) + " has extent " + std::to_string(got) +
         ", expected " + std::to_string(want);
}

void require_rank(const char* what, const Shape& s, int rank) {
  if (static_cast<int>(s.size()) != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " + to_string(s));
  }
}

// Row-major strides of a shape.
std::vector<long> strides_of(const Shape& s) {
  std::vector<long> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// Calls fn(src_flat, dst_flat) for each element of a box of `extents`, where
// the source box starts at src_off inside src_shape and the destination box
// at dst_off inside dst_shape.
template <class Fn>
void for_each_box(const Shape& extents, const Shape& src_shape, const std::vector<long>& src_off,
                  const Shape& dst_shape, const std::vector<long>& dst_off, Fn fn) {
  const std::size_t rank = extents.size();
  for (int e : extents)
    if (e <= 0) return;
  const auto ss = strides_of(src_shape);
  const auto ds = strides_of(dst_shape);
  std::vector<int> idx(rank, 0);
  long src_base = 0, dst_base = 0;
  for (std::size_t a = 0; a < rank; ++a) {
    src_base += src_off[a] * ss[a];
    dst_base += dst_off[a] * ds[a];
  }
  const int inner = extents[rank - 1];
  while (true) {
    long s = src_base, d = dst_base;
    for (std::size_t a = 0; a + 1 < rank; ++a) {
      s += idx[a] * ss[a];
      d += idx[a] * ds[a];
    }
    for (int i = 0; i < inner; ++i) fn(s + i, d + i);
    int a = static_cast<int>(rank) - 2;
    while (a >= 0) {
      if (++idx[a] < extents[a]) break;
      idx[a] = 0;
      --a;
    }
    if (a < 0) break;
  }
}

}  // namespace

template <class T>
Tensor<T> Tape<T>::result(Shape shape, std::initializer_list<const TensorT*> inputs) {
  TensorT out(std::move(shape));
  bool needs = false;
  if (record_) {
    for (const TensorT* in : inputs) needs = needs || (in && in->defined() && in->requires_grad());
  }
  out.storage().requires_grad = needs;
  out.storage().producer = this;
  return out;
}

template <class T>
void Tape<T>::record(const TensorT& out, std::function<void()> fn) {
  if (out.requires_grad()) nodes_.push_back(Node{std::move(fn)});
}

template <class T>
template <class Fwd, class Bwd>
Tensor<T> Tape<T>::unary(const TensorT& x, Fwd fwd, Bwd bwd) {
  TensorT out = result(x.shape(), {&x});
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(xv[i]);
  record(out, [x, out, bwd]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto xv = x.values();
    auto ov = out.values();
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * bwd(xv[i], ov[i]);
  });
  return out;
}

template <class T>
template <class Fwd, class BwdA, class BwdB>
Tensor<T> Tape<T>::binary(const TensorT& a, const TensorT& b, const char* name, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
  if (!broadcast_ok(a, b)) {
    throw ShapeError(std::string(name) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  TensorT out = result(a_scalar ? b.shape() : a.shape(), {&a, &b});
  const std::size_t n = out.numel();
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < n; ++i) ov[i] = fwd(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
  record(out, [a, b, out, a_scalar, b_scalar, bwd_a, bwd_b]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto av = a.values();
    auto bv = b.values();
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[a_scalar ? 0 : i] += g[i] * bwd_a(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        gb[b_scalar ? 0 : i] += g[i] * bwd_b(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
    }
  });
  return out;
}

template <class T>
Tensor<T> Tape<T>::add(const TensorT& a, const TensorT& b) {
  return binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> Tape<T>::sub(const TensorT& a, const TensorT& b) {
  return binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> Tape<T>::mul(const TensorT& a, const TensorT& b) {
  return binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Tensor<T> Tape<T>::div_guarded(const TensorT& x, const TensorT& y, T eps) {
  if (!(eps > T(0))) throw std::invalid_argument("div_guarded: eps must be positive");
  return binary(
      x, y, "div_guarded", [eps](T a, T b) { return a / (b + eps); },
      [eps](T, T b) { return T(1) / (b + eps); },
      [eps](T a, T b) { return -a / ((b + eps) * (b + eps)); });
}

template <class T>
Tensor<T> Tape<T>::relu(const TensorT& x) {
  return unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> Tape<T>::leaky_relu(const TensorT& x, T slope) {
  return unary(
      x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <class T>
Tensor<T> Tape<T>::sigmoid(const TensorT& x) {
  return unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T s) { return s * (T(1) - s); });
}

template <class T>
Tensor<T> Tape<T>::square(const TensorT& x) {
  return unary(
      x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> Tape<T>::scale(const TensorT& x, T factor) {
  return unary(
      x, [factor](T v) { return factor * v; }, [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> Tape<T>::sum(const TensorT& x) {
  TensorT out = result(Shape{1}, {&x});
  T acc = T(0);
  for (T v : x.values()) acc += v;
  out.values()[0] = acc;
  record(out, [x, out]() mutable {
    if (!out.has_grad()) return;
    const T g = out.grad()[0];
    for (T& gx : x.grad_buffer()) gx += g;
  });
  return out;
}

template <class T>
Tensor<T> Tape<T>::mean(const TensorT& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Tensor<T> Tape<T>::conv_impl(const TensorT& x, const TensorT& kernel, const TensorT& bias,
                             const kernels::ConvGeometry& g, Shape out_shape) {
  if (bias.defined()) {
    if (bias.numel() != static_cast<std::size_t>(g.cout)) {
      throw ShapeError(axis_mismatch("conv bias", 0, static_cast<int>(bias.numel()), g.cout));
    }
  }
  if (g.od() <= 0 || g.oh() <= 0 || g.ow() <= 0) {
    throw ShapeError("conv: kernel " + to_string(kernel.shape()) + " exceeds padded input " + to_string(x.shape()));
  }
  TensorT out = result(std::move(out_shape), {&x, &kernel, &bias});
  kernels::conv_forward(g, x.data(), kernel.data(), bias.defined() ? bias.data() : nullptr, out.data());
  record(out, [x, kernel, bias, out, g]() mutable {
    if (!out.has_grad()) return;
    T* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
    T* gk = kernel.requires_grad() ? kernel.grad_buffer().data() : nullptr;
    T* gb = bias.defined() && bias.requires_grad() ? bias.grad_buffer().data() : nullptr;
    kernels::conv_backward(g, x.data(), kernel.data(), out.grad().data(), gx, gk, gb);
  });
  return out;
}

template <class T>
Tensor<T> Tape<T>::conv3d(const TensorT& x, const TensorT& kernel, const TensorT& bias, std::array<int, 3> pad) {
  require_rank("conv3d input", x.shape(), 4);
  require_rank("conv3d kernel", kernel.shape(), 5);
  if (kernel.dim(1) != x.dim(0)) throw ShapeError(axis_mismatch("conv3d kernel", 1, kernel.dim(1), x.dim(0)));
  for (int p : pad)
    if (p < 0) throw ShapeError("conv3d: negative padding");
  kernels::ConvGeometry g;
  g.cin = x.dim(0), g.d = x.dim(1), g.h = x.dim(2), g.w = x.dim(3);
  g.cout = kernel.dim(0), g.kd = kernel.dim(2), g.kh = kernel.dim(3), g.kw = kernel.dim(4);
  g.pd = pad[0], g.ph = pad[1], g.pw = pad[2];
  for (int a = 0; a < 3; ++a) {
    const int in = x.dim(a + 1) + 2 * pad[a];
    if (kernel.dim(a + 2) > in) {
      throw ShapeError(axis_mismatch("conv3d kernel exceeds padded input", a + 2, kernel.dim(a + 2), in));
    }
  }
  return conv_impl(x, kernel, bias, g, Shape{g.cout, g.od(), g.oh(), g.ow()});
}

template <class T>
Tensor<T> Tape<T>::conv2d(const TensorT& x, const TensorT& kernel, const TensorT& bias, std::array<int, 2> pad) {
  require_rank("conv2d input", x.shape(), 3);
  require_rank("conv2d kernel", kernel.shape(), 4);
  if (kernel.dim(1) != x.dim(0)) throw ShapeError(axis_mismatch("conv2d kernel", 1, kernel.dim(1), x.dim(0)));
  for (int p : pad)
    if (p < 0) throw ShapeError("conv2d: negative padding");
  kernels::ConvGeometry g;
  g.cin = x.dim(0), g.d = 1, g.h = x.dim(1), g.w = x.dim(2);
  g.cout = kernel.dim(0), g.kd = 1, g.kh = kernel.dim(2), g.kw = kernel.dim(3);
  g.ph = pad[0], g.pw = pad[1];
  for (int a = 0; a < 2; ++a) {
    const int in = x.dim(a + 1) + 2 * pad[a];
    if (kernel.dim(a + 2) > in) {
      throw ShapeError(axis_mismatch("conv2d kernel exceeds padded input", a + 2, kernel.dim(a + 2), in));
    }
  }
  return conv_impl(x, kernel, bias, g, Shape{g.cout, g.oh(), g.ow()});
}

template <class T>
Tensor<T> Tape<T>::conv2d_slices(const TensorT& x, const TensorT& kernel, const TensorT& bias,
                                 std::array<int, 2> pad) {
  require_rank("conv2d_slices input", x.shape(), 4);
  require_rank("conv2d_slices kernel", kernel.shape(), 4);
  if (kernel.dim(1) != x.dim(0)) {
    throw ShapeError(axis_mismatch("conv2d_slices kernel", 1, kernel.dim(1), x.dim(0)));
  }
  kernels::ConvGeometry g;
  g.cin = x.dim(0), g.d = x.dim(1), g.h = x.dim(2), g.w = x.dim(3);
  g.cout = kernel.dim(0), g.kd = 1, g.kh = kernel.dim(2), g.kw = kernel.dim(3);
  g.ph = pad[0], g.pw = pad[1];
  for (int a = 0; a < 2; ++a) {
    const int in = x.dim(a + 2) + 2 * pad[a];
    if (kernel.dim(a + 2) > in) {
      throw ShapeError(axis_mismatch("conv2d_slices kernel exceeds padded input", a + 2, kernel.dim(a + 2), in));
    }
  }
  return conv_impl(x, kernel, bias, g, Shape{g.cout, g.od(), g.oh(), g.ow()});
}

template <class T>
Tensor<T> Tape<T>::pad_zero(const TensorT& x, const std::vector<AxisPad>& pads) {
  const Shape& in = x.shape();
  if (pads.size() != in.size()) {
    throw ShapeError("pad_zero: " + std::to_string(pads.size()) + " pads for rank " + std::to_string(in.size()));
  }
  Shape out_shape = in;
  std::vector<long> off(in.size()), zero(in.size(), 0);
  for (std::size_t a = 0; a < in.size(); ++a) {
    if (pads[a].before < 0 || pads[a].after < 0) {
      throw ShapeError("pad_zero: negative pad on axis " + std::to_string(a));
    }
    out_shape[a] += pads[a].before + pads[a].after;
    off[a] = pads[a].before;
  }
  TensorT out = result(out_shape, {&x});
  auto xv = x.values();
  auto ov = out.values();
  for_each_box(in, in, zero, out_shape, off, [&](long s, long d) { ov[d] = xv[s]; });
  record(out, [x, out, off, zero]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto gx = x.grad_buffer();
    for_each_box(x.shape(), x.shape(), zero, out.shape(), off, [&](long s, long d) { gx[s] += g[d]; });
  });
  return out;
}

template <class T>
Tensor<T> Tape<T>::crop(const TensorT& x, const Shape& offsets, const Shape& extents) {
  const Shape& in = x.shape();
  if (offsets.size() != in.size() || extents.size() != in.size()) {
    throw ShapeError("crop: offsets/extents rank does not match input rank " + std::to_string(in.size()));
  }
  std::vector<long> off(in.size()), zero(in.size(), 0);
  for (std::size_t a = 0; a < in.size(); ++a) {
    if (offsets[a] < 0 || extents[a] <= 0 || offsets[a] + extents[a] > in[a]) {
      throw ShapeError("crop: axis " + std::to_string(a) + " window [" + std::to_string(offsets[a]) + ", " +
                       std::to_string(offsets[a] + extents[a]) + ") outside extent " + std::to_string(in[a]));
    }
    off[a] = offsets[a];
  }
  TensorT out = result(extents, {&x});
  auto xv = x.values();
  auto ov = out.values();
  for_each_box(extents, in, off, extents, zero, [&](long s, long d) { ov[d] = xv[s]; });
  record(out, [x, out, off, zero]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto gx = x.grad_buffer();
    for_each_box(out.shape(), x.shape(), off, out.shape(), zero, [&](long s, long d) { gx[s] += g[d]; });
  });
  return out;
}

template <class T>
Tensor<T> Tape<T>::shift(const TensorT& x, const std::vector<int>& offsets) {
  const Shape& in = x.shape();
  if (offsets.size() != in.size()) throw ShapeError("shift: offsets rank does not match input rank");
  Shape box(in.size());
  std::vector<long> src(in.size()), dst(in.size());
  bool empty = false;
  for (std::size_t a = 0; a < in.size(); ++a) {
    const int o = offsets[a];
    box[a] = in[a] - std::abs(o);
    if (box[a] <= 0) empty = true;
    src[a] = o >= 0 ? 0 : -o;
    dst[a] = o >= 0 ? o : 0;
  }
  TensorT out = result(in, {&x});
  if (!empty) {
    auto xv = x.values();
    auto ov = out.values();
    for_each_box(box, in, src, in, dst, [&](long s, long d) { ov[d] = xv[s]; });
  }
  record(out, [x, out, box, src, dst, empty]() mutable {
    if (!out.has_grad() || empty) return;
    auto g = out.grad();
    auto gx = x.grad_buffer();
    for_each_box(box, x.shape(), src, x.shape(), dst, [&](long s, long d) { gx[s] += g[d]; });
  });
  return out;
}

template <class T>
Tensor<T> Tape<T>::stack(const std::vector<TensorT>& parts) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  const Shape& part_shape = parts.front().shape();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    if (parts[i].shape() != part_shape) {
      throw ShapeError("stack: part " + std::to_string(i) + " has shape " + to_string(parts[i].shape()) +
                       ", expected " + to_string(part_shape));
    }
  }
  Shape out_shape{static_cast<int>(parts.size())};
  out_shape.insert(out_shape.end(), part_shape.begin(), part_shape.end());
  TensorT out = result(out_shape, {});
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  out.storage().requires_grad = record_ && needs;
  const std::size_t n = parts.front().numel();
  auto ov = out.values();
  for (std::size_t i = 0; i < parts.size(); ++i) {
    auto pv = parts[i].values();
    std::copy(pv.begin(), pv.end(), ov.begin() + static_cast<long>(i * n));
  }
  record(out, [parts, out, n]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (!parts[i].requires_grad()) continue;
      auto gp = parts[i].grad_buffer();
      for (std::size_t j = 0; j < n; ++j) gp[j] += g[i * n + j];
    }
  });
  return out;
}

template <class T>
Tensor<T> Tape<T>::select(const TensorT& x, int index) {
  if (x.rank() < 2) throw ShapeError("select: input rank must be at least 2");
  if (index < 0 || index >= x.dim(0)) {
    throw ShapeError("select: index " + std::to_string(index) + " outside axis 0 extent " + std::to_string(x.dim(0)));
  }
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  TensorT out = result(out_shape, {&x});
  const std::size_t n = out.numel();
  auto xv = x.values();
  std::copy(xv.begin() + static_cast<long>(index * n), xv.begin() + static_cast<long>((index + 1) * n),
            out.values().begin());
  record(out, [x, out, n, index]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto gx = x.grad_buffer();
    for (std::size_t j = 0; j < n; ++j) gx[index * n + j] += g[j];
  });
  return out;
}

template <class T>
Tensor<T> Tape<T>::reshape(const TensorT& x, const Shape& shape) {
  if (element_count(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  TensorT out = result(shape, {&x});
  auto xv = x.values();
  std::copy(xv.begin(), xv.end(), out.values().begin());
  record(out, [x, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto gx = x.grad_buffer();
    for (std::size_t j = 0; j < g.size(); ++j) gx[j] += g[j];
  });
  return out;
}

template <class T>
Tensor<T> Tape<T>::bilateral_aggregate(const TensorT& noisy, const TensorT& range, const TensorT& domain,
                                       const BilateralOptions& options) {
  if (!(options.eps > 0)) throw std::invalid_argument("bilateral_aggregate: eps must be positive");
  require_rank("bilateral_aggregate noisy", noisy.shape(), 3);
  if (range.shape() != noisy.shape()) {
    throw ShapeError("bilateral_aggregate: range map " + to_string(range.shape()) + " does not match noisy block " +
                     to_string(noisy.shape()));
  }
  if (noisy.dim(0) != 3) throw ShapeError(axis_mismatch("bilateral_aggregate noisy", 0, noisy.dim(0), 3));
  if (noisy.dim(1) < 3 || noisy.dim(2) < 3) throw ShapeError("bilateral_aggregate: block smaller than window");
  if (domain.shape() != Shape{3, 3, 3}) {
    throw ShapeError("bilateral_aggregate: domain kernel must be [3x3x3], got " + to_string(domain.shape()));
  }
  const int H = noisy.dim(1), W = noisy.dim(2);
  const int oh = H - 2, ow = W - 2;
  const long plane = long(H) * W;
  const T eps = static_cast<T>(options.eps);
  const T gamma = static_cast<T>(options.range_scale);
  const bool diff = options.mode == RangeMode::Difference;

  TensorT out = result(Shape{oh, ow}, {&noisy, &range, &domain});
  // Per-pixel denominators are kept for the adjoint.
  auto den = std::make_shared<std::vector<T>>(static_cast<std::size_t>(oh) * ow);
  {
    const T* n = noisy.data();
    const T* r = range.data();
    const T* k = domain.data();
    T* o = out.data();
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        const T rc = r[plane + long(y + 1) * W + (x + 1)];
        T num = T(0), sw = T(0);
        for (int dz = 0; dz < 3; ++dz) {
          for (int dy = 0; dy < 3; ++dy) {
            const long row = dz * plane + long(y + dy) * W + x;
            for (int dx = 0; dx < 3; ++dx) {
              const T ro = r[row + dx];
              T wgt;
              if (diff) {
                const T t = rc - ro;
                wgt = std::exp(-gamma * t * t);
              } else {
                wgt = ro;
              }
              const T kw = k[(dz * 3 + dy) * 3 + dx] * wgt;
              num += n[row + dx] * kw;
              sw += kw;
            }
          }
        }
        const T d = sw + eps;
        (*den)[long(y) * ow + x] = d;
        o[long(y) * ow + x] = num / d;
      }
    }
  }

  record(out, [noisy, range, domain, out, den, H, W, oh, ow, plane, gamma, diff]() mutable {
    if (!out.has_grad()) return;
    const T* n = noisy.data();
    const T* r = range.data();
    const T* k = domain.data();
    const T* o = out.data();
    auto g = out.grad();
    T* gn = noisy.requires_grad() ? noisy.grad_buffer().data() : nullptr;
    T* gr = range.requires_grad() ? range.grad_buffer().data() : nullptr;
    T* gk = domain.requires_grad() ? domain.grad_buffer().data() : nullptr;
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        const long p = long(y) * ow + x;
        const T up = g[p];
        if (up == T(0)) continue;
        const T inv = T(1) / (*den)[p];
        const T outv = o[p];
        const long c = plane + long(y + 1) * W + (x + 1);
        const T rc = r[c];
        T grc = T(0);
        for (int dz = 0; dz < 3; ++dz) {
          for (int dy = 0; dy < 3; ++dy) {
            const long row = dz * plane + long(y + dy) * W + x;
            for (int dx = 0; dx < 3; ++dx) {
              const long q = row + dx;
              const int ki = (dz * 3 + dy) * 3 + dx;
              const T ro = r[q];
              T wgt;
              if (diff) {
                const T t = rc - ro;
                wgt = std::exp(-gamma * t * t);
              } else {
                wgt = ro;
              }
              // d out / d(kernel_o * weight_o) = (noisy_o - out) / den
              const T dkw = up * (n[q] - outv) * inv;
              if (gn) gn[q] += up * k[ki] * wgt * inv;
              if (gk) gk[ki] += dkw * wgt;
              if (gr) {
                const T dw = dkw * k[ki];
                if (diff) {
                  const T t = rc - ro;
                  const T dwt = T(-2) * gamma * t * wgt;  // d wgt / d rc; d wgt / d ro is its negative
                  grc += dw * dwt;
                  gr[q] -= dw * dwt;
                } else {
                  gr[q] += dw;
                }
              }
            }
          }
        }
        if (gr && diff) gr[c] += grc;
      }
    }
  });
  return out;
}

template <class T>
void Tape<T>::backward(const TensorT& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a single element, got " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
  }
  if (loss.storage().producer != this) throw std::logic_error("backward: loss was not produced on this tape");
  if (consumed_) throw std::logic_error("backward: tape already replayed");
  consumed_ = true;
  if (!loss.requires_grad()) return;
  TensorT l = loss;
  l.grad_buffer()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

template class Tape<float>;
template class Tape<double>;

}  // namespace jbf
