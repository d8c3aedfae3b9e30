#include "jbf/conv_kernels.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <vector>

namespace jbf::kernels {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

constexpr long kTargetColumns = 8192;

// Output depth slices processed per im2col chunk.
int chunk_depth(const ConvGeometry& g, long target = kTargetColumns) {
  const long plane = long(g.oh()) * g.ow();
  return static_cast<int>(std::clamp<long>(target / std::max<long>(plane, 1), 1, g.od()));
}

// col[(ci,kz,ky,kx), (z - z0, y, x)] = in[ci, z + kz - pd, y + ky - ph, x + kx - pw]
template <class T, class U>
void im2col(const ConvGeometry& g, const T* in, int z0, int z1, U* col) {
  const int oh = g.oh(), ow = g.ow();
  const long ncols = long(z1 - z0) * oh * ow;
  long row = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int kz = 0; kz < g.kd; ++kz) {
      for (int ky = 0; ky < g.kh; ++ky) {
        for (int kx = 0; kx < g.kw; ++kx, ++row) {
          U* dst = col + row * ncols;
          // x range in output whose source column lies inside the input
          const int x_lo = std::max(0, g.pw - kx);
          const int x_hi = std::min(ow, g.w + g.pw - kx);
          for (int z = z0; z < z1; ++z) {
            const int sz = z + kz - g.pd;
            for (int y = 0; y < oh; ++y, dst += ow) {
              const int sy = y + ky - g.ph;
              if (sz < 0 || sz >= g.d || sy < 0 || sy >= g.h || x_lo >= x_hi) {
                std::fill(dst, dst + ow, U(0));
                continue;
              }
              const T* src = in + ((long(ci) * g.d + sz) * g.h + sy) * g.w + (x_lo + kx - g.pw);
              std::fill(dst, dst + x_lo, U(0));
              std::copy(src, src + (x_hi - x_lo), dst + x_lo);
              std::fill(dst + x_hi, dst + ow, U(0));
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* col, int z0, int z1, T* grad_in) {
  const int oh = g.oh(), ow = g.ow();
  const long ncols = long(z1 - z0) * oh * ow;
  long row = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int kz = 0; kz < g.kd; ++kz) {
      for (int ky = 0; ky < g.kh; ++ky) {
        for (int kx = 0; kx < g.kw; ++kx, ++row) {
          const T* src = col + row * ncols;
          const int x_lo = std::max(0, g.pw - kx);
          const int x_hi = std::min(ow, g.w + g.pw - kx);
          for (int z = z0; z < z1; ++z) {
            const int sz = z + kz - g.pd;
            for (int y = 0; y < oh; ++y, src += ow) {
              const int sy = y + ky - g.ph;
              if (sz < 0 || sz >= g.d || sy < 0 || sy >= g.h) continue;
              T* dst = grad_in + ((long(ci) * g.d + sz) * g.h + sy) * g.w + (x_lo + kx - g.pw);
              for (int x = x_lo; x < x_hi; ++x) dst[x - x_lo] += src[x];
            }
          }
        }
      }
    }
  }
}

}  // namespace

// Products are accumulated in double for either input type: single-precision
// sums over a few hundred taps with cancellation otherwise lose tens of ulps.
template <class T>
void conv_forward(const ConvGeometry& g, const T* in, const T* kernel, const T* bias, T* out) {
  const long plane = long(g.oh()) * g.ow();
  const long out_stride = long(g.od()) * plane;
  const long krows = long(g.cin) * g.kd * g.kh * g.kw;
  const int chunk = chunk_depth(g, kTargetColumns / 4);
  std::vector<double> col(static_cast<std::size_t>(krows * chunk * plane));
  const RowMat<double> K = Eigen::Map<const RowMat<T>>(kernel, g.cout, krows).template cast<double>();
  RowMat<double> acc;

  for (int z0 = 0; z0 < g.od(); z0 += chunk) {
    const int z1 = std::min(g.od(), z0 + chunk);
    const long ncols = long(z1 - z0) * plane;
    im2col(g, in, z0, z1, col.data());
    Eigen::Map<const RowMat<double>> C(col.data(), krows, ncols);
    acc.noalias() = K * C;
    if (bias) {
      for (int o = 0; o < g.cout; ++o) acc.row(o).array() += double(bias[o]);
    }
    StridedMap<T> Y(out + long(z0) * plane, g.cout, ncols, Eigen::OuterStride<>(out_stride));
    Y = acc.template cast<T>();
  }
}

template <class T>
void conv_backward(const ConvGeometry& g, const T* in, const T* kernel, const T* grad_out, T* grad_in,
                   T* grad_kernel, T* grad_bias) {
  const long plane = long(g.oh()) * g.ow();
  const long out_stride = long(g.od()) * plane;
  const long krows = long(g.cin) * g.kd * g.kh * g.kw;

  if (grad_bias) {
    for (int o = 0; o < g.cout; ++o) {
      const T* go = grad_out + o * out_stride;
      T acc = T(0);
      for (long i = 0; i < out_stride; ++i) acc += go[i];
      grad_bias[o] += acc;
    }
  }
  if (!grad_in && !grad_kernel) return;

  const int chunk = chunk_depth(g);
  std::vector<T> col(static_cast<std::size_t>(krows * chunk * plane));
  Eigen::Map<const RowMat<T>> K(kernel, g.cout, krows);
  Eigen::Map<RowMat<T>> dK(grad_kernel, grad_kernel ? g.cout : 0, grad_kernel ? krows : 0);

  for (int z0 = 0; z0 < g.od(); z0 += chunk) {
    const int z1 = std::min(g.od(), z0 + chunk);
    const long ncols = long(z1 - z0) * plane;
    ConstStridedMap<T> dY(grad_out + long(z0) * plane, g.cout, ncols, Eigen::OuterStride<>(out_stride));
    if (grad_kernel) {
      im2col(g, in, z0, z1, col.data());
      Eigen::Map<const RowMat<T>> C(col.data(), krows, ncols);
      dK.noalias() += dY * C.transpose();
    }
    if (grad_in) {
      Eigen::Map<RowMat<T>> dC(col.data(), krows, ncols);
      dC.noalias() = K.transpose() * dY;
      col2im_add(g, col.data(), z0, z1, grad_in);
    }
  }
}

template void conv_forward<float>(const ConvGeometry&, const float*, const float*, const float*, float*);
template void conv_forward<double>(const ConvGeometry&, const double*, const double*, const double*, double*);
template void conv_backward<float>(const ConvGeometry&, const float*, const float*, const float*, float*, float*,
                                   float*);
template void conv_backward<double>(const ConvGeometry&, const double*, const double*, const double*, double*,
                                    double*, double*);

}  // namespace jbf::kernels
