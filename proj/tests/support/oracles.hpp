#pragma once

// Straight-loop reference implementations. Nothing here calls into the
// library's kernels; each routine follows the defining formula directly.

#include <array>
#include <cmath>
#include <vector>

namespace jbf::oracle {

struct Dims4 {
  int c, d, h, w;
};

// Cross-correlation with zero padding; x [cin,d,h,w], k [cout,cin,kd,kh,kw].
inline std::vector<double> conv3d(const std::vector<double>& x, Dims4 xd, const std::vector<double>& k, int cout,
                                  int kd, int kh, int kw, const std::vector<double>& bias, std::array<int, 3> pad,
                                  Dims4* out_dims = nullptr) {
  const int od = xd.d + 2 * pad[0] - kd + 1;
  const int oh = xd.h + 2 * pad[1] - kh + 1;
  const int ow = xd.w + 2 * pad[2] - kw + 1;
  if (out_dims) *out_dims = {cout, od, oh, ow};
  std::vector<double> out(static_cast<std::size_t>(cout) * od * oh * ow, 0.0);
  for (int o = 0; o < cout; ++o)
    for (int z = 0; z < od; ++z)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (int c = 0; c < xd.c; ++c)
            for (int a = 0; a < kd; ++a)
              for (int b = 0; b < kh; ++b)
                for (int e = 0; e < kw; ++e) {
                  const int sz = z + a - pad[0], sy = y + b - pad[1], sx = xx + e - pad[2];
                  if (sz < 0 || sz >= xd.d || sy < 0 || sy >= xd.h || sx < 0 || sx >= xd.w) continue;
                  acc += x[((static_cast<std::size_t>(c) * xd.d + sz) * xd.h + sy) * xd.w + sx] *
                         k[(((static_cast<std::size_t>(o) * xd.c + c) * kd + a) * kh + b) * kw + e];
                }
          out[((static_cast<std::size_t>(o) * od + z) * oh + y) * ow + xx] = acc;
        }
  return out;
}

// Joint bilateral aggregation of a [3, h+2, w+2] block written as the textbook
// double sum over the 3x3x3 window.
inline std::vector<double> bilateral(const std::vector<double>& noisy, const std::vector<double>& range,
                                     const std::vector<double>& domain, int H, int W, double eps, bool difference,
                                     double gamma = 1.0) {
  const int oh = H - 2, ow = W - 2;
  auto at = [&](const std::vector<double>& v, int z, int y, int x) {
    return v[(static_cast<std::size_t>(z) * H + y) * W + x];
  };
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double num = 0, den = 0;
      for (int dz = 0; dz < 3; ++dz)
        for (int dy = 0; dy < 3; ++dy)
          for (int dx = 0; dx < 3; ++dx) {
            const double g = domain[(dz * 3 + dy) * 3 + dx];
            double f;
            if (difference) {
              const double t = at(range, 1, y + 1, x + 1) - at(range, dz, y + dy, x + dx);
              f = std::exp(-gamma * t * t);
            } else {
              f = at(range, dz, y + dy, x + dx);
            }
            num += at(noisy, dz, y + dy, x + dx) * g * f;
            den += g * f;
          }
      out[static_cast<std::size_t>(y) * ow + x] = num / (den + eps);
    }
  return out;
}

// Axis-aligned 3x3x3 Sobel responses of a [3, h, w] stack over the valid
// region; returns three [h-2, w-2] planes concatenated (derivative along
// depth, rows, columns).
inline std::vector<double> sobel3(const std::vector<double>& s, int H, int W) {
  const double smooth[3] = {1, 2, 1};
  const double deriv[3] = {-1, 0, 1};
  const int oh = H - 2, ow = W - 2;
  std::vector<double> out(3 * static_cast<std::size_t>(oh) * ow, 0.0);
  for (int axis = 0; axis < 3; ++axis)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double acc = 0;
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b)
            for (int c = 0; c < 3; ++c) {
              const double wz = axis == 0 ? deriv[a] : smooth[a];
              const double wy = axis == 1 ? deriv[b] : smooth[b];
              const double wx = axis == 2 ? deriv[c] : smooth[c];
              acc += wz * wy * wx * s[(static_cast<std::size_t>(a) * H + y + b) * W + x + c];
            }
        out[(static_cast<std::size_t>(axis) * oh + y) * ow + x] = acc;
      }
  return out;
}

inline double mse(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

}  // namespace jbf::oracle
