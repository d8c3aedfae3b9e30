#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace jbf {

/// Scalar 3D grid in HU-like units. Storage is z-major, then y, then x.
struct Volume {
  int nx = 0, ny = 0, nz = 0;
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};  // mm, informational
  std::vector<float> data;

  Volume() = default;
  Volume(int nx_, int ny_, int nz_, float fill = 0.0f);

  std::size_t size() const { return data.size(); }
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * ny + y) * nx + x;
  }
  float& at(int x, int y, int z) { return data[index(x, y, z)]; }
  float at(int x, int y, int z) const { return data[index(x, y, z)]; }
  const float* slice(int z) const { return data.data() + static_cast<std::size_t>(z) * nx * ny; }
  float* slice(int z) { return data.data() + static_cast<std::size_t>(z) * nx * ny; }
  bool same_extents(const Volume& o) const { return nx == o.nx && ny == o.ny && nz == o.nz; }
};

// HU values are mapped to [0, 1] through this window wherever a fixed
// normalization is needed (network I/O and the quality metrics).
inline constexpr double kHuMin = -1024.0;
inline constexpr double kHuMax = 3071.0;

inline double normalize_hu(double hu) { return (hu - kHuMin) / (kHuMax - kHuMin); }
inline double denormalize_hu(double v) { return v * (kHuMax - kHuMin) + kHuMin; }

}  // namespace jbf
