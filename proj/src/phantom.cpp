#include "jbf/phantom.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace jbf {

std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw std::invalid_argument("phantom config: bad value for " + key + ": " + text);
  return v;
}

HuRange parse_range(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  std::string a, b, rest;
  if (!(in >> a >> b) || (in >> rest)) throw std::invalid_argument("phantom config: " + key + " needs two values");
  HuRange r{parse_number<float>(key, a), parse_number<float>(key, b)};
  if (r.lo > r.hi) throw std::invalid_argument("phantom config: " + key + " range is reversed");
  return r;
}

struct Ellipsoid {
  double cx, cy, cz, rx, ry, rz;
  float hu;
  bool contains(double x, double y, double z) const {
    const double u = (x - cx) / rx, v = (y - cy) / ry, w = (z - cz) / rz;
    return u * u + v * v + w * w <= 1.0;
  }
};

struct Box {
  double x0, x1, y0, y1, z0, z1;
  float hu;
  bool contains(double x, double y, double z) const {
    return x >= x0 && x <= x1 && y >= y0 && y <= y1 && z >= z0 && z <= z1;
  }
};

}  // namespace

PhantomSpec parse_phantom_config(const std::string& text) {
  PhantomSpec s;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("phantom config: expected key = value: " + line);
    const std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
    if (key == "seed") s.seed = parse_number<std::uint64_t>(key, val);
    else if (key == "nx") s.nx = parse_number<int>(key, val);
    else if (key == "ny") s.ny = parse_number<int>(key, val);
    else if (key == "nz") s.nz = parse_number<int>(key, val);
    else if (key == "background_hu") s.background_hu = parse_number<float>(key, val);
    else if (key == "air_hu") s.air_hu = parse_number<float>(key, val);
    else if (key == "soft_ellipsoids") s.soft_ellipsoids = parse_number<int>(key, val);
    else if (key == "bone_ellipsoids") s.bone_ellipsoids = parse_number<int>(key, val);
    else if (key == "boxes") s.boxes = parse_number<int>(key, val);
    else if (key == "soft_tissue_hu") s.soft_tissue = parse_range(key, val);
    else if (key == "bone_hu") s.bone = parse_range(key, val);
    else if (key == "low_contrast_inserts") s.low_contrast_inserts = parse_number<int>(key, val);
    else if (key == "low_contrast_delta") s.low_contrast_delta = parse_number<float>(key, val);
    else throw std::invalid_argument("phantom config: unknown key " + key);
  }
  return s;
}

Volume generate_phantom(const PhantomSpec& spec) {
  if (spec.nx < 32 || spec.ny < 32 || spec.nz < 16) {
    throw std::invalid_argument("phantom extents must be at least 32x32x16");
  }
  if (spec.soft_ellipsoids < 0 || spec.bone_ellipsoids < 0 || spec.boxes < 0 || spec.low_contrast_inserts < 1) {
    throw std::invalid_argument("phantom needs nonnegative primitive counts and at least one low-contrast insert");
  }
  std::mt19937_64 rng(mix_seed(spec.seed));
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  const double W = spec.nx, H = spec.ny, D = spec.nz;
  const double cx = (W - 1) / 2, cy = (H - 1) / 2;
  const double bx = uni(0.40, 0.46) * W, by = uni(0.34, 0.44) * H;

  // Insert centers are drawn inside the inner 60% of the body so every
  // primitive stays surrounded by water.
  auto inside = [&](double r_frac) {
    const double a = uni(0.0, 2.0 * M_PI), r = std::sqrt(uni(0.0, 1.0)) * r_frac;
    return std::pair{cx + r * bx * std::cos(a), cy + r * by * std::sin(a)};
  };

  std::vector<Ellipsoid> ellipsoids;
  for (int i = 0; i < spec.soft_ellipsoids; ++i) {
    auto [x, y] = inside(0.6);
    ellipsoids.push_back({x, y, uni(0.2, 0.8) * D, uni(0.04, 0.12) * W, uni(0.04, 0.12) * H, uni(0.15, 0.6) * D,
                          static_cast<float>(uni(spec.soft_tissue.lo, spec.soft_tissue.hi))});
  }
  std::vector<Box> boxes;
  for (int i = 0; i < spec.boxes; ++i) {
    auto [x, y] = inside(0.55);
    const double hx = uni(0.03, 0.08) * W, hy = uni(0.03, 0.08) * H, z = uni(0.2, 0.8) * D, hz = uni(0.15, 0.5) * D;
    boxes.push_back({x - hx, x + hx, y - hy, y + hy, z - hz, z + hz,
                     static_cast<float>(uni(spec.soft_tissue.lo, spec.soft_tissue.hi))});
  }
  for (int i = 0; i < spec.bone_ellipsoids; ++i) {
    auto [x, y] = inside(0.65);
    ellipsoids.push_back({x, y, uni(0.3, 0.7) * D, uni(0.03, 0.07) * W, uni(0.03, 0.07) * H, uni(0.3, 0.9) * D,
                          static_cast<float>(uni(spec.bone.lo, spec.bone.hi))});
  }
  std::vector<Ellipsoid> low_contrast;
  for (int i = 0; i < spec.low_contrast_inserts; ++i) {
    auto [x, y] = inside(0.5);
    const double r = uni(0.05, 0.09) * std::min(W, H);
    low_contrast.push_back({x, y, uni(0.35, 0.65) * D, r, r, uni(0.25, 0.45) * D, spec.background_hu});
  }

  Volume v(spec.nx, spec.ny, spec.nz, spec.air_hu);
  for (int z = 0; z < spec.nz; ++z)
    for (int y = 0; y < spec.ny; ++y)
      for (int x = 0; x < spec.nx; ++x) {
        const double u = (x - cx) / bx, w = (y - cy) / by;
        if (u * u + w * w > 1.0) continue;
        float hu = spec.background_hu;
        // Later primitives paint over earlier ones; low-contrast inserts add
        // to whatever lies beneath them.
        for (const auto& b : boxes)
          if (b.contains(x, y, z)) hu = b.hu;
        for (const auto& e : ellipsoids)
          if (e.contains(x, y, z)) hu = e.hu;
        for (const auto& e : low_contrast)
          if (e.contains(x, y, z)) hu += spec.low_contrast_delta;
        v.at(x, y, z) = std::clamp(hu, static_cast<float>(kHuMin), static_cast<float>(kHuMax));
      }
  return v;
}

double dose_sigma(double dose, double sigma_full) {
  if (!(dose > 0.0 && dose <= 1.0)) throw std::invalid_argument("dose fraction must lie in (0, 1]");
  return sigma_full * std::sqrt(1.0 / dose - 1.0);
}

Volume simulate_low_dose(const Volume& reference, double dose, std::uint64_t seed, double sigma_full) {
  const double sigma = dose_sigma(dose, sigma_full);
  Volume out = reference;
  if (sigma == 0.0) return out;
  std::mt19937_64 rng(mix_seed(seed ^ 0x6e6f697365ULL));
  std::normal_distribution<double> noise(0.0, sigma);
  for (float& f : out.data) f = static_cast<float>(f + noise(rng));
  return out;
}

}  // namespace jbf
