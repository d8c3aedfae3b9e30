#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "jbf/volume.hpp"

namespace jbf {

struct HuRange {
  float lo, hi;
};

struct PhantomSpec {
  std::uint64_t seed = 0;
  int nx = 128, ny = 128, nz = 32;
  float background_hu = 0.0f;  // water-filled body
  float air_hu = -1000.0f;
  int soft_ellipsoids = 5;
  int bone_ellipsoids = 2;
  int boxes = 2;  // soft-tissue boxes
  HuRange soft_tissue{30.0f, 90.0f};
  HuRange bone{700.0f, 1200.0f};
  int low_contrast_inserts = 1;
  float low_contrast_delta = 15.0f;
};

/// Parses `key = value` lines ('#' starts a comment) onto a default spec.
/// Unknown keys and malformed values throw std::invalid_argument.
PhantomSpec parse_phantom_config(const std::string& text);

/// Elliptic-cylinder water body in air with soft-tissue, bone, and
/// low-contrast inserts. Fully determined by its parameters and seed.
Volume generate_phantom(const PhantomSpec& spec);

inline constexpr double kSigmaFull = 10.0;  // HU at full dose
inline constexpr double kStandardDoses[] = {0.05, 0.1, 0.25, 0.5};

/// Additive noise standard deviation at dose fraction d: sigma_full * sqrt(1/d - 1).
double dose_sigma(double dose, double sigma_full = kSigmaFull);

/// reference + white Gaussian noise of dose_sigma(dose). dose must lie in (0, 1].
Volume simulate_low_dose(const Volume& reference, double dose, std::uint64_t seed, double sigma_full = kSigmaFull);

/// SplitMix64 finalizer, used to derive independent stream seeds.
std::uint64_t mix_seed(std::uint64_t x);

}  // namespace jbf
