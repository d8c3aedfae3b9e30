#pragma once

#include <cstdint>

#include "jbf/params.hpp"
#include "jbf/tape.hpp"

namespace jbf {

inline constexpr int kSlabDepth = 15;
inline constexpr int kPriorDepth = 7;
inline constexpr int kPriorChannels = 32;
inline constexpr std::size_t kPriorParamCount = 111969;
inline constexpr double kLeakySlope = 0.01;

/// Adds `prior.conv{1..4}.{w,b}` (3x3x3, depth-valid) and
/// `prior.deconv{1..4}.{w,b}` (3x3 per slice, same-padded) to `params`.
/// Every value is uniform in +-1/sqrt(fan_in), seeded per layer.
void init_prior(ParamSet<float>& params, std::uint64_t seed);

/// Guidance estimate: slab [15, n, n] -> [7, n, n]. Leaky ReLU follows every
/// layer, including the last.
template <class T>
Tensor<T> prior_forward(Tape<T>& tape, const Tensor<T>& slab, const ParamSet<T>& params);

}  // namespace jbf
