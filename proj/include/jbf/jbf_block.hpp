#pragma once

#include <cstdint>
#include <string>

#include "jbf/params.hpp"
#include "jbf/tape.hpp"
#include "jbf/volume.hpp"

namespace jbf {

/// Values per block in the range (F) and domain (G) kernel nets: two 3x3x3
/// single-filter layers with bias each.
inline constexpr std::size_t kBlockFilterParams = 112;

enum class MixMode {
  Pixelwise,  // c = sigmoid(conv3x3(NM) + b)
  Single,     // c = sigmoid(b)
  Off,        // output is the filtered image
};

/// 7x7x7 Euclidean distances (in voxels) from the center voxel.
template <class T>
Tensor<T> distance_matrix();

/// Fixed domain kernel exp(-|o|^2 / (2 sigma^2)) over the 3x3x3 window.
template <class T>
Tensor<T> gaussian_domain_kernel(double sigma_s);

inline constexpr float kKernelBiasInit = 0.1f;

/// Adds the F, G, and mixing parameters of block `index` (1-based):
/// F/G weights uniform in [0, 0.1], first-layer bias 0, second-layer bias
/// kKernelBiasInit; mixing weights uniform in +-0.05 with bias -2.
void init_block(ParamSet<float>& params, int index, std::uint64_t seed);

std::string block_prefix(int index);

/// F: two valid 3x3x3 convolutions with ReLU. [7, h+4, w+4] -> [3, h, w].
template <class T>
Tensor<T> range_features(Tape<T>& tape, const Tensor<T>& guidance, const ParamSet<T>& params, const std::string& prefix);

/// G: two valid 3x3x3 convolutions with ReLU. [7, 7, 7] -> [3, 3, 3].
template <class T>
Tensor<T> domain_kernel(Tape<T>& tape, const Tensor<T>& dist, const ParamSet<T>& params, const std::string& prefix);

/// filtered + c * (center_in - filtered), with c per `mode`.
template <class T>
Tensor<T> mix_noise_map(Tape<T>& tape, const Tensor<T>& filtered, const Tensor<T>& center_in,
                        const ParamSet<T>& params, const std::string& prefix, MixMode mode);

/// Separable Gaussian smoothing along all three axes with reflected borders,
/// truncated at 3 sigma.
Volume gaussian_smooth(const Volume& v, double sigma);

/// Classic (untrained) joint bilateral filter over a 3x3x3 window with
/// Gaussian domain and range kernels; borders are reflected. Values in HU.
Volume classic_gaussian_jbf(const Volume& noisy, const Volume& guidance, double sigma_s, double sigma_r);

inline constexpr double kClassicSigmaS = 1.5;
inline constexpr double kClassicSigmaR = 30.0;  // HU
inline constexpr double kClassicGuidanceSigma = 1.0;

/// Classic filter with the guidance taken as the smoothed noisy volume.
Volume classic_denoise(const Volume& noisy, double sigma_s = kClassicSigmaS, double sigma_r = kClassicSigmaR,
                       double guidance_sigma = kClassicGuidanceSigma);

}  // namespace jbf
