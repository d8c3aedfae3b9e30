#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "jbf/jbf_block.hpp"
#include "jbf/params.hpp"
#include "jbf/prior_net.hpp"
#include "jbf/tape.hpp"
#include "jbf/volume.hpp"

namespace jbf {

inline constexpr int kNumBlocks = 4;
inline constexpr int kCenterSlice = 7;  // of the 15-slice slab

enum class Ablation { None, FrozenPrior, NoPretrain, NoNm, SingleNm, Gaussian };

struct ModelConfig {
  RangeMode range_mode = RangeMode::Response;
  MixMode mix_mode = MixMode::Pixelwise;
  /// Fixed Gaussian range/domain kernels in place of the F and G nets.
  bool gaussian_kernels = false;
  /// Prior parameters stay fixed once pre-training ends.
  bool freeze_prior = false;
  bool pretrain = true;
  double eps = 1e-6;
  /// Difference-mode scale on learned range features.
  double range_scale = 1.0;
  /// Gaussian-kernel variant: spatial sigma in voxels, range sigma in HU.
  double sigma_s = kClassicSigmaS;
  double sigma_r_hu = kClassicSigmaR;

  bool operator==(const ModelConfig&) const = default;
};

std::string to_string(Ablation a);
std::string to_string(RangeMode m);
std::string to_string(MixMode m);
/// Accepts none, frozen-prior, no-pretrain, no-nm, single-nm, gaussian.
Ablation parse_ablation(const std::string& s);
RangeMode parse_range_mode(const std::string& s);
MixMode parse_mix_mode(const std::string& s);

ModelConfig apply_ablation(ModelConfig config, Ablation ablation);

/// Round-trips the config through checkpoint metadata.
std::map<std::string, std::string> config_metadata(const ModelConfig& config);
ModelConfig config_from_metadata(const std::map<std::string, std::string>& meta);

/// Full parameter set: prior followed by blocks 1..4. Every tensor exists in
/// every configuration so checkpoints always carry the complete set.
ParamSet<float> init_model(std::uint64_t seed);

/// Throws unless params hold exactly the prior (111,969 values) and four
/// blocks with 112 filter values each.
void validate_model_params(const ParamSet<float>& params);

/// Whether the named parameter influences the output under `config`.
bool param_in_use(const std::string& name, const ModelConfig& config);

template <class T>
struct ForwardOutputs {
  Tensor<T> guidance;                    // I_g, [7, n, n]
  std::array<Tensor<T>, kNumBlocks> filtered;  // I_f1..I_f4, [n, n] each
};

/// Full model on a normalized slab [15, n, n].
template <class T>
ForwardOutputs<T> forward(Tape<T>& tape, const Tensor<T>& slab, const ParamSet<T>& params, const ModelConfig& config);

/// The four JBF blocks given the prior output.
template <class T>
std::array<Tensor<T>, kNumBlocks> forward_blocks(Tape<T>& tape, const Tensor<T>& slab, const Tensor<T>& guidance,
                                                 const ParamSet<T>& params, const ModelConfig& config);

struct TileOptions {
  int tile = 256;
  /// Offset of the first strided tile; a tile at 0 is always kept.
  int origin_x = 0;
  int origin_y = 0;
};

/// Tile start positions along one axis: stride tile/2, the last tile aligned
/// to the end.
std::vector<int> tile_starts(int extent, int tile, int origin = 0);

/// Per-pixel number of tiles covering an nx-by-ny slice.
std::vector<int> tile_coverage(int nx, int ny, const TileOptions& tiling);

/// Slice-by-slice tiled inference on an HU volume. Depth context is
/// reflect-padded at the volume ends; overlapping tiles are averaged.
/// If `coverage` is given it receives the per-pixel tile count of one slice.
Volume denoise_volume(const Volume& noisy, const ParamSet<float>& params, const ModelConfig& config,
                      const TileOptions& tiling = {}, std::vector<int>* coverage = nullptr);

/// Normalized [15, ny, nx] slab around slice z, rows y0.., cols x0.., with
/// reflected depth context.
Tensor<float> extract_slab(const Volume& v, int z, int x0, int y0, int nx, int ny);

}  // namespace jbf
