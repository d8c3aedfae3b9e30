#include "jbf/model.hpp"

#include <algorithm>
#include <charconv>
#include <stdexcept>

#include "jbf/parallel.hpp"

namespace jbf {

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::None: return "none";
    case Ablation::FrozenPrior: return "frozen-prior";
    case Ablation::NoPretrain: return "no-pretrain";
    case Ablation::NoNm: return "no-nm";
    case Ablation::SingleNm: return "single-nm";
    case Ablation::Gaussian: return "gaussian";
  }
  return "?";
}

std::string to_string(RangeMode m) { return m == RangeMode::Response ? "response" : "difference"; }

std::string to_string(MixMode m) {
  switch (m) {
    case MixMode::Pixelwise: return "pixelwise";
    case MixMode::Single: return "single";
    case MixMode::Off: return "off";
  }
  return "?";
}

Ablation parse_ablation(const std::string& s) {
  for (Ablation a : {Ablation::None, Ablation::FrozenPrior, Ablation::NoPretrain, Ablation::NoNm, Ablation::SingleNm,
                     Ablation::Gaussian}) {
    if (to_string(a) == s) return a;
  }
  throw std::invalid_argument("unknown ablation: " + s);
}

RangeMode parse_range_mode(const std::string& s) {
  if (s == "response") return RangeMode::Response;
  if (s == "difference") return RangeMode::Difference;
  throw std::invalid_argument("unknown range mode: " + s);
}

MixMode parse_mix_mode(const std::string& s) {
  for (MixMode m : {MixMode::Pixelwise, MixMode::Single, MixMode::Off}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown mixing mode: " + s);
}

ModelConfig apply_ablation(ModelConfig c, Ablation a) {
  switch (a) {
    case Ablation::None: break;
    case Ablation::FrozenPrior: c.freeze_prior = true; break;
    case Ablation::NoPretrain: c.pretrain = false; break;
    case Ablation::NoNm: c.mix_mode = MixMode::Off; break;
    case Ablation::SingleNm: c.mix_mode = MixMode::Single; break;
    case Ablation::Gaussian: c.gaussian_kernels = true; break;
  }
  return c;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::map<std::string, std::string>& meta, const std::string& key, double fallback) {
  auto it = meta.find(key);
  if (it == meta.end()) return fallback;
  double v = 0;
  const auto& s = it->second;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw std::invalid_argument("bad metadata value for " + key);
  return v;
}

bool parse_flag(const std::map<std::string, std::string>& meta, const std::string& key, bool fallback) {
  auto it = meta.find(key);
  if (it == meta.end()) return fallback;
  if (it->second == "1") return true;
  if (it->second == "0") return false;
  throw std::invalid_argument("bad metadata flag for " + key);
}

}  // namespace

std::map<std::string, std::string> config_metadata(const ModelConfig& c) {
  return {{"range_mode", to_string(c.range_mode)},
          {"mix_mode", to_string(c.mix_mode)},
          {"gaussian_kernels", c.gaussian_kernels ? "1" : "0"},
          {"freeze_prior", c.freeze_prior ? "1" : "0"},
          {"pretrain", c.pretrain ? "1" : "0"},
          {"eps", fmt(c.eps)},
          {"range_scale", fmt(c.range_scale)},
          {"sigma_s", fmt(c.sigma_s)},
          {"sigma_r_hu", fmt(c.sigma_r_hu)}};
}

ModelConfig config_from_metadata(const std::map<std::string, std::string>& meta) {
  ModelConfig c;
  if (auto it = meta.find("range_mode"); it != meta.end()) c.range_mode = parse_range_mode(it->second);
  if (auto it = meta.find("mix_mode"); it != meta.end()) c.mix_mode = parse_mix_mode(it->second);
  c.gaussian_kernels = parse_flag(meta, "gaussian_kernels", c.gaussian_kernels);
  c.freeze_prior = parse_flag(meta, "freeze_prior", c.freeze_prior);
  c.pretrain = parse_flag(meta, "pretrain", c.pretrain);
  c.eps = parse_double(meta, "eps", c.eps);
  c.range_scale = parse_double(meta, "range_scale", c.range_scale);
  c.sigma_s = parse_double(meta, "sigma_s", c.sigma_s);
  c.sigma_r_hu = parse_double(meta, "sigma_r_hu", c.sigma_r_hu);
  return c;
}

ParamSet<float> init_model(std::uint64_t seed) {
  ParamSet<float> params;
  init_prior(params, seed);
  for (int k = 1; k <= kNumBlocks; ++k) init_block(params, k, seed);
  validate_model_params(params);
  return params;
}

void validate_model_params(const ParamSet<float>& params) {
  const std::size_t prior = params.value_count("prior.");
  if (prior != kPriorParamCount) {
    throw std::logic_error("prior holds " + std::to_string(prior) + " values, expected " +
                           std::to_string(kPriorParamCount));
  }
  std::size_t accounted = prior;
  for (int k = 1; k <= kNumBlocks; ++k) {
    const std::string p = block_prefix(k);
    const std::size_t filt = params.value_count(p + ".f.") + params.value_count(p + ".g.");
    if (filt != kBlockFilterParams) {
      throw std::logic_error(p + " filter nets hold " + std::to_string(filt) + " values, expected 112");
    }
    accounted += filt + params.value_count(p + ".mix.");
  }
  if (params.contains(block_prefix(kNumBlocks + 1) + ".mix.b") || accounted != params.value_count()) {
    throw std::logic_error("model must contain exactly the prior and 4 JBF blocks");
  }
}

bool param_in_use(const std::string& name, const ModelConfig& c) {
  if (name.starts_with("prior.")) return true;
  if (name.find(".f.") != std::string::npos || name.find(".g.") != std::string::npos) return !c.gaussian_kernels;
  if (name.ends_with(".mix.w")) return c.mix_mode == MixMode::Pixelwise;
  if (name.ends_with(".mix.b")) return c.mix_mode != MixMode::Off;
  throw std::invalid_argument("not a model parameter: " + name);
}

namespace {

void expect_stage(const char* stage, const Shape& got, const Shape& want) {
  if (got != want) {
    throw ShapeError(std::string("stage ") + stage + ": expected " + to_string(want) + ", got " + to_string(got));
  }
}

}  // namespace

template <class T>
std::array<Tensor<T>, kNumBlocks> forward_blocks(Tape<T>& tape, const Tensor<T>& slab, const Tensor<T>& guidance,
                                                 const ParamSet<T>& params, const ModelConfig& config) {
  if (slab.rank() != 3) throw ShapeError("stage slab: expected [15, h, w], got " + to_string(slab.shape()));
  const int h = slab.dim(1), w = slab.dim(2);
  expect_stage("slab", slab.shape(), {kSlabDepth, h, w});
  expect_stage("prior output", guidance.shape(), {kPriorDepth, h, w});

  const std::vector<AxisPad> spatial1{{0, 0}, {1, 1}, {1, 1}};
  BilateralOptions opts;
  opts.eps = config.eps;

  Tensor<T> fixed_range, fixed_domain, padded_guidance, dist;
  if (config.gaussian_kernels) {
    // Classic kernels evaluated on the normalized guidance.
    const double sr = config.sigma_r_hu / (kHuMax - kHuMin);
    opts.mode = RangeMode::Difference;
    opts.range_scale = 1.0 / (2.0 * sr * sr);
    fixed_range = tape.pad_zero(tape.crop(guidance, {2, 0, 0}, {3, h, w}), spatial1);
    fixed_domain = gaussian_domain_kernel<T>(config.sigma_s);
  } else {
    opts.mode = config.range_mode;
    opts.range_scale = config.range_scale;
    padded_guidance = tape.pad_zero(guidance, {{0, 0}, {3, 3}, {3, 3}});
    expect_stage("padded guidance", padded_guidance.shape(), {kPriorDepth, h + 6, w + 6});
    dist = distance_matrix<T>();
  }

  const Tensor<T> below = tape.select(slab, kCenterSlice - 1);
  const Tensor<T> above = tape.select(slab, kCenterSlice + 1);
  Tensor<T> center = tape.select(slab, kCenterSlice);
  std::array<Tensor<T>, kNumBlocks> out;
  for (int k = 1; k <= kNumBlocks; ++k) {
    const std::string prefix = block_prefix(k);
    const Tensor<T> range = config.gaussian_kernels ? fixed_range : range_features(tape, padded_guidance, params, prefix);
    const Tensor<T> domain = config.gaussian_kernels ? fixed_domain : domain_kernel(tape, dist, params, prefix);
    expect_stage("range weights", range.shape(), {3, h + 2, w + 2});
    expect_stage("domain kernel", domain.shape(), {3, 3, 3});

    const Tensor<T> block = tape.pad_zero(tape.stack({below, center, above}), spatial1);
    expect_stage("block input", block.shape(), {3, h + 2, w + 2});
    const Tensor<T> filtered = tape.relu(tape.bilateral_aggregate(block, range, domain, opts));
    expect_stage("block output", filtered.shape(), {h, w});
    out[k - 1] = mix_noise_map(tape, filtered, center, params, prefix, config.mix_mode);
    center = out[k - 1];
  }
  return out;
}

template <class T>
ForwardOutputs<T> forward(Tape<T>& tape, const Tensor<T>& slab, const ParamSet<T>& params, const ModelConfig& config) {
  ForwardOutputs<T> out;
  out.guidance = prior_forward(tape, slab, params);
  out.filtered = forward_blocks(tape, slab, out.guidance, params, config);
  return out;
}

template ForwardOutputs<float> forward(Tape<float>&, const Tensor<float>&, const ParamSet<float>&, const ModelConfig&);
template ForwardOutputs<double> forward(Tape<double>&, const Tensor<double>&, const ParamSet<double>&,
                                        const ModelConfig&);
template std::array<Tensor<float>, kNumBlocks> forward_blocks(Tape<float>&, const Tensor<float>&, const Tensor<float>&,
                                                              const ParamSet<float>&, const ModelConfig&);
template std::array<Tensor<double>, kNumBlocks> forward_blocks(Tape<double>&, const Tensor<double>&,
                                                               const Tensor<double>&, const ParamSet<double>&,
                                                               const ModelConfig&);

std::vector<int> tile_starts(int extent, int tile, int origin) {
  if (tile < 1 || extent < 1) throw std::invalid_argument("tile and extent must be positive");
  const int t = std::min(tile, extent);
  const int stride = std::max(1, t / 2);
  if (origin < 0 || origin >= stride) throw std::invalid_argument("tile origin must lie in [0, stride)");
  std::vector<int> s{0};
  for (int p = origin; p + t < extent; p += stride) s.push_back(p);
  s.push_back(extent - t);
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

namespace {

int reflect_index(int i, int n) {
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

}  // namespace

Tensor<float> extract_slab(const Volume& v, int z, int x0, int y0, int nx, int ny) {
  if (v.nz < kSlabDepth) throw ShapeError("volume depth must be at least 15 slices");
  if (x0 < 0 || y0 < 0 || x0 + nx > v.nx || y0 + ny > v.ny) throw ShapeError("slab window exceeds the volume");
  Tensor<float> slab({kSlabDepth, ny, nx});
  float* dst = slab.data();
  for (int s = 0; s < kSlabDepth; ++s) {
    const float* src = v.slice(reflect_index(z + s - kCenterSlice, v.nz));
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x)
        *dst++ = static_cast<float>(normalize_hu(src[static_cast<std::size_t>(y0 + y) * v.nx + x0 + x]));
  }
  return slab;
}

std::vector<int> tile_coverage(int nx, int ny, const TileOptions& tiling) {
  const auto xs = tile_starts(nx, tiling.tile, tiling.origin_x);
  const auto ys = tile_starts(ny, tiling.tile, tiling.origin_y);
  const int tx = std::min(tiling.tile, nx), ty = std::min(tiling.tile, ny);
  std::vector<int> count(static_cast<std::size_t>(nx) * ny, 0);
  for (int y0 : ys)
    for (int x0 : xs)
      for (int y = 0; y < ty; ++y)
        for (int x = 0; x < tx; ++x) ++count[static_cast<std::size_t>(y0 + y) * nx + x0 + x];
  return count;
}

Volume denoise_volume(const Volume& noisy, const ParamSet<float>& params, const ModelConfig& config,
                      const TileOptions& tiling, std::vector<int>* coverage) {
  if (noisy.nx < 64 || noisy.ny < 64) throw ShapeError("denoise: in-plane extents must be at least 64");
  if (noisy.nz < kSlabDepth) throw ShapeError("denoise: volume needs at least 15 slices");
  if (tiling.tile < 16) throw std::invalid_argument("denoise: tile must be at least 16");
  const auto xs = tile_starts(noisy.nx, tiling.tile, tiling.origin_x);
  const auto ys = tile_starts(noisy.ny, tiling.tile, tiling.origin_y);
  const int tx = std::min(tiling.tile, noisy.nx), ty = std::min(tiling.tile, noisy.ny);

  const std::vector<int> count = tile_coverage(noisy.nx, noisy.ny, tiling);
  if (coverage) *coverage = count;

  Volume out = noisy;
  parallel_for(static_cast<std::size_t>(noisy.nz), [&](std::size_t zi) {
    const int z = static_cast<int>(zi);
    std::vector<double> acc(count.size(), 0.0);
    for (int y0 : ys)
      for (int x0 : xs) {
        Tape<float> tape(false);
        const auto slab = extract_slab(noisy, z, x0, y0, tx, ty);
        const auto result = forward(tape, slab, params, config).filtered.back();
        const float* r = result.data();
        for (int y = 0; y < ty; ++y)
          for (int x = 0; x < tx; ++x) acc[static_cast<std::size_t>(y0 + y) * noisy.nx + x0 + x] += r[y * tx + x];
      }
    float* dst = out.slice(z);
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<float>(denormalize_hu(acc[i] / count[i]));
  });
  return out;
}

}  // namespace jbf
