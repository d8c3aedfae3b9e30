#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "jbf/model.hpp"
#include "support/model_oracle.hpp"
#include "support/random.hpp"

using namespace jbf;
using test::as_double;
using test::random_tensor;

namespace {

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

oracle::Mix oracle_mix(MixMode m) {
  return m == MixMode::Pixelwise ? oracle::Mix::Pixelwise : m == MixMode::Single ? oracle::Mix::Single : oracle::Mix::Off;
}

}  // namespace

TEST_CASE("model parameters: prior plus exactly four 112-value blocks") {
  const auto p = init_model(1);
  CHECK_NOTHROW(validate_model_params(p));
  CHECK(p.value_count("prior.") == 111969);
  for (int k = 1; k <= 4; ++k) {
    const std::string b = "block" + std::to_string(k);
    CHECK(p.value_count(b + ".f.") + p.value_count(b + ".g.") == 112);
    CHECK(p.value_count(b + ".mix.") == 10);
  }
  CHECK(!p.contains("block5.f.l1.w"));
  CHECK(p.value_count() == 111969 + 4 * 122);

  auto extra = p.clone();
  init_block(extra, 5, 1);
  CHECK_THROWS_AS(validate_model_params(extra), std::logic_error);
  ParamSet<float> missing;
  init_prior(missing, 1);
  for (int k = 1; k <= 3; ++k) init_block(missing, k, 1);
  CHECK_THROWS_AS(validate_model_params(missing), std::logic_error);
}

TEST_CASE("stage-by-stage shapes at 64") {
  const auto p = init_model(2);
  Tape<float> tape(false);
  const auto slab = random_tensor<float>({15, 64, 64}, 3, 0.2, 0.4);
  const auto out = forward(tape, slab, p, ModelConfig{});
  CHECK(out.guidance.shape() == Shape{7, 64, 64});
  for (const auto& f : out.filtered) CHECK(f.shape() == Shape{64, 64});

  auto padded = tape.pad_zero(out.guidance, {{0, 0}, {3, 3}, {3, 3}});
  CHECK(padded.shape() == Shape{7, 70, 70});
  CHECK(range_features(tape, padded, p, "block1").shape() == Shape{3, 66, 66});

  CHECK_THROWS_WITH_AS(forward(tape, Tensor<float>({15, 64}), p, ModelConfig{}), doctest::Contains("stage prior input"),
                       ShapeError);
  CHECK_THROWS_WITH_AS(forward_blocks(tape, slab, Tensor<float>({7, 64, 32}), p, ModelConfig{}),
                       doctest::Contains("stage prior output"), ShapeError);
  CHECK_THROWS_AS(forward(tape, Tensor<float>({13, 64, 64}), p, ModelConfig{}), ShapeError);
}

TEST_CASE("forward matches the composed oracle") {
  const auto p = init_model(4);
  const auto named = oracle::named_values(p);
  const auto slab = random_tensor<float>({15, 16, 16}, 5, 0.0, 1.0);
  for (RangeMode rm : {RangeMode::Response, RangeMode::Difference}) {
    for (MixMode mm : {MixMode::Pixelwise, MixMode::Single, MixMode::Off}) {
      ModelConfig c;
      c.range_mode = rm;
      c.mix_mode = mm;
      const auto ref = oracle::model(as_double(slab), named, 16, 16, rm == RangeMode::Difference, oracle_mix(mm));
      Tape<float> tape(false);
      const auto out = forward(tape, slab, p, c);
      INFO("range " << to_string(rm) << " mix " << to_string(mm));
      CHECK(max_abs_diff(as_double(out.guidance), ref.guidance) < 1e-5);
      for (int k = 0; k < 4; ++k) CHECK(max_abs_diff(as_double(out.filtered[k]), ref.filtered[k]) < 1e-5);

      Tape<double> tape64(false);
      const auto out64 = forward(tape64, test::cast_tensor<double>(slab), p.cast<double>(), c);
      for (int k = 0; k < 4; ++k) CHECK(max_abs_diff(as_double(out64.filtered[k]), ref.filtered[k]) < 1e-10);
    }
  }
  SUBCASE("gaussian kernels") {
    const ModelConfig c = apply_ablation({}, Ablation::Gaussian);
    Tape<double> tape(false);
    const auto out = forward(tape, test::cast_tensor<double>(slab), p.cast<double>(), c);
    const auto ref = oracle::model(as_double(slab), named, 16, 16, false, oracle::Mix::Pixelwise, 1e-6, 1.0,
                                   oracle::GaussianKernels{true});
    for (int k = 0; k < 4; ++k) CHECK(max_abs_diff(as_double(out.filtered[k]), ref.filtered[k]) < 1e-10);
  }
}

TEST_CASE("constant slab with mixing off is preserved away from the zero-padded border") {
  const auto p = init_model(6);
  ModelConfig c;
  c.mix_mode = MixMode::Off;
  for (float v : {0.25f, 0.6f}) {
    Tape<float> tape(false);
    const auto out = forward(tape, Tensor<float>::full({15, 24, 24}, v), p, c);
    for (int k = 0; k < 4; ++k) {
      // Block k sees the padding directly plus k-1 rows of border influence
      // carried in from earlier blocks.
      const int margin = k + 1;
      for (int y = margin; y < 24 - margin; ++y)
        for (int x = margin; x < 24 - margin; ++x) REQUIRE(std::abs(out.filtered[k].values()[y * 24 + x] - v) < 1e-5f);
    }
  }
}

TEST_CASE("ablation flags") {
  const ModelConfig base;
  CHECK(apply_ablation(base, Ablation::None) == base);
  CHECK(apply_ablation(base, Ablation::NoNm).mix_mode == MixMode::Off);
  CHECK(apply_ablation(base, Ablation::SingleNm).mix_mode == MixMode::Single);
  CHECK(apply_ablation(base, Ablation::FrozenPrior).freeze_prior);
  CHECK(!apply_ablation(base, Ablation::NoPretrain).pretrain);
  CHECK(apply_ablation(base, Ablation::Gaussian).gaussian_kernels);
  for (Ablation a : {Ablation::None, Ablation::FrozenPrior, Ablation::NoPretrain, Ablation::NoNm, Ablation::SingleNm,
                     Ablation::Gaussian}) {
    CHECK(parse_ablation(to_string(a)) == a);
    ModelConfig c = apply_ablation(base, a);
    c.range_mode = RangeMode::Difference;
    c.eps = 3e-7;
    CHECK(config_from_metadata(config_metadata(c)) == c);
  }
  CHECK_THROWS_AS(parse_ablation("frozen"), std::invalid_argument);

  CHECK(param_in_use("prior.conv1.w", base));
  CHECK(param_in_use("block2.mix.w", base));
  CHECK(!param_in_use("block2.mix.w", apply_ablation(base, Ablation::SingleNm)));
  CHECK(param_in_use("block2.mix.b", apply_ablation(base, Ablation::SingleNm)));
  CHECK(!param_in_use("block2.mix.b", apply_ablation(base, Ablation::NoNm)));
  CHECK(!param_in_use("block3.f.l1.w", apply_ablation(base, Ablation::Gaussian)));
  CHECK(param_in_use("block3.g.l2.b", base));
}

TEST_CASE("tile layout") {
  CHECK(tile_starts(64, 64) == std::vector<int>{0});
  CHECK(tile_starts(64, 256) == std::vector<int>{0});
  CHECK(tile_starts(300, 256) == std::vector<int>{0, 44});
  CHECK(tile_starts(600, 256) == std::vector<int>{0, 128, 256, 344});
  CHECK(tile_starts(64, 32, 1) == std::vector<int>{0, 1, 17, 32});
  CHECK_THROWS_AS(tile_starts(64, 32, 16), std::invalid_argument);

  const auto cov = tile_coverage(300, 280, {});
  CHECK(cov.size() == 300u * 280u);
  CHECK(*std::min_element(cov.begin(), cov.end()) >= 1);
  CHECK(cov[0] == 1);
  CHECK(cov[150 * 300 + 150] == 4);
}

TEST_CASE("single tile per slice equals stacked slab forwards") {
  const auto p = init_model(7);
  Volume v(64, 64, 32);
  const auto vals = test::uniform_values(v.size(), 8, -200.0, 300.0);
  std::copy(vals.begin(), vals.end(), v.data.begin());
  std::vector<int> cov;
  const Volume out = denoise_volume(v, p, ModelConfig{}, {.tile = 64}, &cov);
  CHECK(out.same_extents(v));
  CHECK(std::all_of(cov.begin(), cov.end(), [](int c) { return c == 1; }));
  for (int z : {0, 3, 16, 31}) {
    Tape<float> tape(false);
    const auto f = forward(tape, extract_slab(v, z, 0, 0, 64, 64), p, ModelConfig{}).filtered.back();
    for (int i = 0; i < 64 * 64; ++i)
      REQUIRE(out.slice(z)[i] == static_cast<float>(denormalize_hu(static_cast<double>(f.values()[i]))));
  }
}

TEST_CASE("slab extraction reflects depth context") {
  Volume v(16, 16, 15);
  for (int z = 0; z < 15; ++z) std::fill(v.slice(z), v.slice(z) + 256, static_cast<float>(z));
  const auto s = extract_slab(v, 0, 0, 0, 16, 16);
  // Depth indices -7..7 map to 7..1, 0..7.
  const int expect[15] = {7, 6, 5, 4, 3, 2, 1, 0, 1, 2, 3, 4, 5, 6, 7};
  for (int d = 0; d < 15; ++d) CHECK(s.values()[d * 256] == static_cast<float>(normalize_hu(expect[d])));
  CHECK_THROWS_AS(extract_slab(Volume(16, 16, 14), 0, 0, 0, 16, 16), ShapeError);
}

TEST_CASE("overlapping tiles and origin shifts") {
  const auto p = init_model(9);
  ModelConfig c;
  c.mix_mode = MixMode::Off;
  SUBCASE("constant volume stays constant wherever every covering tile sees it as interior") {
    const float hu = 40.0f;
    const Volume flat(64, 64, 15, hu);
    const TileOptions t{.tile = 32};
    const Volume out = denoise_volume(flat, p, c, t);
    const auto xs = tile_starts(64, 32);
    const int margin = 4;
    auto deep = [&](int i) {
      for (int s : xs)
        if (i >= s && i < s + 32 && (i < s + margin || i >= s + 32 - margin)) return false;
      return true;
    };
    int checked = 0;
    for (int z = 0; z < 15; ++z)
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
          if (deep(x) && deep(y)) {
            REQUIRE(std::abs(out.at(x, y, z) - hu) < 0.05f);
            ++checked;
          }
    CHECK(checked > 0);
  }
  SUBCASE("voxels with unchanged tile membership are bit-identical") {
    Volume v(64, 64, 15);
    const auto vals = test::uniform_values(v.size(), 10, -100.0, 200.0);
    std::copy(vals.begin(), vals.end(), v.data.begin());
    const TileOptions a{.tile = 32}, b{.tile = 32, .origin_x = 1, .origin_y = 1};
    const Volume oa = denoise_volume(v, p, ModelConfig{}, a);
    const Volume ob = denoise_volume(v, p, ModelConfig{}, b);
    auto members = [](const TileOptions& t, int x, int y) {
      std::set<std::pair<int, int>> m;
      for (int ty : tile_starts(64, t.tile, t.origin_y))
        for (int tx : tile_starts(64, t.tile, t.origin_x))
          if (x >= tx && x < tx + t.tile && y >= ty && y < ty + t.tile) m.insert({tx, ty});
      return m;
    };
    int same = 0, differ = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        if (members(a, x, y) != members(b, x, y)) continue;
        ++same;
        for (int z = 0; z < 15; ++z) {
          REQUIRE(oa.at(x, y, z) == ob.at(x, y, z));
        }
      }
    for (int i = 0; i < 64 * 64 * 15; ++i) differ += oa.data[i] != ob.data[i];
    CHECK(same > 0);
    CHECK(differ > 0);
  }
}

TEST_CASE("denoise input validation") {
  const auto p = init_model(1);
  CHECK_THROWS_AS(denoise_volume(Volume(63, 64, 16), p, {}), ShapeError);
  CHECK_THROWS_AS(denoise_volume(Volume(64, 64, 14), p, {}), ShapeError);
  CHECK_THROWS_AS(denoise_volume(Volume(64, 64, 16), p, {}, {.tile = 8}), std::invalid_argument);
}
