#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "jbf/eval.hpp"
#include "jbf/phantom.hpp"
#include "support/eval_oracles.hpp"
#include "support/random.hpp"

using namespace jbf;

namespace {

Volume random_volume(int nx, int ny, int nz, std::uint64_t seed, double lo = -1024, double hi = 3071) {
  Volume v(nx, ny, nz);
  const auto vals = test::uniform_values(v.data.size(), seed, lo, hi);
  for (std::size_t i = 0; i < vals.size(); ++i) v.data[i] = static_cast<float>(vals[i]);
  return v;
}

Volume noisy_copy(const Volume& v, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Volume out = v;
  for (float& x : out.data) x = static_cast<float>(x + sigma * n(rng));
  return out;
}

}  // namespace

TEST_CASE("psnr") {
  const Volume a = random_volume(8, 7, 3, 1);
  CHECK(std::isinf(psnr(a, a)));
  CHECK(psnr(a, a) > 0);

  Volume zero(4, 4, 2, -1024.0f), tenth(4, 4, 2, -614.5f);
  CHECK(psnr(zero, tenth) == doctest::Approx(20.0).epsilon(1e-9));
  CHECK(psnr_from_mse(0.01) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK_THROWS_AS(psnr(a, Volume(8, 7, 2)), ShapeError);

  for (std::uint64_t s = 0; s < 100; ++s) {
    const Volume x = random_volume(5 + s % 6, 4 + s % 5, 1 + s % 3, 100 + s);
    const Volume y = random_volume(x.nx, x.ny, x.nz, 900 + s);
    CHECK(psnr(x, y) == doctest::Approx(oracle::psnr(x, y)).epsilon(1e-9));
  }

  PhantomSpec spec;
  spec.seed = 4;
  spec.nx = spec.ny = 32;
  spec.nz = 16;
  const Volume ref = generate_phantom(spec);
  double last = std::numeric_limits<double>::infinity();
  for (double sigma : {1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0}) {
    const double p = psnr(ref, noisy_copy(ref, sigma, 7));
    CHECK(p < last);
    last = p;
  }
}

TEST_CASE("ssim") {
  PhantomSpec spec;
  spec.seed = 9;
  spec.nx = spec.ny = 32;
  spec.nz = 16;
  const Volume ref = generate_phantom(spec);
  CHECK(ssim(ref, ref) == doctest::Approx(1.0).epsilon(1e-12));

  Volume inverted = ref;
  for (float& v : inverted.data) v = static_cast<float>(denormalize_hu(1.0 - normalize_hu(v)));
  CHECK(ssim(ref, inverted) < 0.0);

  const Volume noisy = noisy_copy(ref, 20.0, 3);
  const double s = ssim(ref, noisy);
  CHECK(s < 1.0);
  CHECK(s > -1.0);
  CHECK(ssim(noisy, ref) == doctest::Approx(s).epsilon(1e-12));
  CHECK(ssim(ref, noisy_copy(ref, 60.0, 3)) < s);

  // An identical pair stays identical under a shared shift. A shift of one
  // side alone changes only the luminance term and lowers the score.
  Volume shifted = ref;
  for (float& v : shifted.data) v += 200.0f;
  CHECK(ssim(shifted, shifted) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ssim(ref, shifted) < 1.0);

  CHECK_THROWS_AS(ssim(Volume(10, 20, 1), Volume(10, 20, 1)), ShapeError);
  CHECK_THROWS_AS(ssim(ref, Volume(32, 32, 15)), ShapeError);

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Volume x = random_volume(11 + seed % 7, 11 + seed % 5, 1 + seed % 2, 300 + seed, -200, 400);
    const Volume y = noisy_copy(x, 30.0 + seed, 700 + seed);
    CHECK(ssim(x, y) == doctest::Approx(oracle::ssim(x, y)).epsilon(1e-6));
  }
}

TEST_CASE("wilcoxon signed-rank") {
  std::vector<double> positive{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  auto r = wilcoxon_signed(positive);
  CHECK(r.valid);
  CHECK(r.exact);
  CHECK(r.w == 0.0);
  CHECK(r.w_plus == 55.0);
  CHECK(r.p == 2.0 / 1024.0);

  r = wilcoxon_signed({1, -1, 2, -2, 3, -3, 4, -4, 5, -5});
  CHECK(r.w == 27.5);
  CHECK(r.p == 1.0);

  CHECK(!wilcoxon_signed({1, 2, 3, 4}).valid);
  CHECK(!wilcoxon_signed({0, 0, 0, 0, 0, 0, 1, 2, 3, 4}).valid);
  CHECK(!wilcoxon_signed(std::vector<double>(10, 0.0)).valid);
  CHECK_THROWS_AS(wilcoxon_signed({1, 2, std::nan(""), 3, 4}), std::invalid_argument);

  // Reference values from an established statistics package.
  std::vector<double> twenty;
  for (int i = 1; i <= 20; ++i) twenty.push_back(i);
  r = wilcoxon_signed(twenty);
  CHECK(!r.exact);
  CHECK(r.p == doctest::Approx(9.569173157059432e-05).epsilon(1e-9));
  r = wilcoxon_signed({3, -1, 4, 1.5, -5, 9, 2, -6, 5, 3.5, -8, 9.7, 7.9, -3.2, 8.4, 6.6});
  CHECK(r.w == 37.5);
  CHECK(r.p == doctest::Approx(0.12077655067953075).epsilon(1e-9));

  std::mt19937_64 rng(5);
  int compared = 0;
  for (int n = 5; n <= 10; ++n)
    for (int rep = 0; rep < 40; ++rep) {
      std::vector<double> d(n);
      // Half the cases draw from a coarse grid so ties and zeros occur.
      for (double& v : d) {
        v = rep % 2 ? std::uniform_int_distribution<int>(-3, 3)(rng) : std::normal_distribution<double>(0.3, 1.0)(rng);
      }
      const auto got = wilcoxon_signed(d);
      double w = 0;
      const double p = oracle::wilcoxon_p(d, &w);
      int nonzero = 0;
      for (double v : d) nonzero += v != 0;
      if (nonzero < 5) {
        CHECK(!got.valid);
        continue;
      }
      CHECK(got.w == w);
      CHECK(got.p == p);
      ++compared;
    }
  CHECK(compared > 150);
}

TEST_CASE("evaluation report") {
  std::vector<Volume> refs;
  std::vector<std::string> names;
  for (int i = 0; i < 6; ++i) {
    PhantomSpec spec;
    spec.seed = 20 + i;
    spec.nx = spec.ny = 32;
    spec.nz = 16;
    refs.push_back(generate_phantom(spec));
    names.push_back("v" + std::to_string(i));
  }
  std::vector<MethodOutputs> methods(4);
  methods[0].name = "jbfnet";
  methods[1].name = "noisy";
  methods[2].name = "perfect";
  methods[3].name = "copy-of-noisy";
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const Volume n = noisy_copy(refs[i], 20.0, 50 + i);
    methods[0].volumes.push_back(noisy_copy(refs[i], 10.0, 80 + i));
    methods[1].volumes.push_back(n);
    methods[2].volumes.push_back(refs[i]);
    methods[3].volumes.push_back(n);
  }

  const EvalReport report = build_report(names, refs, methods);
  REQUIRE(report.methods.size() == 4);
  CHECK(report.methods[0].name == "noisy");
  CHECK(report.methods[1].name == "jbfnet");
  CHECK(report.methods[2].name == "copy-of-noisy");
  CHECK(report.methods[3].name == "perfect");
  CHECK(report.methods[3].ssim.mean == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::isinf(report.methods[3].psnr.mean));
  CHECK(report.methods[1].ssim.mean > report.methods[0].ssim.mean);
  CHECK(report.tests.size() == 12);

  for (const auto& t : report.tests) {
    if (t.a == "noisy" && t.b == "copy-of-noisy") CHECK(!t.result.valid);
    if (t.a == "noisy" && t.b == "jbfnet") {
      CHECK(t.result.valid);
      CHECK(t.result.w == 0.0);
      CHECK(t.result.p == 2.0 / 64.0);
    }
  }

  const std::string json = report_json(report);
  CHECK(json == report_json(build_report(names, refs, methods)));
  CHECK(report_table(report) == report_table(build_report(names, refs, methods)));
  CHECK(json.find("\"inf\"") != std::string::npos);
  CHECK(json.find("\"per_volume\"") != std::string::npos);
  CHECK(json.find("\"W\": null") != std::string::npos);
  const std::string table = report_table(report);
  CHECK(table.find("perfect") != std::string::npos);
  CHECK(table.find("inf +- n/a") != std::string::npos);

  methods[0].volumes.pop_back();
  CHECK_THROWS_AS(build_report(names, refs, methods), std::invalid_argument);
  CHECK(method_rank("noisy") < method_rank("classic-jbf"));
  CHECK(method_rank("gaussian") < method_rank("jbfnet"));
}
