#include "jbf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "jbf/tensor.hpp"

namespace jbf {

namespace {

void require_same(const Volume& a, const Volume& b, const char* what) {
  if (!a.same_extents(b)) throw ShapeError(std::string(what) + ": volumes have different extents");
}

}  // namespace

double psnr_from_mse(double mse) {
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double psnr(const Volume& ref, const Volume& test) {
  require_same(ref, test, "psnr");
  double acc = 0;
  for (std::size_t i = 0; i < ref.data.size(); ++i) {
    const double d = normalize_hu(ref.data[i]) - normalize_hu(test.data[i]);
    acc += d * d;
  }
  return psnr_from_mse(acc / static_cast<double>(ref.data.size()));
}

double ssim_slice(const float* a, const float* b, int nx, int ny) {
  constexpr int r = kSsimWindow / 2;
  if (nx < kSsimWindow || ny < kSsimWindow) throw ShapeError("ssim: slices must be at least 11x11");
  double g[kSsimWindow], total = 0;
  for (int i = 0; i < kSsimWindow; ++i) total += g[i] = std::exp(-double((i - r) * (i - r)) / (2 * kSsimSigma * kSsimSigma));
  for (double& v : g) v /= total;

  // Separable valid filtering of a, b, a^2, b^2, ab.
  const int ox = nx - 2 * r, oy = ny - 2 * r;
  std::vector<double> rows(5 * static_cast<std::size_t>(ny) * ox), stats(5 * static_cast<std::size_t>(oy) * ox);
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < ox; ++x) {
      double s[5] = {0, 0, 0, 0, 0};
      for (int k = 0; k < kSsimWindow; ++k) {
        const std::size_t i = static_cast<std::size_t>(y) * nx + x + k;
        const double va = a[i], vb = b[i];
        s[0] += g[k] * va;
        s[1] += g[k] * vb;
        s[2] += g[k] * va * va;
        s[3] += g[k] * vb * vb;
        s[4] += g[k] * va * vb;
      }
      for (int c = 0; c < 5; ++c) rows[(static_cast<std::size_t>(c) * ny + y) * ox + x] = s[c];
    }
  for (int c = 0; c < 5; ++c)
    for (int y = 0; y < oy; ++y)
      for (int x = 0; x < ox; ++x) {
        double s = 0;
        for (int k = 0; k < kSsimWindow; ++k) s += g[k] * rows[(static_cast<std::size_t>(c) * ny + y + k) * ox + x];
        stats[(static_cast<std::size_t>(c) * oy + y) * ox + x] = s;
      }

  const double c1 = kSsimK1 * kSsimK1, c2 = kSsimK2 * kSsimK2;
  const std::size_t plane = static_cast<std::size_t>(oy) * ox;
  double acc = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    const double ma = stats[i], mb = stats[plane + i];
    const double va = stats[2 * plane + i] - ma * ma, vb = stats[3 * plane + i] - mb * mb;
    const double cov = stats[4 * plane + i] - ma * mb;
    acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return acc / static_cast<double>(plane);
}

double ssim(const Volume& ref, const Volume& test) {
  require_same(ref, test, "ssim");
  const std::size_t plane = static_cast<std::size_t>(ref.nx) * ref.ny;
  std::vector<float> a(plane), b(plane);
  double acc = 0;
  for (int z = 0; z < ref.nz; ++z) {
    for (std::size_t i = 0; i < plane; ++i) {
      a[i] = static_cast<float>(normalize_hu(ref.slice(z)[i]));
      b[i] = static_cast<float>(normalize_hu(test.slice(z)[i]));
    }
    acc += ssim_slice(a.data(), b.data(), ref.nx, ref.ny);
  }
  return acc / ref.nz;
}

WilcoxonResult wilcoxon_signed(const std::vector<double>& diffs) {
  std::vector<double> d;
  for (double v : diffs) {
    if (std::isnan(v)) throw std::invalid_argument("wilcoxon: NaN difference");
    if (v != 0) d.push_back(v);
  }
  WilcoxonResult res;
  res.n = static_cast<int>(d.size());
  if (res.n < kWilcoxonMinN) return res;
  res.valid = true;

  std::vector<int> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) { return std::abs(d[i]) < std::abs(d[j]); });
  std::vector<double> rank(d.size());
  double tie_term = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  for (std::size_t i = 0; i < d.size(); ++i) (d[i] > 0 ? res.w_plus : res.w_minus) += rank[i];
  res.w = std::min(res.w_plus, res.w_minus);
  const double total = res.w_plus + res.w_minus;

  if (res.n <= kWilcoxonExactMaxN) {
    res.exact = true;
    const unsigned patterns = 1u << res.n;
    unsigned extreme = 0;
    for (unsigned mask = 0; mask < patterns; ++mask) {
      double s = 0;
      for (int i = 0; i < res.n; ++i)
        if (mask & (1u << i)) s += rank[i];
      if (std::min(s, total - s) <= res.w + 1e-9) ++extreme;
    }
    res.p = static_cast<double>(extreme) / patterns;
  } else {
    const double n = res.n;
    const double mean = n * (n + 1) / 4;
    const double var = n * (n + 1) * (2 * n + 1) / 24 - tie_term / 48;
    const double z = std::max(0.0, std::abs(res.w - mean) - 0.5) / std::sqrt(var);
    res.p = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  }
  return res;
}

int method_rank(const std::string& name) {
  static const char* const order[] = {"noisy",   "classic-jbf", "frozen-prior", "no-pretrain",
                                      "no-nm",   "single-nm",   "gaussian",     "jbfnet"};
  for (int i = 0; i < 8; ++i)
    if (name == order[i]) return i;
  return 8;
}

namespace {

MetricSummary summarize(std::vector<double> values) {
  MetricSummary s;
  s.per_volume = std::move(values);
  const double n = static_cast<double>(s.per_volume.size());
  for (double v : s.per_volume) s.mean += v;
  s.mean /= n;
  if (!std::isfinite(s.mean)) {
    s.std = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  if (s.per_volume.size() > 1) {
    double acc = 0;
    for (double v : s.per_volume) acc += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(acc / (n - 1));
  }
  return s;
}

std::vector<double> paired_diffs(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d(a.size());
  // Equal infinities (both outputs identical to the reference) count as ties.
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] == b[i] ? 0.0 : a[i] - b[i];
  return d;
}

}  // namespace

EvalReport build_report(const std::vector<std::string>& names, const std::vector<Volume>& refs,
                        std::vector<MethodOutputs> methods) {
  if (refs.empty()) throw std::invalid_argument("evaluation needs at least one reference volume");
  if (names.size() != refs.size()) throw std::invalid_argument("one name per reference volume is required");
  std::stable_sort(methods.begin(), methods.end(), [](const MethodOutputs& a, const MethodOutputs& b) {
    const int ra = method_rank(a.name), rb = method_rank(b.name);
    return ra != rb ? ra < rb : (ra == 8 && a.name < b.name);
  });
  EvalReport report;
  report.volumes = names;
  for (std::size_t i = 0; i < methods.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j)
      if (methods[i].name == methods[j].name) throw std::invalid_argument("duplicate method " + methods[i].name);
  }
  for (const auto& m : methods) {
    if (m.volumes.size() != refs.size()) {
      throw std::invalid_argument("method " + m.name + " has " + std::to_string(m.volumes.size()) +
                                  " volumes, expected " + std::to_string(refs.size()));
    }
    std::vector<double> p, s;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      p.push_back(psnr(refs[i], m.volumes[i]));
      s.push_back(ssim(refs[i], m.volumes[i]));
    }
    report.methods.push_back({m.name, summarize(std::move(p)), summarize(std::move(s))});
  }
  for (std::size_t i = 0; i < report.methods.size(); ++i)
    for (std::size_t j = i + 1; j < report.methods.size(); ++j) {
      const auto& a = report.methods[i];
      const auto& b = report.methods[j];
      report.tests.push_back({a.name, b.name, "psnr", wilcoxon_signed(paired_diffs(b.psnr.per_volume, a.psnr.per_volume))});
      report.tests.push_back({a.name, b.name, "ssim", wilcoxon_signed(paired_diffs(b.ssim.per_volume, a.ssim.per_volume))});
    }
  return report;
}

namespace {

using Json = nlohmann::ordered_json;

Json number(double v) {
  if (std::isnan(v)) return nullptr;
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

Json metric_json(const MetricSummary& m) {
  Json per = Json::array();
  for (double v : m.per_volume) per.push_back(number(v));
  return Json{{"per_volume", per}, {"mean", number(m.mean)}, {"std", number(m.std)}};
}

std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "n/a";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string report_json(const EvalReport& report) {
  Json j;
  j["volumes"] = report.volumes;
  Json order = Json::array();
  Json methods = Json::object();
  for (const auto& m : report.methods) {
    order.push_back(m.name);
    methods[m.name] = Json{{"psnr", metric_json(m.psnr)}, {"ssim", metric_json(m.ssim)}};
  }
  j["order"] = order;
  j["methods"] = methods;
  Json tests = Json::array();
  for (const auto& t : report.tests) {
    const auto& r = t.result;
    tests.push_back(Json{{"a", t.a},
                         {"b", t.b},
                         {"metric", t.metric},
                         {"n", r.n},
                         {"W", r.valid ? number(r.w) : Json(nullptr)},
                         {"p", r.valid ? number(r.p) : Json(nullptr)},
                         {"exact", r.exact}});
  }
  j["tests"] = tests;
  return j.dump(2) + "\n";
}

std::string report_table(const EvalReport& report) {
  std::size_t width = 6;
  for (const auto& m : report.methods) width = std::max(width, m.name.size());
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf, "%-*s  %-18s  %-18s\n", static_cast<int>(width), "method", "PSNR (dB)", "SSIM");
  out += buf;
  for (const auto& m : report.methods) {
    const std::string p = fixed(m.psnr.mean, 2) + " +- " + fixed(m.psnr.std, 2);
    const std::string s = fixed(m.ssim.mean, 4) + " +- " + fixed(m.ssim.std, 4);
    std::snprintf(buf, sizeof buf, "%-*s  %-18s  %-18s\n", static_cast<int>(width), m.name.c_str(), p.c_str(), s.c_str());
    out += buf;
  }
  if (!report.tests.empty()) {
    out += "\nWilcoxon signed-rank (b - a)\n";
    for (const auto& t : report.tests) {
      const std::string w = t.result.valid ? fixed(t.result.w, 1) : "n/a";
      const std::string p = t.result.valid ? fixed(t.result.p, 5) : "n/a";
      std::snprintf(buf, sizeof buf, "%-*s vs %-*s  %-4s  n=%-3d  W=%-7s  p=%s\n", static_cast<int>(width),
                    t.a.c_str(), static_cast<int>(width), t.b.c_str(), t.metric.c_str(), t.result.n, w.c_str(),
                    p.c_str());
      out += buf;
    }
  }
  return out;
}

}  // namespace jbf
