#pragma once

#include <string>
#include <utility>
#include <vector>

#include "jbf/volume.hpp"

namespace jbf {

/// PSNR in dB after mapping both volumes from [-1024, 3071] HU to [0, 1],
/// peak 1. Identical volumes give +infinity.
double psnr(const Volume& ref, const Volume& test);

/// PSNR of a given normalized MSE (peak 1).
double psnr_from_mse(double mse);

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// SSIM of one normalized slice pair, averaged over every full 11x11 window.
double ssim_slice(const float* a, const float* b, int nx, int ny);

/// Mean over slices of the per-slice SSIM on normalized values.
double ssim(const Volume& ref, const Volume& test);

struct WilcoxonResult {
  bool valid = false;  // false when fewer than 5 nonzero differences remain
  int n = 0;           // nonzero differences
  double w_plus = 0.0, w_minus = 0.0;
  double w = 0.0;  // min(w_plus, w_minus)
  double p = 1.0;  // two-sided
  bool exact = false;
};

inline constexpr int kWilcoxonMinN = 5;
inline constexpr int kWilcoxonExactMaxN = 12;

/// Signed-rank test on paired differences. Zeros are dropped, tied
/// magnitudes share average ranks. Exact null distribution by enumerating
/// all 2^n sign patterns for n <= 12, normal approximation with continuity
/// and tie corrections above.
WilcoxonResult wilcoxon_signed(const std::vector<double>& diffs);

struct MetricSummary {
  std::vector<double> per_volume;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (0 for one volume)
};

struct MethodScores {
  std::string name;
  MetricSummary psnr, ssim;
};

struct PairTest {
  std::string a, b, metric;
  WilcoxonResult result;
};

struct EvalReport {
  std::vector<std::string> volumes;
  std::vector<MethodScores> methods;  // display order
  std::vector<PairTest> tests;
};

struct MethodOutputs {
  std::string name;
  std::vector<Volume> volumes;  // parallel to the reference list
};

/// Rank of a method name in the table order: noisy input, classic JBF, the
/// ablations, JBFnet. Unknown names sort after these, alphabetically.
int method_rank(const std::string& name);

/// Scores every method on every reference and runs a Wilcoxon test on
/// both metrics for every pair of methods.
EvalReport build_report(const std::vector<std::string>& names, const std::vector<Volume>& refs,
                        std::vector<MethodOutputs> methods);

/// JSON: volumes, method order, methods -> {psnr, ssim} -> {per_volume,
/// mean, std}, tests -> [{a, b, metric, n, W, p, exact}]. Infinite PSNR is
/// the string "inf"; tests with too few differences carry null W and p.
std::string report_json(const EvalReport& report);

/// Aligned text table, one row per method.
std::string report_table(const EvalReport& report);

}  // namespace jbf
