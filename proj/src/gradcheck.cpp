#include "jbf/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace jbf {

double relative_error(double analytic, double numeric, double abs_floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / denom;
}

void note_entry(GradCheckReport& report, GradCheckEntry entry, std::size_t keep) {
  ++report.checked;
  report.max_rel_error = std::max(report.max_rel_error, entry.rel_error);
  if (keep == 0) return;
  if (report.worst.size() == keep && entry.rel_error <= report.worst.back().rel_error) return;
  auto pos = std::upper_bound(report.worst.begin(), report.worst.end(), entry,
                              [](const GradCheckEntry& a, const GradCheckEntry& b) { return a.rel_error > b.rel_error; });
  report.worst.insert(pos, std::move(entry));
  if (report.worst.size() > keep) report.worst.pop_back();
}

GradCheckReport grad_check(const LossFn& fn, ParamSet<double>& params, const GradCheckOptions& options) {
  GradCheckReport report;
  report.tol = options.tol;

  params.zero_grad();
  {
    Tape<double> tape;
    Tensor<double> loss = fn(tape, params);
    tape.backward(loss);
  }
  auto evaluate = [&]() {
    Tape<double> tape(false);
    return fn(tape, params).item();
  };

  for (auto& entry : params.entries()) {
    Tensor<double>& t = entry.tensor;
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    const std::size_t n = options.max_per_tensor ? std::min(options.max_per_tensor, t.numel()) : t.numel();
    auto values = t.values();
    for (std::size_t i = 0; i < n; ++i) {
      const double original = values[i];
      double step = options.step;
      GradCheckEntry best{entry.name, i, analytic[i], 0.0, INFINITY, step};
      for (int attempt = 0; attempt <= options.refinements; ++attempt, step /= 10.0) {
        values[i] = original + step;
        const double plus = evaluate();
        values[i] = original - step;
        const double minus = evaluate();
        values[i] = original;
        const double numeric = (plus - minus) / (2.0 * step);
        const double err = relative_error(analytic[i], numeric, options.abs_floor);
        if (err < best.rel_error) best = GradCheckEntry{entry.name, i, analytic[i], numeric, err, step};
        if (err < options.tol) break;
      }
      note_entry(report, std::move(best), options.keep_worst);
    }
  }
  params.zero_grad();
  return report;
}

}  // namespace jbf
