#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "jbf/params.hpp"
#include "jbf/tape.hpp"

namespace jbf {

struct GradCheckEntry {
  std::string name;     // parameter tensor name
  std::size_t index{};  // flat index inside the tensor
  double analytic{};
  double numeric{};
  double rel_error{};
  double step{};  // step that produced `numeric`
};

struct GradCheckReport {
  std::string label;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double tol = 0.0;
  /// Worst entries, sorted by descending relative error.
  std::vector<GradCheckEntry> worst;
  bool passed() const { return max_rel_error < tol; }
};

struct GradCheckOptions {
  double step = 1e-3;
  double tol = 1e-4;
  /// Gradients smaller than this are compared absolutely against it.
  double abs_floor = 1e-8;
  /// When an entry misses `tol`, the step is divided by 10 up to this many
  /// times. A central difference straddling a ReLU kink is not a derivative
  /// estimate; a smaller stencil moves off the kink.
  int refinements = 4;
  std::size_t keep_worst = 8;
  /// Check only the first N values of each tensor (0 = all).
  std::size_t max_per_tensor = 0;
};

double relative_error(double analytic, double numeric, double abs_floor);

/// Builds a scalar loss on the given tape from the given parameters.
using LossFn = std::function<Tensor<double>(Tape<double>&, ParamSet<double>&)>;

/// Compares reverse-mode gradients of `fn` against central finite differences
/// for every value of every tensor in `params` that has requires_grad set.
GradCheckReport grad_check(const LossFn& fn, ParamSet<double>& params, const GradCheckOptions& options = {});

/// Keeps the `keep` worst entries of a running report.
void note_entry(GradCheckReport& report, GradCheckEntry entry, std::size_t keep);

}  // namespace jbf
