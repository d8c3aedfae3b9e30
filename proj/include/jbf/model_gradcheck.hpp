#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "jbf/gradcheck.hpp"
#include "jbf/losses.hpp"
#include "jbf/model.hpp"

namespace jbf {

/// Double-precision prior that evaluates the effect of moving one parameter
/// value by recomputing only the layers downstream of it, in difference
/// form. Differences are propagated exactly (leaky units that change regime
/// are evaluated on both sides), so the result is the true change of the
/// prior output, not a linearization.
class PriorDeltaEvaluator {
 public:
  PriorDeltaEvaluator(const Tensor<double>& slab, const ParamSet<double>& params);
  ~PriorDeltaEvaluator();
  PriorDeltaEvaluator(const PriorDeltaEvaluator&) = delete;
  PriorDeltaEvaluator& operator=(const PriorDeltaEvaluator&) = delete;

  /// Prior values in parameter-set order.
  std::size_t value_count() const;
  /// Tensor name and flat index of prior value i.
  std::pair<std::string, std::size_t> locate(std::size_t i) const;

  /// Prior output [7, h, w] at the base parameters, flattened.
  const std::vector<double>& guidance() const;

  struct Scratch;
  std::unique_ptr<Scratch, void (*)(Scratch*)> make_scratch() const;

  struct Result {
    /// Step actually applied; smaller than requested when it was cut to
    /// keep every leaky unit on its side of the kink.
    double delta;
    /// No unit changed regime, so the change for -delta is exactly the
    /// negation of the one written.
    bool linear;
  };

  /// Writes the change of the prior output when value i moves by delta.
  /// Where a unit would cross its kink the step is cut to half the distance
  /// to the nearest kink, as long as it stays at or above min_delta in
  /// magnitude; pass min_delta = |delta| to keep the step fixed.
  Result perturb(std::size_t i, double delta, Scratch& scratch, std::vector<double>& dguidance,
                 double min_delta) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Double-precision evaluation of the four JBF blocks and the composite
/// loss for a given guidance, without a tape. Used on the finite-difference
/// side of the gradient check, where the same guidance change is evaluated
/// under several model configurations.
class BlockTailEvaluator {
 public:
  /// slab [15, h, w], ref [7, h, w].
  BlockTailEvaluator(const Tensor<double>& slab, const Tensor<double>& ref, const ParamSet<double>& params);

  struct Weights {
    std::vector<double> kw;  // [h*w, 27]
    std::vector<double> sw;  // [h*w]
  };
  /// Everything about one guidance that does not depend on the block
  /// inputs: bilateral window weights for learned response, learned
  /// difference, and classic kernels.
  struct Side {
    std::vector<double> guidance;
    std::array<Weights, kNumBlocks> response, difference;
    Weights gaussian;
    double range_scale = 0, sigma_s = 0, sigma_r_hu = 0;
  };

  /// Learned range maps of all four blocks, 4 x [3, h+2, w+2].
  void learned_ranges(const double* guidance, std::vector<double>& out) const;

  /// Reads range_scale, sigma_s, and sigma_r_hu from `kernels`; configs
  /// later evaluated on this side must agree on them.
  void prepare(const double* guidance, const ModelConfig& kernels, Side& side) const;

  /// Composite loss for the given side.
  double loss(const Side& side, const ModelConfig& config, const LossWeights& weights) const;

  /// loss(plus) - loss(minus), formed from the difference of the block
  /// outputs so that it keeps full relative precision for tiny changes.
  double loss_difference(const Side& plus, const Side& minus, const ModelConfig& config,
                         const LossWeights& weights) const;

 private:
  void window_weights(const double* range, const double* domain, bool difference, double gamma, Weights& out) const;
  void block_outputs(const Side& side, const ModelConfig& config,
                     std::array<std::vector<double>, kNumBlocks>& outputs) const;
  double pair_term(const std::vector<double>& u, const std::vector<double>& v) const;
  double combine(const Side& p, const Side& m, const ModelConfig& config, const LossWeights& weights,
                 bool difference) const;

  int h_, w_;
  std::vector<double> center_, ref_, ref_center_;
  // Zero-bordered [3, h+2, w+2] block input with the slabs next to the
  // center filled in; the middle slice is written per block.
  std::vector<double> stack_;
  std::array<int, 27> taps_;  // offsets of the window taps in stack_
  double f_w_[kNumBlocks][2][27], f_b_[kNumBlocks][2];
  double domain_[kNumBlocks][27];
  double mix_w_[kNumBlocks][9], mix_b_[kNumBlocks];
};

/// One configuration of the whole-model check.
struct ModelCheckCase {
  std::string label;
  ModelConfig config;
  /// Pre-training loss and trainable set instead of the joint ones.
  bool pretrain = false;
};

/// Pre-training, then every ablation under both range modes.
std::vector<ModelCheckCase> standard_check_cases();

struct ModelGradCheckOptions {
  std::uint64_t seed = 1;
  int size = 16;  // in-plane extent of the slab
  double step = 1e-3;
  double tol = 1e-4;
  double abs_floor = 1e-8;
  /// Retries for values that miss tol. For prior values whose first step
  /// stayed between kinks, retries step the tail along the exact first
  /// change with steps 10*step, step, ...; otherwise the step shrinks
  /// tenfold per retry.
  int refinements = 4;
  std::size_t keep_worst = 8;
  /// Check every k-th prior value (1 = all of them).
  std::size_t prior_stride = 1;
  /// Prior values per case whose finite difference is recomputed through
  /// the tape forward, to confirm the fast evaluators agree with the model.
  std::size_t spot_checks = 4;
};

struct ModelCheckResult {
  std::string label;
  GradCheckReport report;
  std::size_t prior_checked = 0;
  std::size_t block_checked = 0;
  /// Largest relative difference between fast and tape finite differences
  /// over the spot-checked prior values.
  double cross_check = 0.0;
  bool passed() const { return report.passed() && cross_check < report.tol; }
};

/// Check point: the initialization for `seed` with every value moved by a
/// uniform jitter in [-1e-3, 1e-3]. At the initialization itself zero biases
/// over zero-padded guidance put whole regions exactly on a ReLU kink, where
/// no finite difference measures a derivative.
ParamSet<double> check_params(std::uint64_t seed);

/// Normalized slab [15, n, n] and reference region [7, n, n] cut from a
/// low-dose phantom.
void make_check_inputs(std::uint64_t seed, int size, Tensor<double>& slab, Tensor<double>& ref);

/// Compares full-model reverse-mode gradients of the training loss against
/// central finite differences for every trainable value of each case.
std::vector<ModelCheckResult> model_grad_check(const std::vector<ModelCheckCase>& cases,
                                               const ModelGradCheckOptions& options);

}  // namespace jbf
