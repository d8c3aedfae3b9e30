#pragma once

#include "jbf/model.hpp"
#include "jbf/tape.hpp"

namespace jbf {

/// Weights of the output, prior, and intermediate-block terms.
struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 0.1;
  double lambda3 = 0.1;

  bool operator==(const LossWeights&) const = default;
};

/// Pre-training trains the prior alone.
inline constexpr LossWeights kPretrainWeights{0.0, 1.0, 0.0};
inline constexpr LossWeights kJointWeights{1.0, 0.1, 0.1};

/// Weight of the edge term next to each block MSE.
inline constexpr double kEdgeWeight = 0.1;

template <class T>
Tensor<T> mse_loss(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// The three axis-aligned 3x3x3 Sobel operators as a [3, 1, 3, 3, 3] kernel
/// (depth, row, column derivative in that order).
template <class T>
Tensor<T> sobel_kernel();

/// Edge-filtration loss of a predicted slice [n, n] against a reference
/// stack [3, n, n] (below, center, above). The prediction replaces the
/// reference center, both stacks go through the Sobel operators with valid
/// extent, and the loss is the MSE over all three gradient components.
template <class T>
Tensor<T> edge_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& ref_stack);

/// Training loss on one slab. `ref` is the [7, n, n] reference region
/// aligned with the guidance. Terms with a zero weight are skipped, so block
/// outputs may be left undefined when lambda1 and lambda3 are zero.
template <class T>
Tensor<T> composite_loss(Tape<T>& tape, const ForwardOutputs<T>& outputs, const Tensor<T>& ref,
                         const LossWeights& weights);

}  // namespace jbf
