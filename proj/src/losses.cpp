#include "jbf/losses.hpp"

namespace jbf {

template <class T>
Tensor<T> mse_loss(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  return tape.mean(tape.square(tape.sub(a, b)));
}

template <class T>
Tensor<T> sobel_kernel() {
  const T smooth[3] = {1, 2, 1};
  const T deriv[3] = {-1, 0, 1};
  Tensor<T> k({3, 1, 3, 3, 3});
  auto v = k.values();
  for (int axis = 0; axis < 3; ++axis)
    for (int z = 0; z < 3; ++z)
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
          v[((axis * 3 + z) * 3 + y) * 3 + x] = (axis == 0 ? deriv[z] : smooth[z]) *
                                                (axis == 1 ? deriv[y] : smooth[y]) *
                                                (axis == 2 ? deriv[x] : smooth[x]);
        }
  return k;
}

template <class T>
Tensor<T> edge_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& ref_stack) {
  if (ref_stack.rank() != 3 || ref_stack.dim(0) != 3 || pred.rank() != 2 || pred.dim(0) != ref_stack.dim(1) ||
      pred.dim(1) != ref_stack.dim(2) || pred.dim(0) < 3 || pred.dim(1) < 3) {
    throw ShapeError("edge loss: prediction " + to_string(pred.shape()) + " vs reference stack " +
                     to_string(ref_stack.shape()));
  }
  const int h = pred.dim(0), w = pred.dim(1);
  const Tensor<T> kernel = sobel_kernel<T>();
  auto gradients = [&](const Tensor<T>& stack) {
    return tape.conv3d(tape.reshape(stack, {1, 3, h, w}), kernel, Tensor<T>(), {0, 0, 0});
  };
  const Tensor<T> pred_stack = tape.stack({tape.select(ref_stack, 0), pred, tape.select(ref_stack, 2)});
  return mse_loss(tape, gradients(pred_stack), gradients(ref_stack));
}

template <class T>
Tensor<T> composite_loss(Tape<T>& tape, const ForwardOutputs<T>& outputs, const Tensor<T>& ref,
                         const LossWeights& weights) {
  if (ref.rank() != 3 || ref.dim(0) != kPriorDepth) {
    throw ShapeError("composite loss: expected reference region [7, n, n], got " + to_string(ref.shape()));
  }
  const int h = ref.dim(1), w = ref.dim(2);
  const Tensor<T> center = tape.select(ref, kPriorDepth / 2);
  const Tensor<T> stack = tape.crop(ref, {kPriorDepth / 2 - 1, 0, 0}, {3, h, w});
  auto block_term = [&](const Tensor<T>& f) {
    return tape.add(mse_loss(tape, f, center), tape.scale(edge_loss(tape, f, stack), T(kEdgeWeight)));
  };

  Tensor<T> total = Tensor<T>::scalar(T(0));
  if (weights.lambda1 != 0) {
    total = tape.add(total, tape.scale(block_term(outputs.filtered[kNumBlocks - 1]), T(weights.lambda1)));
  }
  if (weights.lambda2 != 0) {
    total = tape.add(total, tape.scale(mse_loss(tape, outputs.guidance, ref), T(weights.lambda2)));
  }
  if (weights.lambda3 != 0) {
    for (int k = 0; k + 1 < kNumBlocks; ++k) {
      total = tape.add(total, tape.scale(block_term(outputs.filtered[k]), T(weights.lambda3)));
    }
  }
  return total;
}

#define JBF_INSTANTIATE(T)                                                                               \
  template Tensor<T> mse_loss(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> sobel_kernel<T>();                                                                  \
  template Tensor<T> edge_loss(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> composite_loss(Tape<T>&, const ForwardOutputs<T>&, const Tensor<T>&, const LossWeights&);
JBF_INSTANTIATE(float)
JBF_INSTANTIATE(double)
#undef JBF_INSTANTIATE

}  // namespace jbf
