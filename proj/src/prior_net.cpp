#include "jbf/prior_net.hpp"

#include <cmath>
#include <random>
#include <string>

#include "jbf/phantom.hpp"

namespace jbf {

namespace {

Tensor<float> uniform(const Shape& shape, double bound, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<float> v(element_count(shape));
  for (float& x : v) x = static_cast<float>(dist(rng));
  return Tensor<float>(shape, std::move(v));
}

}  // namespace

void init_prior(ParamSet<float>& params, std::uint64_t seed) {
  const int C = kPriorChannels;
  std::uint64_t stream = mix_seed(seed ^ 0x7072696f72ULL);
  auto layer = [&](const std::string& name, Shape wshape) {
    std::size_t fan_in = 1;
    for (std::size_t a = 1; a < wshape.size(); ++a) fan_in *= static_cast<std::size_t>(wshape[a]);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    const int cout = wshape[0];
    params.add(name + ".w", uniform(wshape, bound, stream = mix_seed(stream)));
    params.add(name + ".b", uniform({cout}, bound, stream = mix_seed(stream)));
  };
  for (int i = 1; i <= 4; ++i) layer("prior.conv" + std::to_string(i), {C, i == 1 ? 1 : C, 3, 3, 3});
  for (int i = 1; i <= 4; ++i) layer("prior.deconv" + std::to_string(i), {i == 4 ? 1 : C, C, 3, 3});
}

template <class T>
Tensor<T> prior_forward(Tape<T>& tape, const Tensor<T>& slab, const ParamSet<T>& params) {
  if (slab.rank() != 3 || slab.dim(0) != kSlabDepth) {
    throw ShapeError("stage prior input: expected [15, n, n] slab, got " + to_string(slab.shape()));
  }
  if (slab.dim(1) < 16 || slab.dim(2) < 16) {
    throw ShapeError("stage prior input: in-plane extent must be at least 16, got " + to_string(slab.shape()));
  }
  const T slope = static_cast<T>(kLeakySlope);
  Tensor<T> x = tape.reshape(slab, {1, kSlabDepth, slab.dim(1), slab.dim(2)});
  for (int i = 1; i <= 4; ++i) {
    const std::string n = "prior.conv" + std::to_string(i);
    x = tape.leaky_relu(tape.conv3d(x, params.at(n + ".w"), params.at(n + ".b"), {0, 1, 1}), slope);
  }
  for (int i = 1; i <= 4; ++i) {
    const std::string n = "prior.deconv" + std::to_string(i);
    x = tape.leaky_relu(tape.conv2d_slices(x, params.at(n + ".w"), params.at(n + ".b"), {1, 1}), slope);
  }
  return tape.reshape(x, {kPriorDepth, slab.dim(1), slab.dim(2)});
}

template Tensor<float> prior_forward(Tape<float>&, const Tensor<float>&, const ParamSet<float>&);
template Tensor<double> prior_forward(Tape<double>&, const Tensor<double>&, const ParamSet<double>&);

}  // namespace jbf
