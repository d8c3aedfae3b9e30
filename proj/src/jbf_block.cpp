#include "jbf/jbf_block.hpp"

#include <cmath>
#include <random>

#include "jbf/phantom.hpp"

namespace jbf {

template <class T>
Tensor<T> distance_matrix() {
  Tensor<T> d({7, 7, 7});
  auto v = d.values();
  for (int z = 0; z < 7; ++z)
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 7; ++x)
        v[(z * 7 + y) * 7 + x] = static_cast<T>(std::sqrt(double((z - 3) * (z - 3) + (y - 3) * (y - 3) + (x - 3) * (x - 3))));
  return d;
}

template <class T>
Tensor<T> gaussian_domain_kernel(double sigma_s) {
  if (!(sigma_s > 0)) throw std::invalid_argument("sigma_s must be positive");
  Tensor<T> k({3, 3, 3});
  auto v = k.values();
  for (int z = 0; z < 3; ++z)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        const double r2 = (z - 1) * (z - 1) + (y - 1) * (y - 1) + (x - 1) * (x - 1);
        v[(z * 3 + y) * 3 + x] = static_cast<T>(std::exp(-r2 / (2 * sigma_s * sigma_s)));
      }
  return k;
}

std::string block_prefix(int index) { return "block" + std::to_string(index); }

void init_block(ParamSet<float>& params, int index, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed ^ (0x626c6f636bULL + static_cast<std::uint64_t>(index))));
  auto fill = [&](const Shape& shape, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<float> v(element_count(shape));
    for (float& x : v) x = static_cast<float>(dist(rng));
    return Tensor<float>(shape, std::move(v));
  };
  const std::string p = block_prefix(index);
  for (const char* net : {".f", ".g"}) {
    for (const char* layer : {".l1", ".l2"}) {
      params.add(p + net + layer + ".w", fill({1, 1, 3, 3, 3}, 0.0, 0.1));
      // A positive second-layer bias keeps every initial kernel value
      // strictly positive whatever the guidance looks like.
      params.add(p + net + layer + ".b", Tensor<float>::full({1}, layer[2] == '2' ? kKernelBiasInit : 0.0f));
    }
  }
  params.add(p + ".mix.w", fill({1, 1, 3, 3}, -0.05, 0.05));
  params.add(p + ".mix.b", Tensor<float>::full({1}, -2.0f));
}

namespace {

template <class T>
Tensor<T> two_layer_net(Tape<T>& tape, const Tensor<T>& input, const ParamSet<T>& params, const std::string& net) {
  Tensor<T> x = tape.reshape(input, {1, input.dim(0), input.dim(1), input.dim(2)});
  x = tape.relu(tape.conv3d(x, params.at(net + ".l1.w"), params.at(net + ".l1.b"), {0, 0, 0}));
  x = tape.relu(tape.conv3d(x, params.at(net + ".l2.w"), params.at(net + ".l2.b"), {0, 0, 0}));
  return tape.reshape(x, {x.dim(1), x.dim(2), x.dim(3)});
}

}  // namespace

template <class T>
Tensor<T> range_features(Tape<T>& tape, const Tensor<T>& guidance, const ParamSet<T>& params, const std::string& prefix) {
  if (guidance.rank() != 3 || guidance.dim(0) != 7 || guidance.dim(1) < 5 || guidance.dim(2) < 5) {
    throw ShapeError("range features: expected padded guidance [7, h+4, w+4], got " + to_string(guidance.shape()));
  }
  return two_layer_net(tape, guidance, params, prefix + ".f");
}

template <class T>
Tensor<T> domain_kernel(Tape<T>& tape, const Tensor<T>& dist, const ParamSet<T>& params, const std::string& prefix) {
  if (dist.shape() != Shape{7, 7, 7}) {
    throw ShapeError("domain kernel: expected [7, 7, 7] distances, got " + to_string(dist.shape()));
  }
  return two_layer_net(tape, dist, params, prefix + ".g");
}

template <class T>
Tensor<T> mix_noise_map(Tape<T>& tape, const Tensor<T>& filtered, const Tensor<T>& center_in,
                        const ParamSet<T>& params, const std::string& prefix, MixMode mode) {
  if (filtered.shape() != center_in.shape() || filtered.rank() != 2) {
    throw ShapeError("noise-map mixing: filtered " + to_string(filtered.shape()) + " vs input " +
                     to_string(center_in.shape()));
  }
  if (mode == MixMode::Off) return filtered;
  const Tensor<T> nm = tape.sub(center_in, filtered);
  Tensor<T> c;
  if (mode == MixMode::Single) {
    c = tape.sigmoid(params.at(prefix + ".mix.b"));
  } else {
    const int h = nm.dim(0), w = nm.dim(1);
    const Tensor<T> z =
        tape.conv2d(tape.reshape(nm, {1, h, w}), params.at(prefix + ".mix.w"), params.at(prefix + ".mix.b"), {1, 1});
    c = tape.reshape(tape.sigmoid(z), {h, w});
  }
  return tape.add(filtered, tape.mul(nm, c));
}

namespace {

int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

}  // namespace

Volume gaussian_smooth(const Volume& v, double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("smoothing sigma must be positive");
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> taps(2 * r + 1);
  double total = 0;
  for (int i = -r; i <= r; ++i) total += taps[i + r] = std::exp(-double(i * i) / (2 * sigma * sigma));
  for (double& t : taps) t /= total;

  Volume out = v, tmp = v;
  const int ext[3] = {v.nx, v.ny, v.nz};
  for (int axis = 0; axis < 3; ++axis) {
    tmp = out;
    for (int z = 0; z < v.nz; ++z)
      for (int y = 0; y < v.ny; ++y)
        for (int x = 0; x < v.nx; ++x) {
          double acc = 0;
          for (int i = -r; i <= r; ++i) {
            int p[3] = {x, y, z};
            p[axis] = reflect(p[axis] + i, ext[axis]);
            acc += taps[i + r] * tmp.at(p[0], p[1], p[2]);
          }
          out.at(x, y, z) = static_cast<float>(acc);
        }
  }
  return out;
}

Volume classic_gaussian_jbf(const Volume& noisy, const Volume& guidance, double sigma_s, double sigma_r) {
  if (!(sigma_s > 0) || !(sigma_r > 0)) throw std::invalid_argument("classic JBF sigmas must be positive");
  if (!noisy.same_extents(guidance)) throw ShapeError("classic JBF: guidance extents differ from the noisy volume");
  const auto domain = gaussian_domain_kernel<double>(sigma_s);
  const double inv2r = 1.0 / (2 * sigma_r * sigma_r);
  Volume out = noisy;
  for (int z = 0; z < noisy.nz; ++z)
    for (int y = 0; y < noisy.ny; ++y)
      for (int x = 0; x < noisy.nx; ++x) {
        const double gc = guidance.at(x, y, z);
        double num = 0, den = 0;
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int qx = reflect(x + dx, noisy.nx), qy = reflect(y + dy, noisy.ny), qz = reflect(z + dz, noisy.nz);
              const double t = gc - guidance.at(qx, qy, qz);
              const double w = domain.values()[((dz + 1) * 3 + dy + 1) * 3 + dx + 1] * std::exp(-t * t * inv2r);
              num += w * noisy.at(qx, qy, qz);
              den += w;
            }
        out.at(x, y, z) = static_cast<float>(num / den);
      }
  return out;
}

Volume classic_denoise(const Volume& noisy, double sigma_s, double sigma_r, double guidance_sigma) {
  return classic_gaussian_jbf(noisy, gaussian_smooth(noisy, guidance_sigma), sigma_s, sigma_r);
}

#define JBF_INSTANTIATE(T)                                                                                          \
  template Tensor<T> distance_matrix<T>();                                                                          \
  template Tensor<T> gaussian_domain_kernel<T>(double);                                                             \
  template Tensor<T> range_features(Tape<T>&, const Tensor<T>&, const ParamSet<T>&, const std::string&);            \
  template Tensor<T> domain_kernel(Tape<T>&, const Tensor<T>&, const ParamSet<T>&, const std::string&);             \
  template Tensor<T> mix_noise_map(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const ParamSet<T>&,                \
                                   const std::string&, MixMode);
JBF_INSTANTIATE(float)
JBF_INSTANTIATE(double)
#undef JBF_INSTANTIATE

}  // namespace jbf
