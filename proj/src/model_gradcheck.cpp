#include "jbf/model_gradcheck.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <stdexcept>

#include "jbf/parallel.hpp"
#include "jbf/phantom.hpp"
#include "jbf/trainer.hpp"

namespace jbf {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double kSlope = kLeakySlope;

double leaky(double z) { return z > 0 ? z : kSlope * z; }

}  // namespace

// Activations live in a flat layout per channel where each row of a slice
// is followed by one zero column and each slice by one zero row, with a
// zero margin at both ends. A 3x3 in-plane tap then becomes a fixed offset
// in the flat index, and each convolution is one small GEMM per tap over a
// contiguous column range. Separator columns of a result are discarded.
struct PriorDeltaEvaluator::Impl {
  using Array = Eigen::Array<double, 1, Eigen::Dynamic>;

  struct Layer {
    int cin = 0, cout = 0, dout = 0;
    std::vector<long> offsets;  // per tap
    std::vector<RowMat> taps;   // per tap, [cout, cin]
    RowMat z, a;                // pre- and post-activation, zero outside
    RowMat slope;               // leaky slope at z, zero outside
    RowMat zabs;                // |z|, infinite outside
    long n = 0;                 // computed columns, starting at the margin
  };
  struct Tensor_ {
    std::string name;
    int layer = 0;
    bool bias = false;
    std::size_t size = 0, offset = 0;
  };

  int h = 0, w = 0, wp = 0;
  long plane = 0, margin = 0, cols = 0;
  RowMat input;
  std::vector<Layer> layers;
  std::vector<Tensor_> tensors;
  std::size_t total = 0;
  std::vector<double> guidance;

  long column(int d, int y, int x) const { return margin + d * plane + static_cast<long>(y) * wp + x; }
  bool inside(long col, int depth) const {
    const long r = col - margin;
    if (r < 0 || r >= depth * plane) return false;
    const long q = r % plane;
    return q / wp < h && q % wp < w;
  }

  // Columns outside [margin, margin + n) are never written and stay zero.
  void conv(const Layer& l, const RowMat& in, RowMat& out) const {
    out.middleCols(margin, l.n).setZero();
    for (std::size_t t = 0; t < l.taps.size(); ++t)
      out.middleCols(margin, l.n).noalias() += l.taps[t] * in.middleCols(margin + l.offsets[t], l.n);
  }
};

struct PriorDeltaEvaluator::Scratch {
  std::vector<RowMat> dz, da;
  RowMat row_dz, row_da;
};

PriorDeltaEvaluator::PriorDeltaEvaluator(const Tensor<double>& slab, const ParamSet<double>& params)
    : impl_(std::make_unique<Impl>()) {
  Impl& m = *impl_;
  if (slab.rank() != 3 || slab.dim(0) != kSlabDepth) throw ShapeError("prior evaluator: expected a [15, h, w] slab");
  m.h = slab.dim(1);
  m.w = slab.dim(2);
  m.wp = m.w + 1;
  m.plane = static_cast<long>(m.h + 1) * m.wp;
  m.margin = m.wp + 1;
  m.cols = m.margin + kSlabDepth * m.plane + m.margin;
  m.input = RowMat::Zero(1, m.cols);
  for (int d = 0; d < kSlabDepth; ++d)
    for (int y = 0; y < m.h; ++y)
      for (int x = 0; x < m.w; ++x)
        m.input(0, m.column(d, y, x)) = slab.values()[(static_cast<std::size_t>(d) * m.h + y) * m.w + x];

  int depth = kSlabDepth;
  for (int li = 0; li < 8; ++li) {
    const bool is3d = li < 4;
    const std::string name = is3d ? "prior.conv" + std::to_string(li + 1) : "prior.deconv" + std::to_string(li - 3);
    const Tensor<double>& wt = params.at(name + ".w");
    const Tensor<double>& bt = params.at(name + ".b");
    Impl::Layer l;
    l.cout = wt.dim(0);
    l.cin = wt.dim(1);
    l.dout = is3d ? depth - 2 : depth;
    const int ntaps = is3d ? 27 : 9;
    for (int t = 0; t < ntaps; ++t) {
      const int kz = is3d ? t / 9 : 0, ky = (t / 3) % 3, kx = t % 3;
      l.offsets.push_back(kz * m.plane + (ky - 1) * m.wp + (kx - 1));
      RowMat k(l.cout, l.cin);
      for (int co = 0; co < l.cout; ++co)
        for (int ci = 0; ci < l.cin; ++ci) k(co, ci) = wt.values()[(static_cast<std::size_t>(co) * l.cin + ci) * ntaps + t];
      l.taps.push_back(std::move(k));
    }
    l.n = (l.dout - 1) * m.plane + static_cast<long>(m.h - 1) * m.wp + m.w;
    depth = l.dout;

    const RowMat& in = li == 0 ? m.input : m.layers.back().a;
    l.z = RowMat::Zero(l.cout, m.cols);
    m.conv(l, in, l.z);
    l.a = RowMat::Zero(l.cout, m.cols);
    l.slope = RowMat::Zero(l.cout, m.cols);
    l.zabs = RowMat::Constant(l.cout, m.cols, std::numeric_limits<double>::infinity());
    for (long i = 0; i < m.cols; ++i) {
      const bool in_slab = m.inside(i, l.dout);
      for (int c = 0; c < l.cout; ++c) {
        if (!in_slab) {
          l.z(c, i) = 0.0;
          continue;
        }
        const double z = l.z(c, i) + bt.values()[c];
        l.z(c, i) = z;
        l.a(c, i) = leaky(z);
        l.slope(c, i) = z > 0 ? 1.0 : kSlope;
        l.zabs(c, i) = std::abs(z);
      }
    }
    m.tensors.push_back({name + ".w", li, false, wt.numel(), m.total});
    m.total += wt.numel();
    m.tensors.push_back({name + ".b", li, true, bt.numel(), m.total});
    m.total += bt.numel();
    m.layers.push_back(std::move(l));
  }
  if (depth != kPriorDepth || m.layers.back().cout != 1) throw ShapeError("prior evaluator: unexpected layer shapes");

  const RowMat& out = m.layers.back().a;
  for (int d = 0; d < kPriorDepth; ++d)
    for (int y = 0; y < m.h; ++y)
      for (int x = 0; x < m.w; ++x) m.guidance.push_back(out(0, m.column(d, y, x)));
}

PriorDeltaEvaluator::~PriorDeltaEvaluator() = default;

std::size_t PriorDeltaEvaluator::value_count() const { return impl_->total; }

std::pair<std::string, std::size_t> PriorDeltaEvaluator::locate(std::size_t i) const {
  for (const auto& t : impl_->tensors)
    if (i >= t.offset && i < t.offset + t.size) return {t.name, i - t.offset};
  throw std::out_of_range("prior value index out of range");
}

const std::vector<double>& PriorDeltaEvaluator::guidance() const { return impl_->guidance; }

std::unique_ptr<PriorDeltaEvaluator::Scratch, void (*)(PriorDeltaEvaluator::Scratch*)>
PriorDeltaEvaluator::make_scratch() const {
  auto* s = new Scratch;
  for (const auto& l : impl_->layers) {
    s->dz.push_back(RowMat::Zero(l.cout, impl_->cols));
    s->da.push_back(RowMat::Zero(l.cout, impl_->cols));
  }
  return {s, [](Scratch* p) { delete p; }};
}

PriorDeltaEvaluator::Result PriorDeltaEvaluator::perturb(std::size_t i, double delta, Scratch& s,
                                                         std::vector<double>& dguidance, double min_delta) const {
  const Impl& m = *impl_;
  const auto it = std::find_if(m.tensors.begin(), m.tensors.end(),
                               [&](const Impl::Tensor_& t) { return i >= t.offset && i < t.offset + t.size; });
  if (it == m.tensors.end()) throw std::out_of_range("prior value index out of range");
  const std::size_t j = i - it->offset;
  const int li = it->layer;
  const Impl::Layer& l = m.layers[li];
  Result res{delta, true};

  // da = leaky(z + dz) - leaky(z). Everything before the first kink
  // crossing is linear in delta, so at a crossing the step can be cut to
  // half the distance to the nearest kink by scaling the current difference.
  // Outside the slab slope is zero and |z| infinite, so those columns never
  // count as crossings and come out zero.
  auto activate = [&](const Impl::Layer& layer, int row, int rows, RowMat& dz_full, RowMat& da_full) {
    const auto slope = layer.slope.block(row, m.margin, rows, layer.n);
    const auto zabs = layer.zabs.block(row, m.margin, rows, layer.n);
    const auto z = layer.z.block(row, m.margin, rows, layer.n);
    auto dz = dz_full.middleCols(m.margin, layer.n);
    auto da = da_full.middleCols(m.margin, layer.n);
    auto d = dz.array();
    if ((d.abs() >= zabs.array()).any()) {
      const double r = (zabs.array() / d.abs()).minCoeff();
      if (r > 0.0 && std::abs(res.delta) * 0.5 * r >= min_delta) {
        d *= 0.5 * r;
        res.delta *= 0.5 * r;
      } else {
        for (Eigen::Index c = 0; c < dz.rows(); ++c)
          for (Eigen::Index k = 0; k < dz.cols(); ++k) {
            const double dk = dz(c, k);
            if (slope(c, k) == 0.0 || dk == 0.0) {
              da(c, k) = 0.0;
            } else if (zabs(c, k) > std::abs(dk)) {
              da(c, k) = slope(c, k) * dk;
            } else {
              da(c, k) = leaky(z(c, k) + dk) - leaky(z(c, k));
              res.linear = false;
            }
          }
        return;
      }
    }
    da.array() = slope.array() * d;
  };

  // The perturbed layer changes in a single output channel.
  int c = 0;
  s.row_dz.setZero(1, m.cols);
  if (it->bias) {
    c = static_cast<int>(j);
    s.row_dz.middleCols(m.margin, l.n).setConstant(delta);
  } else {
    const std::size_t ntaps = l.taps.size();
    c = static_cast<int>(j / (l.cin * ntaps));
    const int ci = static_cast<int>((j / ntaps) % l.cin);
    const std::size_t t = j % ntaps;
    const RowMat& in = li == 0 ? m.input : m.layers[li - 1].a;
    s.row_dz.middleCols(m.margin, l.n) = delta * in.row(ci).segment(m.margin + l.offsets[t], l.n);
  }
  s.row_da.setZero(1, m.cols);
  activate(l, c, 1, s.row_dz, s.row_da);

  const RowMat* prev = &s.row_da;
  if (li + 1 < static_cast<int>(m.layers.size())) {
    const Impl::Layer& nl = m.layers[li + 1];
    RowMat& dz = s.dz[li + 1];
    dz.middleCols(m.margin, nl.n).setZero();
    for (std::size_t t = 0; t < nl.taps.size(); ++t)
      dz.middleCols(m.margin, nl.n).noalias() += nl.taps[t].col(c) * s.row_da.middleCols(m.margin + nl.offsets[t], nl.n);
    activate(nl, 0, nl.cout, dz, s.da[li + 1]);
    prev = &s.da[li + 1];
    for (int k = li + 2; k < static_cast<int>(m.layers.size()); ++k) {
      const Impl::Layer& kl = m.layers[k];
      m.conv(kl, *prev, s.dz[k]);
      activate(kl, 0, kl.cout, s.dz[k], s.da[k]);
      prev = &s.da[k];
    }
  }

  dguidance.resize(static_cast<std::size_t>(kPriorDepth) * m.h * m.w);
  std::size_t o = 0;
  for (int d = 0; d < kPriorDepth; ++d)
    for (int y = 0; y < m.h; ++y)
      for (int x = 0; x < m.w; ++x) dguidance[o++] = (*prev)(0, m.column(d, y, x));
  return res;
}

namespace {

// Valid 3x3x3 cross-correlation of one channel [d, h, w] -> [d-2, h-2, w-2].
void conv3_valid(const std::vector<double>& in, int d, int h, int w, const double* k, double b, std::vector<double>& out) {
  const int od = d - 2, oh = h - 2, ow = w - 2;
  out.assign(static_cast<std::size_t>(od) * oh * ow, b);
  for (int z = 0; z < od; ++z)
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int y = 0; y < oh; ++y) {
          const double* src = &in[(static_cast<std::size_t>(z + kz) * h + y + ky) * w];
          double* dst = &out[(static_cast<std::size_t>(z) * oh + y) * ow];
          const double k0 = k[(kz * 3 + ky) * 3], k1 = k[(kz * 3 + ky) * 3 + 1], k2 = k[(kz * 3 + ky) * 3 + 2];
          for (int x = 0; x < ow; ++x) dst[x] += k0 * src[x] + k1 * src[x + 1] + k2 * src[x + 2];
        }
}

void relu_inplace(std::vector<double>& v) {
  for (double& x : v) x = std::max(x, 0.0);
}

std::vector<double> plane_of(const Tensor<double>& t, int k) {
  const std::size_t n = static_cast<std::size_t>(t.dim(1)) * t.dim(2);
  return std::vector<double>(t.values().begin() + k * n, t.values().begin() + (k + 1) * n);
}

}  // namespace

BlockTailEvaluator::BlockTailEvaluator(const Tensor<double>& slab, const Tensor<double>& ref,
                                       const ParamSet<double>& params)
    : h_(slab.dim(1)), w_(slab.dim(2)) {
  if (ref.shape() != Shape{kPriorDepth, h_, w_}) throw ShapeError("tail evaluator: reference must be [7, h, w]");
  center_ = plane_of(slab, kCenterSlice);
  const int H = h_ + 2, W = w_ + 2;
  stack_.assign(3 * static_cast<std::size_t>(H) * W, 0.0);
  for (int d : {0, 2}) {
    const auto src = plane_of(slab, kCenterSlice - 1 + d);
    for (int y = 0; y < h_; ++y)
      std::copy_n(&src[static_cast<std::size_t>(y) * w_], w_, &stack_[(static_cast<std::size_t>(d) * H + y + 1) * W + 1]);
  }
  for (int t = 0; t < 27; ++t) taps_[t] = (t / 9) * H * W + ((t / 3) % 3) * W + t % 3;
  ref_.assign(ref.values().begin(), ref.values().end());
  ref_center_ = plane_of(ref, kPriorDepth / 2);

  const auto dist = distance_matrix<double>();
  const std::vector<double> dv(dist.values().begin(), dist.values().end());
  for (int k = 0; k < kNumBlocks; ++k) {
    const std::string p = block_prefix(k + 1);
    for (int net = 0; net < 2; ++net) {
      const std::string n = p + (net == 0 ? ".f" : ".g");
      for (int layer = 0; layer < 2; ++layer) {
        const std::string ln = n + (layer == 0 ? ".l1" : ".l2");
        const auto wv = params.at(ln + ".w").values();
        if (net == 0) {
          std::copy(wv.begin(), wv.end(), f_w_[k][layer]);
          f_b_[k][layer] = params.at(ln + ".b").item();
        }
      }
    }
    std::vector<double> g1, g2;
    conv3_valid(dv, 7, 7, 7, params.at(p + ".g.l1.w").data(), params.at(p + ".g.l1.b").item(), g1);
    relu_inplace(g1);
    conv3_valid(g1, 5, 5, 5, params.at(p + ".g.l2.w").data(), params.at(p + ".g.l2.b").item(), g2);
    relu_inplace(g2);
    std::copy(g2.begin(), g2.end(), domain_[k]);
    const auto mw = params.at(p + ".mix.w").values();
    std::copy(mw.begin(), mw.end(), mix_w_[k]);
    mix_b_[k] = params.at(p + ".mix.b").item();
  }
}

void BlockTailEvaluator::learned_ranges(const double* guidance, std::vector<double>& out) const {
  const int H = h_ + 6, W = w_ + 6;
  std::vector<double> padded(static_cast<std::size_t>(kPriorDepth) * H * W, 0.0);
  for (int d = 0; d < kPriorDepth; ++d)
    for (int y = 0; y < h_; ++y)
      for (int x = 0; x < w_; ++x)
        padded[(static_cast<std::size_t>(d) * H + y + 3) * W + x + 3] = guidance[(static_cast<std::size_t>(d) * h_ + y) * w_ + x];
  const std::size_t per = 3 * static_cast<std::size_t>(h_ + 2) * (w_ + 2);
  out.resize(kNumBlocks * per);
  std::vector<double> l1, l2;
  for (int k = 0; k < kNumBlocks; ++k) {
    conv3_valid(padded, kPriorDepth, H, W, f_w_[k][0], f_b_[k][0], l1);
    relu_inplace(l1);
    conv3_valid(l1, 5, H - 2, W - 2, f_w_[k][1], f_b_[k][1], l2);
    relu_inplace(l2);
    std::copy(l2.begin(), l2.end(), out.begin() + k * per);
  }
}

// Window weights domain * range for every pixel and tap, and their sums.
void BlockTailEvaluator::window_weights(const double* range, const double* domain, bool difference, double gamma,
                                        Weights& out) const {
  const int h = h_, w = w_, W = w + 2;
  const std::size_t pixels = static_cast<std::size_t>(h) * w;
  out.kw.resize(pixels * 27);
  out.sw.resize(pixels);
  Eigen::Map<Eigen::ArrayXd> rw(out.kw.data(), static_cast<Eigen::Index>(out.kw.size()));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double* r = range + y * W + x;
      const double rc = r[taps_[13]];
      double* dst = &out.kw[(static_cast<std::size_t>(y) * w + x) * 27];
      for (int t = 0; t < 27; ++t) dst[t] = difference ? -gamma * (rc - r[taps_[t]]) * (rc - r[taps_[t]]) : r[taps_[t]];
    }
  if (difference) rw = rw.exp();
  for (std::size_t p = 0; p < pixels; ++p) {
    double* kw = &out.kw[p * 27];
    double sw = 0;
    for (int t = 0; t < 27; ++t) {
      kw[t] *= domain[t];
      sw += kw[t];
    }
    out.sw[p] = sw;
  }
}

void BlockTailEvaluator::prepare(const double* guidance, const ModelConfig& kernels, Side& side) const {
  const int h = h_, w = w_, H = h + 2, W = w + 2;
  side.guidance.assign(guidance, guidance + ref_.size());
  side.range_scale = kernels.range_scale;
  side.sigma_s = kernels.sigma_s;
  side.sigma_r_hu = kernels.sigma_r_hu;
  std::vector<double> ranges;
  learned_ranges(guidance, ranges);
  const std::size_t per = 3 * static_cast<std::size_t>(H) * W;
  for (int k = 0; k < kNumBlocks; ++k) {
    window_weights(ranges.data() + k * per, domain_[k], false, 0.0, side.response[k]);
    window_weights(ranges.data() + k * per, domain_[k], true, kernels.range_scale, side.difference[k]);
  }
  // Classic kernels on the middle three guidance slices.
  std::vector<double> fixed(per, 0.0);
  for (int d = 0; d < 3; ++d)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        fixed[(static_cast<std::size_t>(d) * H + y + 1) * W + x + 1] = guidance[(static_cast<std::size_t>(d + 2) * h + y) * w + x];
  const auto gauss = gaussian_domain_kernel<double>(kernels.sigma_s);
  const double sr = kernels.sigma_r_hu / (kHuMax - kHuMin);
  window_weights(fixed.data(), gauss.data(), true, 1.0 / (2.0 * sr * sr), side.gaussian);
}

void BlockTailEvaluator::block_outputs(const Side& side, const ModelConfig& config,
                                       std::array<std::vector<double>, kNumBlocks>& outputs) const {
  if (config.range_scale != side.range_scale || config.sigma_s != side.sigma_s || config.sigma_r_hu != side.sigma_r_hu)
    throw std::invalid_argument("tail evaluator: kernel settings differ from the prepared ones");
  const int h = h_, w = w_, W = w + 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  thread_local std::vector<double> stack, f, nm, z;
  stack = stack_;
  f.resize(plane);
  nm.assign(static_cast<std::size_t>(h + 2) * W, 0.0);
  z.resize(plane);
  double* mid = stack.data() + static_cast<std::size_t>(h + 2) * W;
  const std::vector<double>* center = &center_;
  for (int k = 0; k < kNumBlocks; ++k) {
    const Weights& wt = config.gaussian_kernels                       ? side.gaussian
                        : config.range_mode == RangeMode::Difference ? side.difference[k]
                                                                      : side.response[k];
    for (int y = 0; y < h; ++y) std::copy_n(&(*center)[static_cast<std::size_t>(y) * w], w, mid + (y + 1) * W + 1);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        const double* kw = &wt.kw[p * 27];
        const double* in = stack.data() + y * W + x;
        double num = 0;
        for (int t = 0; t < 27; ++t) num += in[taps_[t]] * kw[t];
        f[p] = std::max(0.0, num / (wt.sw[p] + config.eps));
      }
    std::vector<double>& out = outputs[k];
    out.resize(plane);
    if (config.mix_mode == MixMode::Off) {
      std::copy(f.begin(), f.end(), out.begin());
    } else {
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) nm[(y + 1) * W + x + 1] = (*center)[y * w + x] - f[y * w + x];
      if (config.mix_mode == MixMode::Pixelwise) {
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            double s = mix_b_[k];
            const double* q = &nm[y * W + x];
            for (int a = 0; a < 3; ++a)
              for (int b = 0; b < 3; ++b) s += mix_w_[k][a * 3 + b] * q[a * W + b];
            z[y * w + x] = -s;
          }
        Eigen::Map<Eigen::ArrayXd> za(z.data(), static_cast<Eigen::Index>(plane));
        za = 1.0 / (1.0 + za.exp());
      } else {
        std::fill(z.begin(), z.end(), 1.0 / (1.0 + std::exp(-mix_b_[k])));
      }
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const std::size_t i = static_cast<std::size_t>(y) * w + x;
          out[i] = f[i] + nm[(y + 1) * W + x + 1] * z[i];
        }
    }
    center = &out;
  }
}

// MSE plus weighted edge term, in bilinear form: with u = a - b and
// v = a + b - 2 ref this is term(a) - term(b), and with u = v = a - ref it is
// term(a) itself.
double BlockTailEvaluator::pair_term(const std::vector<double>& u, const std::vector<double>& v) const {
  const int h = h_, w = w_;
  double mse = 0;
  for (std::size_t i = 0; i < u.size(); ++i) mse += u[i] * v[i];
  mse /= static_cast<double>(u.size());
  // Sobel of [ref below, pred, ref above] minus Sobel of the reference stack
  // is the Sobel of [0, pred - ref, 0]: only center-slice taps survive and
  // the depth-derivative component vanishes.
  const double smooth[3] = {1, 2, 1}, deriv[3] = {-1, 0, 1};
  auto grads = [&](const std::vector<double>& e, int y, int x, double& gy, double& gx) {
    gy = gx = 0;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        const double q = e[static_cast<std::size_t>(y + a) * w + x + b];
        gy += 2 * deriv[a] * smooth[b] * q;
        gx += 2 * smooth[a] * deriv[b] * q;
      }
  };
  double edge = 0;
  for (int y = 0; y + 2 < h; ++y)
    for (int x = 0; x + 2 < w; ++x) {
      double uy, ux, vy, vx;
      grads(u, y, x, uy, ux);
      grads(v, y, x, vy, vx);
      edge += uy * vy + ux * vx;
    }
  edge /= 3.0 * (h - 2) * (w - 2);
  return mse + kEdgeWeight * edge;
}

double BlockTailEvaluator::loss(const Side& side, const ModelConfig& config, const LossWeights& weights) const {
  return combine(side, side, config, weights, false);
}

double BlockTailEvaluator::loss_difference(const Side& plus, const Side& minus, const ModelConfig& config,
                                           const LossWeights& weights) const {
  return combine(plus, minus, config, weights, true);
}

double BlockTailEvaluator::combine(const Side& p, const Side& m, const ModelConfig& config, const LossWeights& weights,
                                   bool difference) const {
  const std::size_t plane = ref_center_.size();
  const double* gp = p.guidance.data();
  const double* gm = m.guidance.data();
  double prior_term = 0;
  if (weights.lambda2 != 0) {
    for (std::size_t i = 0; i < ref_.size(); ++i)
      prior_term += difference ? (gp[i] - gm[i]) * (gp[i] + gm[i] - 2 * ref_[i]) : (gp[i] - ref_[i]) * (gp[i] - ref_[i]);
    prior_term /= static_cast<double>(ref_.size());
  }
  if (weights.lambda1 == 0 && weights.lambda3 == 0) return weights.lambda2 * prior_term;

  thread_local std::array<std::vector<double>, kNumBlocks> op, om;
  thread_local std::vector<double> u, v;
  u.resize(plane);
  v.resize(plane);
  block_outputs(p, config, op);
  if (difference) block_outputs(m, config, om);
  auto term = [&](int k) {
    for (std::size_t i = 0; i < plane; ++i) {
      if (difference) {
        u[i] = op[k][i] - om[k][i];
        v[i] = op[k][i] + om[k][i] - 2 * ref_center_[i];
      } else {
        u[i] = v[i] = op[k][i] - ref_center_[i];
      }
    }
    return pair_term(u, v);
  };
  // Same accumulation order as the composite loss.
  double total = 0;
  if (weights.lambda1 != 0) total += weights.lambda1 * term(kNumBlocks - 1);
  total += weights.lambda2 * prior_term;
  if (weights.lambda3 != 0)
    for (int k = 0; k + 1 < kNumBlocks; ++k) total += weights.lambda3 * term(k);
  return total;
}

std::vector<ModelCheckCase> standard_check_cases() {
  std::vector<ModelCheckCase> cases;
  cases.push_back({"pretrain", ModelConfig{}, true});
  for (Ablation a : {Ablation::None, Ablation::FrozenPrior, Ablation::NoPretrain, Ablation::NoNm, Ablation::SingleNm,
                     Ablation::Gaussian}) {
    for (RangeMode m : {RangeMode::Response, RangeMode::Difference}) {
      ModelConfig c;
      c.range_mode = m;
      cases.push_back({to_string(a) + "/" + to_string(m), apply_ablation(c, a), false});
    }
  }
  return cases;
}

ParamSet<double> check_params(std::uint64_t seed) {
  ParamSet<double> p = init_model(seed).cast<double>();
  std::mt19937_64 rng(mix_seed(seed ^ 0x6a6974746572ULL));
  std::uniform_real_distribution<double> jitter(-1e-3, 1e-3);
  for (auto& e : p.entries())
    for (double& v : e.tensor.values()) v += jitter(rng);
  return p;
}

void make_check_inputs(std::uint64_t seed, int size, Tensor<double>& slab, Tensor<double>& ref) {
  if (size < 16) throw std::invalid_argument("gradient check slab must be at least 16 wide");
  PhantomSpec spec;
  spec.seed = seed;
  spec.nx = spec.ny = std::max(32, size + 16);
  spec.nz = 16;
  const Volume clean = generate_phantom(spec);
  const Volume noisy = simulate_low_dose(clean, 0.25, mix_seed(seed));
  const int x0 = (spec.nx - size) / 2, y0 = (spec.ny - size) / 2, z = spec.nz / 2;
  const Tensor<float> noisy_slab = extract_slab(noisy, z, x0, y0, size, size);
  const Tensor<float> clean_slab = extract_slab(clean, z, x0, y0, size, size);
  slab = Tensor<double>(noisy_slab.shape(), std::vector<double>(noisy_slab.values().begin(), noisy_slab.values().end()));
  const std::vector<double> full(clean_slab.values().begin(), clean_slab.values().end());
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  const int first = kCenterSlice - kPriorDepth / 2;
  ref = Tensor<double>({kPriorDepth, size, size}, std::vector<double>(full.begin() + first * plane,
                                                                       full.begin() + (first + kPriorDepth) * plane));
}


namespace {

struct Tail {
  ModelConfig config;
  LossWeights weights;
  bool operator==(const Tail&) const = default;
};

// Settings that change the schedule or the trainable set but not the loss
// are reset so equal losses share one tail.
Tail canonical_tail(ModelConfig c, const LossWeights& w) {
  c.pretrain = true;
  c.freeze_prior = false;
  if (c.gaussian_kernels) c.range_mode = RangeMode::Difference;
  if (w.lambda1 == 0 && w.lambda3 == 0) {
    const ModelConfig d;
    c.range_mode = d.range_mode;
    c.mix_mode = d.mix_mode;
    c.gaussian_kernels = d.gaussian_kernels;
    c.eps = d.eps;
  }
  return {c, w};
}

struct Fd {
  double numeric = 0.0, err = INFINITY, step = 0.0;
};

}  // namespace

std::vector<ModelCheckResult> model_grad_check(const std::vector<ModelCheckCase>& cases,
                                               const ModelGradCheckOptions& options) {
  if (options.prior_stride == 0) throw std::invalid_argument("prior stride must be positive");
  Tensor<double> slab, ref;
  make_check_inputs(options.seed, options.size, slab, ref);
  const ParamSet<float> base_float = init_model(options.seed);
  const ParamSet<double> base = check_params(options.seed);

  const PriorDeltaEvaluator prior(slab, base);
  const BlockTailEvaluator tail(slab, ref, base);
  const std::vector<double>& guidance = prior.guidance();
  const Tensor<double> guidance_t({kPriorDepth, options.size, options.size}, guidance);

  auto tape_loss = [&](const ParamSet<double>& p, const Tail& t) {
    Tape<double> tape(false);
    return composite_loss(tape, forward(tape, slab, p, t.config), ref, t.weights).item();
  };

  std::vector<ModelCheckResult> results(cases.size());
  std::vector<Tail> tails;
  std::vector<std::size_t> case_tail(cases.size());
  std::vector<std::vector<double>> analytic(cases.size());  // prior gradients, empty when the prior is frozen
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const ModelCheckCase& mc = cases[c];
    const Phase phase = mc.pretrain ? Phase::Pretrain : Phase::Joint;
    const Tail t{mc.config, phase_weights(phase)};
    ModelCheckResult& r = results[c];
    r.label = mc.label;

    ParamSet<float> flags = base_float.clone();
    set_trainable(flags, mc.config, phase);
    ParamSet<double> params = base.clone();
    for (auto& e : params.entries()) e.tensor.set_requires_grad(flags.at(e.name).requires_grad());

    // Block parameters: the generic check with the prior output held fixed.
    ParamSet<double> blocks = params.clone();
    bool prior_trainable = false;
    for (auto& e : blocks.entries()) {
      if (e.name.rfind("prior.", 0) == 0) {
        prior_trainable = prior_trainable || e.tensor.requires_grad();
        e.tensor.set_requires_grad(false);
      }
    }
    GradCheckOptions go;
    go.step = options.step;
    go.tol = options.tol;
    go.abs_floor = options.abs_floor;
    go.refinements = options.refinements;
    go.keep_worst = options.keep_worst;
    r.report = grad_check(
        [&](Tape<double>& tape, ParamSet<double>& p) {
          ForwardOutputs<double> out;
          out.guidance = guidance_t;
          out.filtered = forward_blocks(tape, slab, guidance_t, p, t.config);
          return composite_loss(tape, out, ref, t.weights);
        },
        blocks, go);
    r.report.label = mc.label;
    r.block_checked = r.report.checked;
    if (!prior_trainable) continue;

    {
      Tape<double> tape;
      const Tensor<double> loss = composite_loss(tape, forward(tape, slab, params, t.config), ref, t.weights);
      tape.backward(loss);
    }
    auto& a = analytic[c];
    a.assign(prior.value_count(), 0.0);
    std::size_t off = 0;
    for (const auto& e : params.entries()) {
      if (e.name.rfind("prior.", 0) != 0) continue;
      if (e.tensor.has_grad()) std::copy(e.tensor.grad().begin(), e.tensor.grad().end(), a.begin() + off);
      off += e.tensor.numel();
    }
    const Tail ct = canonical_tail(t.config, t.weights);
    auto it = std::find(tails.begin(), tails.end(), ct);
    case_tail[c] = static_cast<std::size_t>(it - tails.begin());
    if (it == tails.end()) tails.push_back(ct);
    if (ct.config.range_scale != tails[0].config.range_scale || ct.config.sigma_s != tails[0].config.sigma_s ||
        ct.config.sigma_r_hu != tails[0].config.sigma_r_hu)
      throw std::invalid_argument("gradient check cases must share kernel settings");

    // The fast tail must reproduce the tape loss at the base point.
    BlockTailEvaluator::Side side;
    tail.prepare(guidance.data(), ct.config, side);
    r.cross_check = relative_error(tape_loss(base, t), tail.loss(side, ct.config, ct.weights), 1e-12);
  }
  if (tails.empty()) return results;

  std::vector<std::size_t> indices;
  for (std::size_t i = 0; i < prior.value_count(); i += options.prior_stride) indices.push_back(i);

  // fd[k * cases + c]: best finite difference of value indices[k] under case c.
  std::vector<Fd> fd(indices.size() * cases.size());
  // First-attempt step and loss differences, for the tape spot checks.
  std::vector<double> first_step(indices.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(thread_count(), indices.size()));
  parallel_for(workers, [&](std::size_t wk) {
    auto scratch = prior.make_scratch();
    std::vector<double> dplus, dminus, first_change, g(guidance.size());
    BlockTailEvaluator::Side plus, minus;
    for (std::size_t k = wk; k < indices.size(); k += workers) {
      const std::size_t i = indices[k];
      std::vector<bool> open(cases.size());
      for (std::size_t c = 0; c < cases.size(); ++c) open[c] = !analytic[c].empty();
      double step = options.step;
      PriorDeltaEvaluator::Result first{0.0, false};
      for (int attempt = 0; attempt <= options.refinements; ++attempt, step /= 10.0) {
        PriorDeltaEvaluator::Result res;
        if (attempt > 0 && first.linear) {
          // Between kinks the prior output is affine in the value, so the
          // first change is an exact direction. Stepping the tail along it
          // by step*10 keeps the guidance change well above rounding when
          // kinks forced a tiny prior step.
          const double scale = step * 10.0 / first.delta;
          for (std::size_t q = 0; q < dplus.size(); ++q) {
            dplus[q] = first_change[q] * scale;
            dminus[q] = -dplus[q];
          }
          res = {step * 10.0, true};
        } else {
          // Cut steps stay within four decades of the nominal one.
          res = prior.perturb(i, step, *scratch, dplus, step * 1e-4);
          if (res.linear) {
            dminus.resize(dplus.size());
            for (std::size_t q = 0; q < dplus.size(); ++q) dminus[q] = -dplus[q];
          } else {
            prior.perturb(i, -res.delta, *scratch, dminus, res.delta);
          }
        }
        if (attempt == 0) {
          first = res;
          first_step[k] = res.delta;
          first_change = dplus;
        }
        for (std::size_t q = 0; q < g.size(); ++q) g[q] = guidance[q] + dplus[q];
        tail.prepare(g.data(), tails[0].config, plus);
        for (std::size_t q = 0; q < g.size(); ++q) g[q] = guidance[q] + dminus[q];
        tail.prepare(g.data(), tails[0].config, minus);
        std::vector<double> numeric(tails.size(), NAN);
        bool any_open = false;
        for (std::size_t c = 0; c < cases.size(); ++c) {
          if (!open[c]) continue;
          const std::size_t t = case_tail[c];
          if (std::isnan(numeric[t]))
            numeric[t] = tail.loss_difference(plus, minus, tails[t].config, tails[t].weights) / (2.0 * res.delta);
          Fd& f = fd[k * cases.size() + c];
          const double err = relative_error(analytic[c][i], numeric[t], options.abs_floor);
          if (err < f.err) f = Fd{numeric[t], err, res.delta};
          // Retry until the value clears tol by a decade, so that rounding
          // noise near tol does not decide the outcome.
          open[c] = err >= 0.1 * options.tol;
          any_open = any_open || open[c];
        }
        if (!any_open) break;
      }
    }
  });

  for (std::size_t c = 0; c < cases.size(); ++c) {
    if (analytic[c].empty()) continue;
    ModelCheckResult& r = results[c];
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const Fd& f = fd[k * cases.size() + c];
      auto [name, index] = prior.locate(indices[k]);
      note_entry(r.report, GradCheckEntry{name, index, analytic[c][indices[k]], f.numeric, f.err, f.step},
                 options.keep_worst);
      ++r.prior_checked;
    }
    // Spot checks: the first-attempt difference recomputed through the
    // full model on a non-recording tape, same step.
    const std::size_t spots = std::min(options.spot_checks, indices.size());
    const Tail& t = tails[case_tail[c]];
    for (std::size_t s = 0; s < spots; ++s) {
      const std::size_t k = spots == 1 ? 0 : s * (indices.size() - 1) / (spots - 1);
      auto [name, index] = prior.locate(indices[k]);
      const double step = first_step[k];
      auto scratch = prior.make_scratch();
      std::vector<double> dplus, dminus, g(guidance.size());
      const auto res = prior.perturb(indices[k], step, *scratch, dplus, step);
      if (res.linear) {
        dminus = dplus;
        for (double& q : dminus) q = -q;
      } else {
        prior.perturb(indices[k], -step, *scratch, dminus, step);
      }
      BlockTailEvaluator::Side plus, minus;
      for (std::size_t q = 0; q < g.size(); ++q) g[q] = guidance[q] + dplus[q];
      tail.prepare(g.data(), t.config, plus);
      for (std::size_t q = 0; q < g.size(); ++q) g[q] = guidance[q] + dminus[q];
      tail.prepare(g.data(), t.config, minus);
      const double fast = tail.loss_difference(plus, minus, t.config, t.weights) / (2.0 * step);

      ParamSet<double> p = base.clone();
      double& v = p.at(name).values()[index];
      const double original = v;
      v = original + step;
      const double lp = tape_loss(p, t);
      v = original - step;
      const double lm = tape_loss(p, t);
      r.cross_check = std::max(r.cross_check, relative_error(fast, (lp - lm) / (2.0 * step), options.abs_floor));
    }
  }
  return results;
}

}  // namespace jbf
