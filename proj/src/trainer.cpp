#include "jbf/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "jbf/parallel.hpp"
#include "jbf/phantom.hpp"

namespace jbf {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::Sgd;
  throw std::invalid_argument("unknown optimizer: " + s);
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
  if (epochs < 0) fail("epochs must be nonnegative");
  if (pretrain_epochs < 0 || pretrain_epochs > epochs) fail("pretrain epochs must lie in 0..epochs");
  if (batch < 1) fail("batch must be at least 1");
  if (slabs_per_epoch < 1) fail("slabs per epoch must be at least 1");
  if (slab_size < 16) fail("slab size must be at least 16");
  if (!(lr > 0) || !std::isfinite(lr)) fail("learning rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) fail("Adam eps must be positive");
  if (checkpoint_every < 0) fail("checkpoint cadence must be nonnegative");
}

std::string dose_tag(double dose) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, dose);
  return std::string(buf, res.ptr);
}

Dataset load_dataset(const std::filesystem::path& dir, const std::vector<double>& doses) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("data directory not found: " + dir.string());
  if (doses.empty()) throw std::invalid_argument("at least one dose level is required");
  const std::string suffix = ".ref.jbfvol";
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string f = entry.path().filename().string();
    if (f.size() > suffix.size() && f.ends_with(suffix)) names.push_back(f.substr(0, f.size() - suffix.size()));
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw IoError("no *.ref.jbfvol volumes in " + dir.string());

  Dataset data;
  data.doses = doses;
  for (const auto& name : names) {
    TrainingVolume tv{name, read_volume(dir / (name + suffix)), {}};
    for (double d : doses) {
      const fs::path p = dir / (name + ".dose" + dose_tag(d) + ".jbfvol");
      if (!fs::exists(p)) throw IoError("missing noisy volume " + p.string());
      tv.noisy.push_back(read_volume(p));
      if (!tv.noisy.back().same_extents(tv.reference)) throw ShapeError(p.string() + ": extents differ from reference");
    }
    data.volumes.push_back(std::move(tv));
  }
  return data;
}

std::vector<SlabSite> sample_sites(const Dataset& data, int count, std::uint64_t seed, int n) {
  if (data.volumes.empty()) throw std::invalid_argument("dataset is empty");
  if (data.doses.empty()) throw std::invalid_argument("dataset has no dose levels");
  for (const auto& v : data.volumes) {
    if (v.reference.nx < n || v.reference.ny < n || v.reference.nz < kSlabDepth) {
      throw ShapeError("volume " + v.name + " is smaller than a " + std::to_string(n) + "x" + std::to_string(n) +
                       "x15 slab");
    }
    if (v.noisy.size() != data.doses.size()) throw std::invalid_argument("volume " + v.name + " lacks dose levels");
  }
  std::mt19937_64 rng(mix_seed(seed));
  auto pick = [&](int hi) { return std::uniform_int_distribution<int>(0, hi)(rng); };
  std::vector<SlabSite> sites(static_cast<std::size_t>(count));
  for (auto& s : sites) {
    s.volume = pick(static_cast<int>(data.volumes.size()) - 1);
    s.dose = pick(static_cast<int>(data.doses.size()) - 1);
    const Volume& v = data.volumes[s.volume].reference;
    s.x = pick(v.nx - n);
    s.y = pick(v.ny - n);
    s.z = pick(v.nz - kSlabDepth);
  }
  return sites;
}

TrainingSlab make_slab(const Dataset& data, const SlabSite& site, int n) {
  const auto& tv = data.volumes.at(site.volume);
  TrainingSlab slab;
  slab.site = site;
  slab.noisy = extract_slab(tv.noisy.at(site.dose), site.z + kCenterSlice, site.x, site.y, n, n);
  // The seven reference slices centered on slab slice 7.
  const Tensor<float> full = extract_slab(tv.reference, site.z + kCenterSlice, site.x, site.y, n, n);
  const int first = kCenterSlice - kPriorDepth / 2;
  const auto src = full.values();
  const std::size_t plane = static_cast<std::size_t>(n) * n;
  slab.reference = Tensor<float>({kPriorDepth, n, n},
                                 std::vector<float>(src.begin() + first * plane, src.begin() + (first + kPriorDepth) * plane));
  return slab;
}

std::vector<TrainingSlab> sample_slabs(const Dataset& data, int count, std::uint64_t seed, int n) {
  std::vector<TrainingSlab> out;
  for (const auto& s : sample_sites(data, count, seed, n)) out.push_back(make_slab(data, s, n));
  return out;
}

AdamState AdamState::zeros_like(const ParamSet<float>& params) {
  AdamState s;
  for (const auto& e : params.entries()) {
    s.m.add(e.name, Tensor<float>(e.tensor.shape()));
    s.v.add(e.name, Tensor<float>(e.tensor.shape()));
  }
  return s;
}

void sgd_step(ParamSet<float>& params, const ParamSet<float>& grads, double lr) {
  for (auto& e : params.entries()) {
    if (!e.tensor.requires_grad()) continue;
    auto p = e.tensor.values();
    const auto g = grads.at(e.name).values();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(p[i] - lr * g[i]);
  }
}

void adam_step(ParamSet<float>& params, const ParamSet<float>& grads, AdamState& state, double lr, double beta1,
               double beta2, double eps) {
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& e : params.entries()) {
    if (!e.tensor.requires_grad()) continue;
    auto p = e.tensor.values();
    const auto g = grads.at(e.name).values();
    auto m = state.m.at(e.name).values();
    auto v = state.v.at(e.name).values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = static_cast<float>(beta1 * m[i] + (1 - beta1) * g[i]);
      v[i] = static_cast<float>(beta2 * v[i] + (1 - beta2) * double(g[i]) * g[i]);
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      p[i] = static_cast<float>(p[i] - lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

Phase epoch_phase(const TrainConfig& config, int epoch) {
  if (!config.effective_model().pretrain) return Phase::Joint;
  return epoch < config.pretrain_epochs ? Phase::Pretrain : Phase::Joint;
}

LossWeights phase_weights(Phase phase) { return phase == Phase::Pretrain ? kPretrainWeights : kJointWeights; }

void set_trainable(ParamSet<float>& params, const ModelConfig& model, Phase phase) {
  for (auto& e : params.entries()) {
    const bool prior = e.name.starts_with("prior.");
    bool on = false;
    if (phase == Phase::Pretrain) {
      on = prior;
    } else {
      on = param_in_use(e.name, model) && !(prior && model.freeze_prior);
    }
    e.tensor.set_requires_grad(on);
  }
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  out << "epoch,batch,phase,loss\n";
  char buf[64];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%.9g\n", r.epoch, r.batch, r.phase, r.loss);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

TrainState initial_state(const TrainConfig& config) {
  TrainState s;
  s.params = init_model(config.seed);
  s.adam = AdamState::zeros_like(s.params);
  return s;
}

Tensor<float> slab_loss(Tape<float>& tape, const TrainingSlab& slab, const ParamSet<float>& params,
                        const ModelConfig& model, const LossWeights& weights) {
  ForwardOutputs<float> outputs;
  if (weights.lambda1 == 0 && weights.lambda3 == 0) {
    outputs.guidance = prior_forward(tape, slab.noisy, params);
  } else {
    outputs = forward(tape, slab.noisy, params, model);
  }
  return composite_loss(tape, outputs, slab.reference, weights);
}

namespace {

std::string describe(const SlabSite& s, const Dataset& data) {
  return "volume " + data.volumes.at(s.volume).name + " dose " + dose_tag(data.doses.at(s.dose)) + " at (" +
         std::to_string(s.x) + ", " + std::to_string(s.y) + ", " + std::to_string(s.z) + ")";
}

}  // namespace

void train(const TrainConfig& config, const Dataset& data, TrainState& state,
           const std::function<void(const TrainState&)>& on_checkpoint) {
  config.validate();
  if (data.volumes.empty()) throw std::invalid_argument("dataset is empty");
  validate_model_params(state.params);
  const ModelConfig model = config.effective_model();
  const int n = config.slab_size;
  const int workers = std::max(1, std::min(thread_count(), config.batch));

  std::vector<ParamSet<float>> local;
  for (int w = 0; w < workers; ++w) local.push_back(state.params.clone());
  ParamSet<float> grads = state.params.clone();

  for (int epoch = state.epoch; epoch < config.epochs; ++epoch) {
    const Phase phase = epoch_phase(config, epoch);
    const LossWeights weights = phase_weights(phase);
    set_trainable(state.params, model, phase);
    for (auto& p : local) set_trainable(p, model, phase);

    const auto sites = sample_sites(data, config.slabs_per_epoch, mix_seed(config.seed) ^ mix_seed(epoch + 1), n);
    const int batches = (config.slabs_per_epoch + config.batch - 1) / config.batch;
    for (int b = 0; b < batches; ++b) {
      const int first = b * config.batch;
      const int count = std::min(config.batch, config.slabs_per_epoch - first);
      for (auto& p : local) p.assign_values(state.params);

      // Per-slab gradients are kept apart and summed in slab order so the
      // result does not depend on the worker count.
      std::vector<std::vector<float>> slab_grads(count);
      std::vector<double> losses(count);
      parallel_for(static_cast<std::size_t>(workers), [&](std::size_t w) {
        ParamSet<float>& p = local[w];
        for (int i = static_cast<int>(w); i < count; i += workers) {
          const TrainingSlab slab = make_slab(data, sites[first + i], n);
          p.zero_grad();
          Tape<float> tape;
          const Tensor<float> loss = slab_loss(tape, slab, p, model, weights);
          losses[i] = loss.item();
          if (!std::isfinite(losses[i])) continue;
          tape.backward(loss);
          auto& flat = slab_grads[i];
          for (const auto& e : p.entries()) {
            if (!e.tensor.requires_grad()) continue;
            if (e.tensor.has_grad()) {
              flat.insert(flat.end(), e.tensor.grad().begin(), e.tensor.grad().end());
            } else {
              flat.insert(flat.end(), e.tensor.numel(), 0.0f);
            }
          }
        }
      });
      for (int i = 0; i < count; ++i) {
        if (!std::isfinite(losses[i])) {
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(b) +
                              " (slab " + std::to_string(i) + ", " + describe(sites[first + i], data) + ")");
        }
      }

      std::size_t offset = 0;
      for (auto& e : grads.entries()) {
        if (!state.params.at(e.name).requires_grad()) continue;
        auto g = e.tensor.values();
        for (std::size_t j = 0; j < g.size(); ++j) {
          double acc = 0;
          for (int i = 0; i < count; ++i) acc += slab_grads[i][offset + j];
          g[j] = static_cast<float>(acc / count);
        }
        offset += g.size();
      }
      double mean = 0;
      for (double l : losses) mean += l;
      mean /= count;

      if (config.optimizer == OptimizerKind::Adam) {
        adam_step(state.params, grads, state.adam, config.lr, config.beta1, config.beta2, config.adam_eps);
      } else {
        sgd_step(state.params, grads, config.lr);
      }
      state.history.push_back({epoch, b, static_cast<int>(phase), mean});
    }
    state.epoch = epoch + 1;
    const bool cadence = config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0;
    if (on_checkpoint && (cadence || state.epoch == config.epochs)) on_checkpoint(state);
  }
}

Checkpoint make_checkpoint(const TrainState& state, const TrainConfig& config) {
  Checkpoint ckpt;
  ckpt.tensors = state.params.clone();
  for (const auto& e : state.adam.m.entries()) ckpt.tensors.add("adam.m/" + e.name, e.tensor.clone());
  for (const auto& e : state.adam.v.entries()) ckpt.tensors.add("adam.v/" + e.name, e.tensor.clone());
  ckpt.metadata = config_metadata(config.effective_model());
  ckpt.metadata["epoch"] = std::to_string(state.epoch);
  ckpt.metadata["adam_step"] = std::to_string(state.adam.step);
  ckpt.metadata["optimizer"] = to_string(config.optimizer);
  ckpt.metadata["lr"] = dose_tag(config.lr);
  ckpt.metadata["seed"] = std::to_string(config.seed);
  ckpt.metadata["ablation"] = to_string(config.ablation);
  return ckpt;
}

namespace {

long long meta_int(const Checkpoint& ckpt, const std::string& key) {
  auto it = ckpt.metadata.find(key);
  if (it == ckpt.metadata.end()) throw FormatError("checkpoint metadata lacks " + key);
  long long v = 0;
  const auto& s = it->second;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || v < 0) throw FormatError("bad checkpoint metadata " + key);
  return v;
}

}  // namespace

TrainState resume_state(const Checkpoint& ckpt, const TrainConfig& config) {
  if (config_from_metadata(ckpt.metadata) != config.effective_model()) {
    throw std::invalid_argument("checkpoint was trained with different model modes");
  }
  TrainState s = initial_state(config);
  restore_params(ckpt, s.params, "adam.");
  for (auto* part : {&s.adam.m, &s.adam.v}) {
    const std::string prefix = part == &s.adam.m ? "adam.m/" : "adam.v/";
    for (auto& e : part->entries()) {
      if (!ckpt.tensors.contains(prefix + e.name)) throw FormatError("checkpoint is missing tensor: " + prefix + e.name);
      const auto& src = ckpt.tensors.at(prefix + e.name);
      if (src.shape() != e.tensor.shape()) throw FormatError("checkpoint tensor " + prefix + e.name + " has the wrong shape");
      std::copy(src.values().begin(), src.values().end(), e.tensor.values().begin());
    }
  }
  s.epoch = static_cast<int>(meta_int(ckpt, "epoch"));
  s.adam.step = meta_int(ckpt, "adam_step");
  return s;
}

ParamSet<float> load_model(const Checkpoint& ckpt, ModelConfig* config) {
  ParamSet<float> params = init_model(0);
  restore_params(ckpt, params, "adam.");
  if (config) *config = config_from_metadata(ckpt.metadata);
  return params;
}

}  // namespace jbf
