#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "jbf/losses.hpp"
#include "jbf/model.hpp"
#include "jbf/volume.hpp"
#include "jbf/volume_io.hpp"

namespace jbf {

enum class OptimizerKind { Adam, Sgd };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct TrainConfig {
  int epochs = 30;
  int pretrain_epochs = 10;
  int batch = 32;
  int slabs_per_epoch = 200;
  int slab_size = 64;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  Ablation ablation = Ablation::None;
  ModelConfig model;  // ablation is applied on top of this
  /// Save a checkpoint every N completed epochs (0 = only at the end).
  int checkpoint_every = 0;

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  ModelConfig effective_model() const { return apply_ablation(model, ablation); }
};

/// A reference volume with one noisy realization per dose level.
struct TrainingVolume {
  std::string name;
  Volume reference;
  std::vector<Volume> noisy;  // parallel to Dataset::doses
};

struct Dataset {
  std::vector<double> doses;
  std::vector<TrainingVolume> volumes;
};

/// Dose tag used in file names: shortest decimal form, e.g. "0.25".
std::string dose_tag(double dose);

/// Reads NAME.ref.jbfvol plus NAME.dose<tag>.jbfvol for every dose from
/// `dir`, sorted by name. Missing noisy files are an error.
Dataset load_dataset(const std::filesystem::path& dir, const std::vector<double>& doses);

struct SlabSite {
  int volume = 0;
  int dose = 0;  // index into Dataset::doses
  int x = 0, y = 0, z = 0;  // corner; z is the first of the 15 slices
};

/// Uniform positions fully inside each volume and uniform dose levels.
/// Deterministic in `seed`.
std::vector<SlabSite> sample_sites(const Dataset& data, int count, std::uint64_t seed, int slab_size);

struct TrainingSlab {
  Tensor<float> noisy;      // [15, n, n], normalized
  Tensor<float> reference;  // [7, n, n], the central reference slices
  SlabSite site;
};

TrainingSlab make_slab(const Dataset& data, const SlabSite& site, int slab_size);
std::vector<TrainingSlab> sample_slabs(const Dataset& data, int count, std::uint64_t seed, int slab_size);

/// First and second moments per parameter plus the shared step count.
struct AdamState {
  ParamSet<float> m, v;
  std::int64_t step = 0;

  /// Zero moments shaped like `params`.
  static AdamState zeros_like(const ParamSet<float>& params);
};

/// p <- p - lr * g for every tensor with requires_grad set. `grads` holds
/// gradients under the same names as `params`.
void sgd_step(ParamSet<float>& params, const ParamSet<float>& grads, double lr);

/// Bias-corrected Adam over every tensor with requires_grad set. Frozen
/// tensors keep their values and moments; the step count advances once.
void adam_step(ParamSet<float>& params, const ParamSet<float>& grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

enum class Phase { Pretrain = 1, Joint = 2 };

/// Phase of epoch e (0-based) under `config`.
Phase epoch_phase(const TrainConfig& config, int epoch);
LossWeights phase_weights(Phase phase);

/// Sets requires_grad on exactly the tensors that train in `phase`.
void set_trainable(ParamSet<float>& params, const ModelConfig& model, Phase phase);

struct LossRecord {
  int epoch = 0;
  int batch = 0;
  int phase = 1;
  double loss = 0.0;
};

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history);

struct TrainState {
  ParamSet<float> params;
  AdamState adam;
  int epoch = 0;  // completed epochs
  std::vector<LossRecord> history;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fresh state: model initialized from config.seed.
TrainState initial_state(const TrainConfig& config);

/// Runs epochs state.epoch .. config.epochs - 1. `on_checkpoint` is called
/// after every checkpoint_every-th epoch and after the last one. A
/// non-finite loss throws TrainingError naming epoch and batch.
void train(const TrainConfig& config, const Dataset& data, TrainState& state,
           const std::function<void(const TrainState&)>& on_checkpoint = {});

/// Loss of one slab on `tape`, with gradients if the tape records.
Tensor<float> slab_loss(Tape<float>& tape, const TrainingSlab& slab, const ParamSet<float>& params,
                        const ModelConfig& model, const LossWeights& weights);

/// Parameters, Adam moments, and metadata (model modes, epoch, optimizer).
Checkpoint make_checkpoint(const TrainState& state, const TrainConfig& config);

/// Inverse of make_checkpoint. The model config stored in the checkpoint
/// must equal config.effective_model().
TrainState resume_state(const Checkpoint& ckpt, const TrainConfig& config);

/// Parameters and model config for inference.
ParamSet<float> load_model(const Checkpoint& ckpt, ModelConfig* config);

}  // namespace jbf
