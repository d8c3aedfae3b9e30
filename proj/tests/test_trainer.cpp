#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "jbf/parallel.hpp"
#include "jbf/phantom.hpp"
#include "jbf/trainer.hpp"
#include "support/temp_dir.hpp"

using namespace jbf;

namespace {

Dataset tiny_dataset(int count = 2, std::vector<double> doses = {0.25}) {
  Dataset d;
  d.doses = doses;
  for (int i = 0; i < count; ++i) {
    PhantomSpec spec;
    spec.seed = 10 + i;
    spec.nx = spec.ny = 32;
    spec.nz = 16;
    TrainingVolume tv{"p" + std::to_string(i), generate_phantom(spec), {}};
    for (std::size_t k = 0; k < doses.size(); ++k) tv.noisy.push_back(simulate_low_dose(tv.reference, doses[k], 100 + i * 7 + k));
    d.volumes.push_back(std::move(tv));
  }
  return d;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 2;
  c.pretrain_epochs = 1;
  c.batch = 2;
  c.slabs_per_epoch = 4;
  c.slab_size = 16;
  c.lr = 1e-3;
  c.seed = 3;
  return c;
}

bool same_values(const ParamSet<float>& a, const ParamSet<float>& b, const std::string& prefix = "") {
  for (const auto& e : a.entries()) {
    if (!e.name.starts_with(prefix)) continue;
    const auto x = e.tensor.values(), y = b.at(e.name).values();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

bool any_changed(const ParamSet<float>& a, const ParamSet<float>& b, const std::string& prefix) {
  for (const auto& e : a.entries()) {
    if (!e.name.starts_with(prefix)) continue;
    const auto x = e.tensor.values(), y = b.at(e.name).values();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return true;
  }
  return false;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("slab sampling") {
  Dataset d;
  d.doses.assign(std::begin(kStandardDoses), std::end(kStandardDoses));
  for (int i = 0; i < 3; ++i) {
    TrainingVolume tv{"v" + std::to_string(i), Volume(128, 128, 32), {}};
    tv.noisy.assign(4, Volume(128, 128, 32));
    d.volumes.push_back(std::move(tv));
  }

  const auto a = sample_sites(d, 10000, 42, 64);
  const auto b = sample_sites(d, 10000, 42, 64);
  REQUIRE(a.size() == 10000);
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    same = same && a[i].volume == b[i].volume && a[i].dose == b[i].dose && a[i].x == b[i].x && a[i].y == b[i].y &&
           a[i].z == b[i].z;
  }
  CHECK(same);
  const auto c = sample_sites(d, 100, 43, 64);
  bool differs = false;
  for (std::size_t i = 0; i < c.size(); ++i) differs = differs || c[i].x != a[i].x || c[i].z != a[i].z;
  CHECK(differs);

  int dose_count[4] = {0, 0, 0, 0};
  bool inside = true;
  int max_x = 0, max_z = 0;
  for (const auto& s : a) {
    ++dose_count[s.dose];
    inside = inside && s.x >= 0 && s.y >= 0 && s.z >= 0 && s.x + 64 <= 128 && s.y + 64 <= 128 && s.z + 15 <= 32;
    max_x = std::max(max_x, s.x);
    max_z = std::max(max_z, s.z);
  }
  CHECK(inside);
  CHECK(max_x == 64);
  CHECK(max_z == 17);
  for (int k = 0; k < 4; ++k) CHECK(std::abs(dose_count[k] / 10000.0 - 0.25) <= 0.05 * 0.25);

  Dataset small = d;
  small.volumes[1].reference = Volume(60, 128, 32);
  CHECK_THROWS_AS(sample_sites(small, 10, 1, 64), ShapeError);
  CHECK_THROWS_AS(sample_sites(Dataset{}, 10, 1, 64), std::invalid_argument);
}

TEST_CASE("training slabs align noisy input and reference") {
  const Dataset d = tiny_dataset();
  const SlabSite site{1, 0, 5, 9, 1};
  const TrainingSlab s = make_slab(d, site, 16);
  REQUIRE(s.noisy.shape() == Shape{15, 16, 16});
  REQUIRE(s.reference.shape() == Shape{7, 16, 16});
  const Volume& noisy = d.volumes[1].noisy[0];
  const Volume& ref = d.volumes[1].reference;
  bool ok = true;
  for (int k = 0; k < 15; ++k)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        ok = ok && s.noisy.values()[(k * 16 + y) * 16 + x] == static_cast<float>(normalize_hu(noisy.at(5 + x, 9 + y, 1 + k)));
        if (k < 7) {
          ok = ok && s.reference.values()[(k * 16 + y) * 16 + x] ==
                         static_cast<float>(normalize_hu(ref.at(5 + x, 9 + y, 1 + 4 + k)));
        }
      }
  CHECK(ok);
}

TEST_CASE("optimizer steps") {
  ParamSet<float> p, g;
  p.add("w", Tensor<float>({1}, {1.0f})).set_requires_grad(true);
  g.add("w", Tensor<float>({1}, {0.5f}));
  sgd_step(p, g, 0.1);
  CHECK(p.at("w").item() == doctest::Approx(0.95));

  SUBCASE("zero gradient leaves parameters alone") {
    ParamSet<float> q = p.clone();
    q.set_requires_grad(true);
    ParamSet<float> zero;
    zero.add("w", Tensor<float>({1}));
    const float before = q.at("w").item();
    sgd_step(q, zero, 0.1);
    CHECK(q.at("w").item() == before);
    AdamState s = AdamState::zeros_like(q);
    adam_step(q, zero, s, 1e-3);
    CHECK(q.at("w").item() == before);
  }

  SUBCASE("first Adam step has magnitude lr") {
    ParamSet<float> q;
    q.add("w", Tensor<float>({3}, {0.0f, 1.0f, -2.0f})).set_requires_grad(true);
    ParamSet<float> ones;
    ones.add("w", Tensor<float>::full({3}, 1.0f));
    AdamState s = AdamState::zeros_like(q);
    adam_step(q, ones, s, 1e-3);
    // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
    CHECK(q.at("w").values()[0] == doctest::Approx(-1e-3).epsilon(1e-6));
    CHECK(q.at("w").values()[1] == doctest::Approx(1.0 - 1e-3).epsilon(1e-7));
    CHECK(s.step == 1);
    CHECK(s.m.at("w").values()[0] == doctest::Approx(0.1));
    CHECK(s.v.at("w").values()[0] == doctest::Approx(0.001));
  }

  SUBCASE("frozen tensors keep values and moments") {
    ParamSet<float> q;
    q.add("a", Tensor<float>({2}, {1.0f, 2.0f})).set_requires_grad(true);
    q.add("b", Tensor<float>({2}, {3.0f, 4.0f}));
    ParamSet<float> grads;
    grads.add("a", Tensor<float>::full({2}, 1.0f));
    grads.add("b", Tensor<float>::full({2}, 1.0f));
    AdamState s = AdamState::zeros_like(q);
    for (int i = 0; i < 5; ++i) adam_step(q, grads, s, 1e-2);
    CHECK(q.at("b").values()[0] == 3.0f);
    CHECK(q.at("b").values()[1] == 4.0f);
    CHECK(s.m.at("b").values()[0] == 0.0f);
    CHECK(q.at("a").values()[0] < 1.0f);
  }
}

TEST_CASE("phase schedule and trainability masks") {
  TrainConfig c;
  CHECK(epoch_phase(c, 0) == Phase::Pretrain);
  CHECK(epoch_phase(c, 9) == Phase::Pretrain);
  CHECK(epoch_phase(c, 10) == Phase::Joint);
  CHECK(phase_weights(Phase::Pretrain) == LossWeights{0, 1, 0});
  CHECK(phase_weights(Phase::Joint) == LossWeights{1, 0.1, 0.1});
  c.ablation = Ablation::NoPretrain;
  CHECK(epoch_phase(c, 0) == Phase::Joint);

  ParamSet<float> p = init_model(1);
  auto trainable = [&](const std::string& name) { return p.at(name).requires_grad(); };
  set_trainable(p, ModelConfig{}, Phase::Pretrain);
  CHECK(trainable("prior.conv1.w"));
  CHECK(!trainable("block1.f.l1.w"));
  CHECK(!trainable("block4.mix.b"));
  set_trainable(p, ModelConfig{}, Phase::Joint);
  CHECK(trainable("prior.conv1.w"));
  CHECK(trainable("block2.g.l2.b"));
  CHECK(trainable("block3.mix.w"));
  set_trainable(p, apply_ablation({}, Ablation::FrozenPrior), Phase::Joint);
  CHECK(!trainable("prior.deconv4.b"));
  CHECK(trainable("block1.f.l1.w"));
  set_trainable(p, apply_ablation({}, Ablation::Gaussian), Phase::Joint);
  CHECK(!trainable("block1.f.l1.w"));
  CHECK(trainable("block1.mix.w"));
  set_trainable(p, apply_ablation({}, Ablation::SingleNm), Phase::Joint);
  CHECK(!trainable("block1.mix.w"));
  CHECK(trainable("block1.mix.b"));
  set_trainable(p, apply_ablation({}, Ablation::NoNm), Phase::Joint);
  CHECK(!trainable("block1.mix.b"));
}

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.pretrain_epochs = 31;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.lr = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(parse_optimizer("sgd") == OptimizerKind::Sgd);
  CHECK_THROWS_AS(parse_optimizer("rmsprop"), std::invalid_argument);
  TrainState s = initial_state(tiny_config());
  CHECK_THROWS_AS(train(tiny_config(), Dataset{}, s), std::invalid_argument);
}

TEST_CASE("pre-training changes only the prior") {
  set_serial(true);
  const Dataset d = tiny_dataset();
  TrainConfig c = tiny_config();
  c.epochs = 1;
  TrainState s = initial_state(c);
  const ParamSet<float> before = s.params.clone();
  train(c, d, s);
  CHECK(any_changed(s.params, before, "prior."));
  CHECK(same_values(s.params, before, "block"));
  REQUIRE(s.history.size() == 2);
  for (const auto& r : s.history) {
    CHECK(r.phase == 1);
    CHECK(std::isfinite(r.loss));
  }

  c.epochs = 2;
  const ParamSet<float> after_pretrain = s.params.clone();
  train(c, d, s);
  CHECK(any_changed(s.params, after_pretrain, "block"));
  CHECK(s.history.back().phase == 2);
  CHECK(s.epoch == 2);
  set_serial(false);
}

TEST_CASE("ablation schedules") {
  set_serial(true);
  const Dataset d = tiny_dataset();
  SUBCASE("no-pretrain runs joint weights from epoch 0") {
    TrainConfig c = tiny_config();
    c.ablation = Ablation::NoPretrain;
    TrainState s = initial_state(c);
    const ParamSet<float> before = s.params.clone();
    train(c, d, s);
    for (const auto& r : s.history) CHECK(r.phase == 2);
    CHECK(any_changed(s.params, before, "block1."));
  }
  SUBCASE("frozen prior stays bit-identical through the joint phase") {
    TrainConfig c = tiny_config();
    c.ablation = Ablation::FrozenPrior;
    TrainState s = initial_state(c);
    c.epochs = 1;
    train(c, d, s);
    const ParamSet<float> after_pretrain = s.params.clone();
    c.epochs = 3;
    train(c, d, s);
    CHECK(same_values(s.params, after_pretrain, "prior."));
    CHECK(any_changed(s.params, after_pretrain, "block"));
  }
  SUBCASE("gaussian kernels leave F and G untouched") {
    TrainConfig c = tiny_config();
    c.ablation = Ablation::Gaussian;
    TrainState s = initial_state(c);
    const ParamSet<float> before = s.params.clone();
    train(c, d, s);
    for (int k = 1; k <= 4; ++k) {
      CHECK(same_values(s.params, before, "block" + std::to_string(k) + ".f."));
      CHECK(same_values(s.params, before, "block" + std::to_string(k) + ".g."));
    }
    CHECK(any_changed(s.params, before, "block4.mix."));
  }
  set_serial(false);
}

TEST_CASE("results do not depend on the worker count") {
  const Dataset d = tiny_dataset();
  TrainConfig c = tiny_config();
  c.batch = 4;
  c.slabs_per_epoch = 8;
  set_serial(true);
  TrainState serial = initial_state(c);
  train(c, d, serial);
  set_serial(false);
  ::setenv("JBF_THREADS", "3", 1);
  TrainState threaded = initial_state(c);
  train(c, d, threaded);
  ::unsetenv("JBF_THREADS");
  CHECK(same_values(serial.params, threaded.params));
  REQUIRE(serial.history.size() == threaded.history.size());
  for (std::size_t i = 0; i < serial.history.size(); ++i) CHECK(serial.history[i].loss == threaded.history[i].loss);
}

TEST_CASE("resume from a checkpoint is bit exact") {
  set_serial(true);
  const Dataset d = tiny_dataset();
  test::TempDir dir;
  TrainConfig c = tiny_config();
  c.epochs = 4;
  c.pretrain_epochs = 1;
  c.checkpoint_every = 2;

  TrainState straight = initial_state(c);
  int saves = 0;
  train(c, d, straight, [&](const TrainState& s) {
    ++saves;
    if (s.epoch == 2) save_checkpoint(make_checkpoint(s, c), dir / "mid.jbfn");
  });
  CHECK(saves == 2);
  save_checkpoint(make_checkpoint(straight, c), dir / "straight.jbfn");

  TrainState resumed = resume_state(load_checkpoint(dir / "mid.jbfn"), c);
  CHECK(resumed.epoch == 2);
  CHECK(resumed.adam.step == 4);
  train(c, d, resumed);
  save_checkpoint(make_checkpoint(resumed, c), dir / "resumed.jbfn");
  CHECK(read_text(dir / "resumed.jbfn") == read_text(dir / "straight.jbfn"));
  CHECK(same_values(resumed.params, straight.params));

  TrainConfig other = c;
  other.ablation = Ablation::NoNm;
  CHECK_THROWS_AS(resume_state(load_checkpoint(dir / "mid.jbfn"), other), std::invalid_argument);

  ModelConfig mc;
  const ParamSet<float> model = load_model(load_checkpoint(dir / "straight.jbfn"), &mc);
  CHECK(mc == c.effective_model());
  CHECK(same_values(model, straight.params));
  set_serial(false);
}

TEST_CASE("non-finite loss aborts naming the batch") {
  set_serial(true);
  Dataset d = tiny_dataset(1);
  for (float& v : d.volumes[0].noisy[0].data) v = std::numeric_limits<float>::quiet_NaN();
  TrainConfig c = tiny_config();
  TrainState s = initial_state(c);
  CHECK_THROWS_WITH_AS(train(c, d, s), doctest::Contains("epoch 0 batch 0"), TrainingError);
  set_serial(false);
}

TEST_CASE("dataset directory and loss history files") {
  test::TempDir dir;
  const Dataset d = tiny_dataset(2, {0.25, 0.5});
  for (const auto& v : d.volumes) {
    write_volume(v.reference, dir / (v.name + ".ref.jbfvol"));
    write_volume(v.noisy[0], dir / (v.name + ".dose0.25.jbfvol"));
    write_volume(v.noisy[1], dir / (v.name + ".dose0.5.jbfvol"));
  }
  const Dataset loaded = load_dataset(dir.path(), {0.25, 0.5});
  REQUIRE(loaded.volumes.size() == 2);
  CHECK(loaded.volumes[0].name == "p0");
  CHECK(loaded.volumes[1].noisy[1].data == d.volumes[1].noisy[1].data);
  CHECK_THROWS_AS(load_dataset(dir.path(), {0.1}), IoError);
  CHECK_THROWS_AS(load_dataset(dir / "nowhere", {0.25}), IoError);
  CHECK(dose_tag(0.05) == "0.05");
  CHECK(dose_tag(0.1) == "0.1");

  write_loss_csv(dir / "loss.csv", {{0, 0, 1, 0.5}, {1, 3, 2, 1.25e-5}});
  CHECK(read_text(dir / "loss.csv") == "epoch,batch,phase,loss\n0,0,1,0.5\n1,3,2,1.25e-05\n");
}
