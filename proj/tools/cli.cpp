#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "jbf/eval.hpp"
#include "jbf/model_gradcheck.hpp"
#include "jbf/parallel.hpp"
#include "jbf/phantom.hpp"
#include "jbf/trainer.hpp"
#include "jbf/volume_io.hpp"

namespace jbf::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out || !(out << text)) throw IoError("cannot write " + p.string());
}

void check_dose(double dose) {
  if (!(dose > 0.0 && dose <= 1.0)) throw UsageError("dose must lie in (0, 1], got " + dose_tag(dose));
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct PhantomArgs {
  std::string out, config;
  int count = 1;
  std::uint64_t seed = 1;
  std::vector<int> dims{128, 128, 32};
  std::vector<double> doses;
};

int cmd_phantom(const PhantomArgs& a, std::ostream& out) {
  if (a.count < 1) throw UsageError("--count must be positive");
  for (double d : a.doses) check_dose(d);
  PhantomSpec spec = a.config.empty() ? PhantomSpec{} : parse_phantom_config(read_text(a.config));
  spec.nx = a.dims[0];
  spec.ny = a.dims[1];
  spec.nz = a.dims[2];
  if (spec.nx < 1 || spec.ny < 1 || spec.nz < 1) throw UsageError("--dims must be positive");
  fs::create_directories(a.out);
  for (int i = 0; i < a.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "phantom%03d", i);
    spec.seed = mix_seed(a.seed) ^ mix_seed(static_cast<std::uint64_t>(i) + 1);
    const Volume ref = generate_phantom(spec);
    write_volume(ref, fs::path(a.out) / (std::string(name) + ".ref.jbfvol"));
    for (std::size_t k = 0; k < a.doses.size(); ++k) {
      const Volume noisy = simulate_low_dose(ref, a.doses[k], spec.seed ^ mix_seed(k + 1));
      write_volume(noisy, fs::path(a.out) / (std::string(name) + ".dose" + dose_tag(a.doses[k]) + ".jbfvol"));
    }
  }
  out << "wrote " << a.count << " phantom volume" << (a.count == 1 ? "" : "s") << " to " << a.out << "\n";
  return kExitOk;
}

struct SimulateArgs {
  std::string in, out;
  double dose = 0.25;
  double sigma_full = kSigmaFull;
  std::uint64_t seed = 1;
};

int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  check_dose(a.dose);
  if (!(a.sigma_full >= 0)) throw UsageError("--sigma-full must be non-negative");
  const Volume ref = read_volume(a.in);
  // Full dose adds no noise; the volume is copied unchanged.
  const Volume noisy = a.dose == 1.0 ? ref : simulate_low_dose(ref, a.dose, a.seed, a.sigma_full);
  write_volume(noisy, a.out);
  out << "dose " << dose_tag(a.dose) << ": noise sigma " << fmt("%.4g", dose_sigma(a.dose, a.sigma_full))
      << " HU -> " << a.out << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string data, out, resume, loss_csv;
  TrainConfig config;
  std::string optimizer = "adam", ablation = "none", range_mode = "response";
  std::vector<double> doses{0.25};
};

int cmd_train(TrainArgs a, std::ostream& out) {
  for (double d : a.doses) check_dose(d);
  TrainConfig& c = a.config;
  try {
    c.optimizer = parse_optimizer(a.optimizer);
    c.ablation = parse_ablation(a.ablation);
    c.model.range_mode = parse_range_mode(a.range_mode);
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const Dataset data = load_dataset(a.data, a.doses);
  TrainState state = a.resume.empty() ? initial_state(c) : resume_state(load_checkpoint(a.resume), c);
  const int start = state.epoch;
  train(c, data, state, [&](const TrainState& s) { save_checkpoint(make_checkpoint(s, c), a.out); });
  if (start >= c.epochs) save_checkpoint(make_checkpoint(state, c), a.out);
  if (!a.loss_csv.empty()) write_loss_csv(a.loss_csv, state.history);
  out << "trained epochs " << start << ".." << state.epoch << " on " << data.volumes.size() << " volumes";
  if (!state.history.empty()) out << ", last batch loss " << fmt("%.6g", state.history.back().loss);
  out << " -> " << a.out << "\n";
  return kExitOk;
}

struct DenoiseArgs {
  std::string ckpt, in, out;
  int tile = 256;
  bool classic = false;
  double sigma_s = kClassicSigmaS, sigma_r = kClassicSigmaR;
};

int cmd_denoise(const DenoiseArgs& a, const CLI::App& app, std::ostream& out) {
  const bool sigmas = app.count("--sigma-s") + app.count("--sigma-r") > 0;
  if (a.classic && !a.ckpt.empty()) throw UsageError("--classic and --ckpt are mutually exclusive");
  if (!a.classic && a.ckpt.empty()) throw UsageError("either --ckpt or --classic is required");
  if (sigmas && !a.classic) throw UsageError("--sigma-s and --sigma-r apply only with --classic");
  if (a.tile < 16) throw UsageError("--tile must be at least 16");
  const Volume noisy = read_volume(a.in);
  Volume result;
  if (a.classic) {
    if (!(a.sigma_s > 0) || !(a.sigma_r > 0)) throw UsageError("classic sigmas must be positive");
    result = classic_denoise(noisy, a.sigma_s, a.sigma_r);
    out << "classic JBF sigma_s " << fmt("%g", a.sigma_s) << " sigma_r " << fmt("%g", a.sigma_r) << " HU";
  } else {
    ModelConfig config;
    const ParamSet<float> params = load_model(load_checkpoint(a.ckpt), &config);
    TileOptions tiling;
    tiling.tile = a.tile;
    result = denoise_volume(noisy, params, config, tiling);
    out << "model " << to_string(config.range_mode) << "/" << to_string(config.mix_mode)
        << (config.gaussian_kernels ? "/gaussian" : "") << " tile " << a.tile;
  }
  write_volume(result, a.out);
  out << " -> " << a.out << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string ref, report, table;
  std::vector<std::string> methods;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  std::vector<std::pair<std::string, fs::path>> specs;
  for (const auto& m : a.methods) {
    const auto eq = m.find('=');
    if (eq == 0 || eq == std::string::npos || eq + 1 == m.size()) throw UsageError("--method expects NAME=DIR, got " + m);
    const std::string name = m.substr(0, eq);
    if (std::any_of(specs.begin(), specs.end(), [&](const auto& s) { return s.first == name; }))
      throw UsageError("duplicate method name " + name);
    specs.emplace_back(name, m.substr(eq + 1));
  }
  if (!fs::is_directory(a.ref)) throw IoError("reference directory not found: " + a.ref);
  const std::string suffix = ".ref.jbfvol";
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(a.ref)) {
    const std::string f = e.path().filename().string();
    if (f.size() > suffix.size() && f.ends_with(suffix)) names.push_back(f.substr(0, f.size() - suffix.size()));
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw IoError("no *.ref.jbfvol volumes in " + a.ref);
  std::vector<Volume> refs;
  for (const auto& n : names) refs.push_back(read_volume(fs::path(a.ref) / (n + suffix)));
  std::vector<MethodOutputs> methods;
  for (const auto& [name, dir] : specs) {
    MethodOutputs m{name, {}};
    for (const auto& n : names) m.volumes.push_back(read_volume(dir / (n + ".jbfvol")));
    methods.push_back(std::move(m));
  }
  const EvalReport report = build_report(names, refs, std::move(methods));
  write_text(a.report, report_json(report));
  const std::string table = report_table(report);
  if (!a.table.empty()) write_text(a.table, table);
  out << table;
  return kExitOk;
}

struct GradcheckArgs {
  bool dbl = false;
  std::uint64_t seed = 1;
  std::size_t stride = 1;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  if (a.stride < 1) throw UsageError("--stride must be positive");
  ModelGradCheckOptions o;
  o.seed = a.seed;
  o.prior_stride = a.stride;
  const auto results = model_grad_check(standard_check_cases(), o);
  double worst = 0;
  bool ok = true;
  for (const auto& r : results) {
    worst = std::max(worst, r.report.max_rel_error);
    ok = ok && r.passed();
    out << std::left << std::setw(26) << r.label << " values " << std::setw(7) << r.report.checked << " max rel err "
        << fmt("%.3e", r.report.max_rel_error) << " tape cross-check " << fmt("%.1e", r.cross_check)
        << (r.passed() ? "  ok" : "  FAIL") << "\n";
    if (!r.passed())
      for (const auto& e : r.report.worst)
        out << "    " << e.name << "[" << e.index << "] analytic " << fmt("%.10g", e.analytic) << " numeric "
            << fmt("%.10g", e.numeric) << " rel " << fmt("%.3e", e.rel_error) << "\n";
  }
  out << (ok ? "PASS" : "FAIL") << ": max rel err " << (ok ? "< 1e-4" : ">= 1e-4") << " (worst "
      << fmt("%.3e", worst) << ", double precision, 16x16x15 slab, seed " << a.seed << ")\n";
  return ok ? kExitOk : kExitRuntime;
}

struct ExportArgs {
  std::string in, out;
  int z = 0;
  std::vector<double> window{kDefaultWindowLo, kDefaultWindowHi};
};

int cmd_export(const ExportArgs& a, std::ostream& out) {
  if (!(a.window[0] < a.window[1])) throw UsageError("--window needs LO < HI");
  const Volume v = read_volume(a.in);
  if (a.z < 0 || a.z >= v.nz) throw ShapeError("slice " + std::to_string(a.z) + " outside 0.." + std::to_string(v.nz - 1));
  export_png_slice(v, a.z, a.window[0], a.window[1], a.out);
  out << "slice " << a.z << " window [" << fmt("%g", a.window[0]) << ", " << fmt("%g", a.window[1]) << "] -> "
      << a.out << "\n";
  return kExitOk;
}

int report(std::ostream& err, const char* kind, const std::string& what, int code) {
  std::string msg = what;
  std::replace(msg.begin(), msg.end(), '\n', ' ');
  err << "jbf: " << kind << ": " << msg << "\n";
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Trainable joint bilateral filter denoiser for low-dose CT volumes.", "jbf"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();
  bool serial = false;
  app.add_flag("--serial", serial, "Single-threaded, bit-exact execution");

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "Generate synthetic reference volumes");
  phantom->add_option("--out", pa.out, "Output directory")->required();
  phantom->add_option("--count", pa.count, "Number of volumes");
  phantom->add_option("--seed", pa.seed, "Random seed");
  phantom->add_option("--dims", pa.dims, "Extents X Y Z")->expected(3);
  phantom->add_option("--dose", pa.doses, "Also write a noisy copy at this dose (repeatable)");
  phantom->add_option("--config", pa.config, "Phantom parameter file (key = value lines)");

  SimulateArgs sa;
  auto* simulate = app.add_subcommand("simulate", "Simulate a low-dose acquisition of a reference volume");
  simulate->add_option("--in", sa.in, "Reference volume")->required();
  simulate->add_option("--out", sa.out, "Noisy volume")->required();
  simulate->add_option("--dose", sa.dose, "Dose fraction in (0, 1]; 1 copies the input");
  simulate->add_option("--sigma-full", sa.sigma_full, "Noise sigma at full dose, HU");
  simulate->add_option("--seed", sa.seed, "Random seed");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a phantom data directory");
  train_cmd->add_option("--data", ta.data, "Directory of NAME.ref.jbfvol and NAME.dose<D>.jbfvol files")->required();
  train_cmd->add_option("--out", ta.out, "Checkpoint path")->required();
  train_cmd->add_option("--epochs", ta.config.epochs, "Total epochs");
  train_cmd->add_option("--pretrain-epochs", ta.config.pretrain_epochs, "Prior-only epochs at the start");
  train_cmd->add_option("--batch", ta.config.batch, "Slabs per optimizer step");
  train_cmd->add_option("--slabs-per-epoch", ta.config.slabs_per_epoch, "Slabs sampled per epoch");
  train_cmd->add_option("--slab-size", ta.config.slab_size, "In-plane slab extent");
  train_cmd->add_option("--optimizer", ta.optimizer, "adam|sgd");
  train_cmd->add_option("--lr", ta.config.lr, "Learning rate");
  train_cmd->add_option("--ablation", ta.ablation, "none|frozen-prior|no-pretrain|no-nm|single-nm|gaussian");
  train_cmd->add_option("--range-mode", ta.range_mode, "response|difference");
  train_cmd->add_option("--dose", ta.doses, "Dose levels to train on (repeatable)");
  train_cmd->add_option("--seed", ta.config.seed, "Random seed");
  train_cmd->add_option("--checkpoint-every", ta.config.checkpoint_every, "Save every N epochs (0 = at the end)");
  train_cmd->add_option("--resume", ta.resume, "Continue from this checkpoint");
  train_cmd->add_option("--loss-csv", ta.loss_csv, "Write per-batch losses here");

  DenoiseArgs da;
  auto* denoise = app.add_subcommand("denoise", "Denoise a volume with a trained model or the classic filter");
  denoise->add_option("--ckpt", da.ckpt, "Checkpoint; model modes are read from it");
  denoise->add_option("--in", da.in, "Noisy volume")->required();
  denoise->add_option("--out", da.out, "Denoised volume")->required();
  denoise->add_option("--tile", da.tile, "Tile extent");
  denoise->add_flag("--classic", da.classic, "Classic Gaussian JBF instead of a model");
  denoise->add_option("--sigma-s", da.sigma_s, "Classic spatial sigma, voxels");
  denoise->add_option("--sigma-r", da.sigma_r, "Classic range sigma, HU");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score methods against references and compare them pairwise");
  eval->add_option("--ref", ea.ref, "Directory of NAME.ref.jbfvol references")->required();
  eval->add_option("--method", ea.methods, "NAME=DIR holding NAME.jbfvol per reference (repeatable)")->required();
  eval->add_option("--report", ea.report, "JSON report path")->required();
  eval->add_option("--table", ea.table, "Text table path");

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every model gradient");
  gradcheck->add_flag("--double", ga.dbl, "Double precision (the check always runs in double)");
  gradcheck->add_option("--seed", ga.seed, "Random seed");
  gradcheck->add_option("--stride", ga.stride, "Check every k-th prior value");

  ExportArgs xa;
  auto* export_png = app.add_subcommand("export-png", "Write one slice as an 8-bit PNG");
  export_png->add_option("--in", xa.in, "Volume")->required();
  export_png->add_option("--z", xa.z, "Slice index")->required();
  export_png->add_option("--out", xa.out, "PNG path")->required();
  export_png->add_option("--window", xa.window, "Display window LO HI, HU")->expected(2);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return report(err, "usage error", e.what(), kExitUsage);
  }

  set_serial(serial);
  try {
    if (phantom->parsed()) return cmd_phantom(pa, out);
    if (simulate->parsed()) return cmd_simulate(sa, out);
    if (train_cmd->parsed()) return cmd_train(ta, out);
    if (denoise->parsed()) return cmd_denoise(da, *denoise, out);
    if (eval->parsed()) return cmd_eval(ea, out);
    if (gradcheck->parsed()) return cmd_gradcheck(ga, out);
    if (export_png->parsed()) return cmd_export(xa, out);
  } catch (const UsageError& e) {
    return report(err, "usage error", e.what(), kExitUsage);
  } catch (const BadMagicError& e) {
    return report(err, "format error", e.what(), kExitRuntime);
  } catch (const TruncatedError& e) {
    return report(err, "format error", e.what(), kExitRuntime);
  } catch (const FormatError& e) {
    return report(err, "format error", e.what(), kExitRuntime);
  } catch (const IoError& e) {
    return report(err, "io error", e.what(), kExitRuntime);
  } catch (const ShapeError& e) {
    return report(err, "shape error", e.what(), kExitRuntime);
  } catch (const TrainingError& e) {
    return report(err, "training error", e.what(), kExitRuntime);
  } catch (const std::invalid_argument& e) {
    return report(err, "invalid input", e.what(), kExitRuntime);
  } catch (const std::exception& e) {
    return report(err, "runtime error", e.what(), kExitRuntime);
  }
  return report(err, "usage error", "no subcommand", kExitUsage);
}

}  // namespace jbf::cli
