#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "jbf/volume_io.hpp"
#include "support/temp_dir.hpp"

using namespace jbf;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Set JBF_UPDATE_GOLDEN=1 to rewrite the help snapshots.
void check_golden(const std::string& name, const std::string& text) {
  const fs::path p = fs::path(JBF_GOLDEN_DIR) / (name + ".txt");
  if (std::getenv("JBF_UPDATE_GOLDEN")) {
    std::ofstream(p, std::ios::binary) << text;
    return;
  }
  REQUIRE_MESSAGE(fs::exists(p), "missing golden file " << p);
  CHECK(slurp(p) == text);
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

TEST_CASE("help output matches the snapshots") {
  const Run top = run({"--help"});
  CHECK(top.code == cli::kExitOk);
  check_golden("help", top.out);
  for (const char* sub : {"phantom", "simulate", "train", "denoise", "eval", "gradcheck", "export-png"}) {
    INFO(sub);
    const Run r = run({sub, "--help"});
    CHECK(r.code == cli::kExitOk);
    check_golden(std::string("help_") + sub, r.out);
  }
}

TEST_CASE("usage errors exit with 2 and one prefixed line") {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {},
           {"frobnicate"},
           {"simulate", "--in", "a"},
           {"phantom", "--out", "x", "--dims", "4", "4"},
           {"simulate", "--in", "a", "--out", "b", "--dose", "0"},
           {"simulate", "--in", "a", "--out", "b", "--dose", "1.5"},
           {"denoise", "--in", "a", "--out", "b"},
           {"denoise", "--in", "a", "--out", "b", "--classic", "--ckpt", "c"},
           {"denoise", "--in", "a", "--out", "b", "--ckpt", "c", "--sigma-r", "30"},
           {"denoise", "--in", "a", "--out", "b", "--classic", "--tile", "8"},
           {"train", "--data", "d", "--out", "o", "--ablation", "dropout"},
           {"train", "--data", "d", "--out", "o", "--pretrain-epochs", "5", "--epochs", "2"},
           {"eval", "--ref", "r", "--method", "noeq", "--report", "x.json"},
           {"gradcheck", "--stride", "0"},
       }) {
    const Run r = run(args);
    std::string joined;
    for (const auto& a : args) joined += a + " ";
    INFO(joined);
    CHECK(r.code == cli::kExitUsage);
    CHECK(starts_with(r.err, "jbf: usage error: "));
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  }
}

TEST_CASE("file errors name their kind") {
  test::TempDir dir;
  const std::string garbage = (dir / "garbage.jbfvol").string();
  std::ofstream(garbage, std::ios::binary) << "not a volume at all";
  Run r = run({"simulate", "--in", garbage, "--out", (dir / "o.jbfvol").string()});
  CHECK(r.code == cli::kExitRuntime);
  CHECK(starts_with(r.err, "jbf: format error: "));

  r = run({"simulate", "--in", (dir / "missing.jbfvol").string(), "--out", (dir / "o.jbfvol").string()});
  CHECK(r.code == cli::kExitRuntime);
  CHECK(starts_with(r.err, "jbf: io error: "));

  r = run({"denoise", "--ckpt", garbage, "--in", garbage, "--out", (dir / "o.jbfvol").string()});
  CHECK(r.code == cli::kExitRuntime);
  CHECK(starts_with(r.err, "jbf: format error: "));
}

TEST_CASE("phantom, simulate, classic denoise, eval, and export round trip") {
  test::TempDir dir;
  const std::string data = (dir / "data").string();
  Run r = run({"phantom", "--out", data, "--count", "5", "--dims", "32", "32", "16", "--dose", "0.25", "--seed", "3"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(dir / "data/phantom000.ref.jbfvol"));
  CHECK(fs::exists(dir / "data/phantom004.dose0.25.jbfvol"));
  const Volume ref = read_volume(dir / "data/phantom000.ref.jbfvol");
  CHECK(ref.nx == 32);
  CHECK(ref.nz == 16);

  // Full dose is the identity.
  r = run({"simulate", "--in", (dir / "data/phantom000.ref.jbfvol").string(), "--out",
           (dir / "full.jbfvol").string(), "--dose", "1"});
  REQUIRE(r.code == 0);
  CHECK(read_volume(dir / "full.jbfvol").data == ref.data);

  r = run({"simulate", "--in", (dir / "data/phantom000.ref.jbfvol").string(), "--out",
           (dir / "low.jbfvol").string(), "--dose", "0.25", "--seed", "9"});
  REQUIRE(r.code == 0);
  CHECK(read_volume(dir / "low.jbfvol").data != ref.data);

  fs::create_directories(dir / "refs");
  fs::create_directories(dir / "noisy");
  fs::create_directories(dir / "classic");
  for (int i = 0; i < 5; ++i) {
    const std::string name = "phantom00" + std::to_string(i);
    fs::copy_file(dir / ("data/" + name + ".ref.jbfvol"), dir / ("refs/" + name + ".ref.jbfvol"));
    fs::copy_file(dir / ("data/" + name + ".dose0.25.jbfvol"), dir / ("noisy/" + name + ".jbfvol"));
    r = run({"denoise", "--classic", "--in", (dir / ("noisy/" + name + ".jbfvol")).string(), "--out",
             (dir / ("classic/" + name + ".jbfvol")).string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
  }

  const std::string report = (dir / "report.json").string();
  r = run({"eval", "--ref", (dir / "refs").string(), "--method", "noisy=" + (dir / "noisy").string(), "--method",
           "classic=" + (dir / "classic").string(), "--report", report});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("classic") != std::string::npos);
  const std::string json = slurp(report);
  CHECK(json.find("\"noisy\"") != std::string::npos);
  CHECK(json.find("\"tests\"") != std::string::npos);
  CHECK(json.find("\"p\"") != std::string::npos);

  r = run({"export-png", "--in", (dir / "classic/phantom000.jbfvol").string(), "--z", "3", "--out",
           (dir / "s.png").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(slurp(dir / "s.png").substr(1, 3) == "PNG");
  r = run({"export-png", "--in", (dir / "classic/phantom000.jbfvol").string(), "--z", "16", "--out",
           (dir / "s.png").string()});
  CHECK(r.code == cli::kExitRuntime);
  CHECK(starts_with(r.err, "jbf: shape error: "));
}

TEST_CASE("train, resume, and model denoise") {
  test::TempDir dir;
  const std::string data = (dir / "data").string();
  REQUIRE(run({"phantom", "--out", data, "--count", "2", "--dims", "64", "64", "16", "--dose", "0.25"}).code == 0);
  const std::vector<std::string> common{"train", "--data", data, "--pretrain-epochs", "1", "--batch", "2",
                                        "--slabs-per-epoch", "2", "--slab-size", "16", "--serial"};
  auto with = [&](std::vector<std::string> extra) {
    auto a = common;
    a.insert(a.end(), extra.begin(), extra.end());
    return run(a);
  };
  Run r = with({"--epochs", "1", "--out", (dir / "a.ckpt").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  r = with({"--epochs", "2", "--out", (dir / "b.ckpt").string(), "--resume", (dir / "a.ckpt").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  r = with({"--epochs", "2", "--out", (dir / "c.ckpt").string(), "--loss-csv", (dir / "loss.csv").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  // Resuming continues the same run.
  CHECK(slurp(dir / "b.ckpt") == slurp(dir / "c.ckpt"));
  CHECK(slurp(dir / "loss.csv").find('\n') != std::string::npos);

  r = run({"denoise", "--ckpt", (dir / "c.ckpt").string(), "--in", (dir / "data/phantom000.dose0.25.jbfvol").string(),
           "--out", (dir / "d.jbfvol").string(), "--tile", "32"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const Volume d = read_volume(dir / "d.jbfvol");
  CHECK(d.nx == 64);
  CHECK(d.nz == 16);
}
