// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "gradweave/datakit.hpp"

namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

CmdResult run_cli(const std::string& args) {
  const std::string cmd = std::string(GRADWEAVE_CLI_PATH) + " " + args + " 2>&1";
  std::array<char, 4096> buf{};
  CmdResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  while (fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / ("gradweave_" + name + "_" + std::to_string(getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("train writes the contract artifacts and prints final metrics") {
  TempDir tmp("train");
  const std::string out = (tmp.path / "run").string();
  CmdResult r = run_cli("train --mode baseline --seed 1 --epochs 5 --out " + out);
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("mae=") != std::string::npos);
  CHECK(r.output.find("max_f=") != std::string::npos);
  CHECK(fs::exists(fs::path(out) / "diag.csv"));
  CHECK(fs::exists(fs::path(out) / "model.ckpt"));
  CHECK(fs::exists(fs::path(out) / "summary.txt"));
  CHECK(fs::exists(fs::path(out) / "config.txt"));
  CHECK(fs::exists(fs::path(out) / "data" / "manifest.txt"));

  // the diagnostics CSV parses back with the declared header
  auto records = gradweave::read_diagnostics_csv((fs::path(out) / "diag.csv").string());
  CHECK(records.size() == 5 * (24 / 4));
}

TEST_CASE("identical train invocations produce byte-identical diagnostics") {
  TempDir tmp("determinism");
  const std::string a = (tmp.path / "a").string();
  const std::string b = (tmp.path / "b").string();
  const std::string flags = "train --mode +deconflict --seed 3 --epochs 3 --dominance 0.9 ";
  CHECK(run_cli(flags + "--out " + a).exit_code == 0);
  CHECK(run_cli(flags + "--out " + b).exit_code == 0);
  CHECK(slurp(fs::path(a) / "diag.csv") == slurp(fs::path(b) / "diag.csv"));
  CHECK(slurp(fs::path(a) / "model.ckpt") == slurp(fs::path(b) / "model.ckpt"));
}

TEST_CASE("invalid eta is rejected with exit 2 naming the flag") {
  TempDir tmp("badeta");
  CmdResult r = run_cli("train --eta -1 --out " + (tmp.path / "x").string());
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("--eta") != std::string::npos);
}

TEST_CASE("config file feeds flags and command-line flags win") {
  TempDir tmp("config");
  const fs::path cfg = tmp.path / "run.cfg";
  {
    std::ofstream os(cfg);
    os << "mode = +deconflict\n"
       << "epochs = 2\n"
       << "eta = 0.05\n";
  }
  const std::string out = (tmp.path / "run").string();
  CmdResult r =
      run_cli("train --config " + cfg.string() + " --epochs 3 --out " + out);
  CHECK(r.exit_code == 0);
  const std::string echoed = slurp(fs::path(out) / "config.txt");
  CHECK(echoed.find("mode = +deconflict") != std::string::npos);  // from file
  CHECK(echoed.find("epochs = 3") != std::string::npos);          // flag wins
  CHECK(echoed.find("eta = 0.05") != std::string::npos);
}

TEST_CASE("gradcheck passes, honors --eps in its header, and can be faulted") {
  CmdResult ok = run_cli("gradcheck --eps 1e-5");
  CHECK(ok.exit_code == 0);
  CHECK(ok.output.find("eps=1e-05") != std::string::npos);
  CHECK(ok.output.find("gradcheck OK") != std::string::npos);

  CmdResult injected = run_cli("gradcheck --inject-fault");
  CHECK(injected.exit_code == 1);
  CHECK(injected.output.find("FAILED") != std::string::npos);
}

TEST_CASE("eval scores a checkpoint against a manifest") {
  TempDir tmp("eval");
  const std::string trained = (tmp.path / "trained").string();
  const std::string frozen = (tmp.path / "frozen").string();
  // a real run and an effectively untrained run on the same data seed
  CHECK(run_cli("train --mode +deconflict --seed 5 --epochs 12 --eta 0.3 --dominance 0.8 --out " +
                trained)
            .exit_code == 0);
  CHECK(run_cli("train --mode baseline --seed 5 --epochs 1 --eta 1e-12 --out " + frozen)
            .exit_code == 0);

  const std::string manifest = (fs::path(trained) / "data" / "manifest.txt").string();
  CmdResult et = run_cli("eval " + (fs::path(trained) / "model.ckpt").string() + " " + manifest +
                         " --mode +deconflict --out " + (tmp.path / "eval_t").string());
  CmdResult eu = run_cli("eval " + (fs::path(frozen) / "model.ckpt").string() + " " + manifest +
                         " --mode baseline --out " + (tmp.path / "eval_u").string());
  REQUIRE(et.exit_code == 0);
  REQUIRE(eu.exit_code == 0);
  const auto mae_of = [](const std::string& output) {
    const auto pos = output.find("mae=");
    REQUIRE(pos != std::string::npos);
    return std::stod(output.substr(pos + 4));
  };
  CHECK(mae_of(et.output) < mae_of(eu.output));

  CHECK(fs::exists(tmp.path / "eval_t" / "metrics.csv"));
  // prediction maps are valid PGMs within range
  gradweave::Tensor pred =
      gradweave::read_pgm((tmp.path / "eval_t" / "pred_0.pgm").string());
  CHECK(pred.rows() == 32);
  CHECK(pred.cols() == 32);
  for (double v : pred.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  CmdResult missing = run_cli("eval no_such.ckpt " + manifest);
  CHECK(missing.exit_code == 1);
}

TEST_CASE("ablate emits the fixed four-arm table") {
  TempDir tmp("ablate");
  const std::string out = (tmp.path / "grid").string();
  CmdResult r = run_cli(
      "ablate --seeds 2 --epochs 2 --train-samples 8 --eval-samples 4 --batch-size 4 "
      "--dominance 0.9 --bg-cue 0.8 --out " +
      out);
  REQUIRE(r.exit_code == 0);
  std::ifstream is(fs::path(out) / "ablation.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  REQUIRE(lines.size() == 5);  // header + 4 arms
  CHECK(lines[0] == "arm,median_mae,median_max_f,median_grad_ratio");
  CHECK(lines[1].rfind("baseline,", 0) == 0);
  CHECK(lines[2].rfind("+deconflict,", 0) == 0);
  CHECK(lines[3].rfind("+decoupled,", 0) == 0);
  CHECK(lines[4].rfind("full,", 0) == 0);
}

TEST_CASE("shuffle-projections knob stays deterministic per seed") {
  TempDir tmp("shuffle");
  const std::string a = (tmp.path / "a").string();
  const std::string b = (tmp.path / "b").string();
  const std::string flags =
      "train --mode full --seed 9 --epochs 2 --dominance 0.9 --bg-cue 0.8 --shuffle-projections ";
  CHECK(run_cli(flags + "--out " + a).exit_code == 0);
  CHECK(run_cli(flags + "--out " + b).exit_code == 0);
  CHECK(slurp(fs::path(a) / "diag.csv") == slurp(fs::path(b) / "diag.csv"));
}
