// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <vector>

#include "gradweave/datakit.hpp"

using namespace gradweave;

namespace {

double contrast(const Tensor& img, const Tensor& gt) {
  double fg = 0.0, bg = 0.0;
  std::size_t nfg = 0, nbg = 0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (gt[i] == 1.0) {
      fg += img[i];
      ++nfg;
    } else {
      bg += img[i];
      ++nbg;
    }
  }
  if (nfg == 0 || nbg == 0) return 0.0;
  return fg / nfg - bg / nbg;
}

// brute-force max F over every distinct binarization of pred
double naive_max_f(const Tensor& pred, const Tensor& gt) {
  std::set<double> values(pred.data().begin(), pred.data().end());
  std::vector<double> taus(values.begin(), values.end());
  double best = 0.0;
  for (double tau : taus) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool hit = pred[i] > tau;
      if (hit && gt[i] == 1.0) ++tp;
      else if (hit) ++fp;
      else if (gt[i] == 1.0) ++fn;
    }
    const double prec = (tp + fp) > 0 ? double(tp) / double(tp + fp) : 0.0;
    const double rec = double(tp) / double(tp + fn);
    const double denom = 0.3 * prec + rec;
    best = std::max(best, denom > 0.0 ? 1.3 * prec * rec / denom : 0.0);
  }
  return best;
}

}  // namespace

TEST_CASE("synthetic samples are deterministic in (cfg, seed)") {
  SynthConfig cfg;
  cfg.dominance = 0.7;
  cfg.background_cue_strength = 0.6;
  cfg.seed = 42;
  std::mt19937_64 r1(cfg.seed), r2(cfg.seed);
  Sample a = generate_sample(cfg, r1);
  Sample b = generate_sample(cfg, r2);
  for (std::size_t i = 0; i < a.I_R.size(); ++i) {
    CHECK(a.I_R[i] == b.I_R[i]);
    CHECK(a.I_T[i] == b.I_T[i]);
    CHECK(a.GT[i] == b.GT[i]);
  }
}

TEST_CASE("samples stay in range with binary masks") {
  SynthConfig cfg;
  cfg.dominance = 0.9;
  cfg.background_cue_strength = 1.0;
  std::mt19937_64 rng(7);
  for (int i = 0; i < 20; ++i) {
    Sample s = generate_sample(cfg, rng);
    for (double v : s.I_R.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    for (double v : s.GT.data()) CHECK((v == 0.0 || v == 1.0));
  }
}

TEST_CASE("full dominance gives modality A the stronger contrast") {
  SynthConfig cfg;
  cfg.dominance = 1.0;
  std::mt19937_64 rng(11);
  for (int i = 0; i < 100; ++i) {
    Sample s = generate_sample(cfg, rng);
    CHECK(contrast(s.I_R, s.GT) > contrast(s.I_T, s.GT));
  }
}

TEST_CASE("balanced dominance is symmetric in expectation") {
  SynthConfig cfg;
  cfg.dominance = 0.5;
  std::mt19937_64 rng(13);
  double diff = 0.0;
  const int n = 400;
  for (int i = 0; i < n; ++i) {
    Sample s = generate_sample(cfg, rng);
    diff += contrast(s.I_R, s.GT) - contrast(s.I_T, s.GT);
  }
  // the per-sample diff carries the one-sided camouflage draw, so the mean
  // estimator keeps noticeable variance at this sample count
  CHECK(std::abs(diff / n) < 0.03);
}

TEST_CASE("synth config validation") {
  SynthConfig cfg;
  cfg.H = 4;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = SynthConfig{};
  cfg.dominance = 1.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("mae examples") {
  std::mt19937_64 rng(17);
  Tensor gt({8, 8});
  for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = i % 3 == 0 ? 1.0 : 0.0;

  CHECK(mae(gt, gt) == 0.0);

  Tensor flipped(gt.shape());
  for (std::size_t i = 0; i < gt.size(); ++i) flipped[i] = 1.0 - gt[i];
  CHECK(mae(flipped, gt) == 1.0);

  CHECK(mae(Tensor::full({8, 8}, 0.5), gt) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK_THROWS_AS(mae(Tensor({4, 4}), gt), std::invalid_argument);
}

TEST_CASE("max F-measure basics") {
  Tensor gt({8, 8});
  gt.at(2, 2) = gt.at(2, 3) = gt.at(3, 2) = gt.at(3, 3) = 1.0;

  CHECK(max_f_measure(gt, gt) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(max_f_measure(Tensor({8, 8}), gt) == 0.0);
  CHECK_THROWS_AS(max_f_measure(Tensor({8, 8}), Tensor({8, 8})), std::invalid_argument);

  // one positive flipped off: precision 1, recall 3/4 at the optimal threshold
  Tensor pred = gt;
  pred.at(3, 3) = 0.0;
  const double got = max_f_measure(pred, gt);
  CHECK(got == doctest::Approx(naive_max_f(pred, gt)).epsilon(1e-13));
  CHECK(got == doctest::Approx(1.3 * 0.75 / (0.3 + 0.75)).epsilon(1e-13));

  // one background pixel flipped on
  Tensor pred2 = gt;
  pred2.at(0, 0) = 1.0;
  CHECK(max_f_measure(pred2, gt) == doctest::Approx(naive_max_f(pred2, gt)).epsilon(1e-13));
}

TEST_CASE("max F-measure is invariant to affine rescalings of pred") {
  std::mt19937_64 rng(19);
  Tensor gt({8, 8});
  for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = i % 5 == 0 ? 1.0 : 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor pred = random_uniform({8, 8}, 0.0, 1.0, rng);
    const double base = max_f_measure(pred, gt);
    for (auto [a, b] : {std::pair{0.5, 0.25}, std::pair{0.3, 0.6}, std::pair{0.9, 0.05}}) {
      Tensor scaled(pred.shape());
      for (std::size_t i = 0; i < pred.size(); ++i) scaled[i] = a * pred[i] + b;
      CHECK(max_f_measure(scaled, gt) == doctest::Approx(base).epsilon(1e-12));
    }
  }
}

TEST_CASE("metrics stay in [0,1] on random inputs") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor pred = random_uniform({8, 8}, 0.0, 1.0, rng);
    Tensor gt({8, 8});
    gt.at(1, 1) = 1.0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (pred[i] > 0.8) gt[i] = 1.0;
    }
    const double m = mae(pred, gt);
    const double f = max_f_measure(pred, gt);
    CHECK(m >= 0.0);
    CHECK(m <= 1.0);
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
  }
}

TEST_CASE("pgm quantization writes the documented bytes") {
  Tensor img({2, 2}, {0.0, 1.0, 0.5, 0.25});
  const std::string path = "test_quant.pgm";
  write_pgm(img, path);
  std::ifstream is(path, std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  REQUIRE(content.size() >= 4);
  const std::string payload = content.substr(content.size() - 4);
  CHECK(static_cast<unsigned char>(payload[0]) == 0);
  CHECK(static_cast<unsigned char>(payload[1]) == 255);
  CHECK(static_cast<unsigned char>(payload[2]) == 128);
  CHECK(static_cast<unsigned char>(payload[3]) == 64);
  std::remove(path.c_str());
}

TEST_CASE("pgm round-trips within the quantization bound") {
  std::mt19937_64 rng(29);
  Tensor img = random_uniform({16, 12}, 0.0, 1.0, rng);
  const std::string path = "test_roundtrip.pgm";
  write_pgm(img, path);
  Tensor back = read_pgm(path);
  REQUIRE(back.same_shape(img));
  for (std::size_t i = 0; i < img.size(); ++i) {
    CHECK(std::abs(back[i] - img[i]) <= 1.0 / 255.0);
  }
  std::remove(path.c_str());

  Tensor zeros({4, 4});
  write_pgm(zeros, path);
  Tensor back0 = read_pgm(path);
  for (std::size_t i = 0; i < back0.size(); ++i) CHECK(back0[i] == 0.0);
  std::remove(path.c_str());

  CHECK_THROWS_AS(write_pgm(Tensor({2, 2}, {0.0, 0.5, 1.0, 1.5}), path), std::invalid_argument);
}

TEST_CASE("pgm read rejects malformed input") {
  const std::string path = "test_bad.pgm";
  {
    std::ofstream os(path, std::ios::binary);
    os << "P2\n2 2\n255\n0 0 0 0\n";
  }
  CHECK_THROWS_AS(read_pgm(path), std::runtime_error);
  {
    std::ofstream os(path, std::ios::binary);
    os << "P5\n4 4\n255\nab";  // 16 bytes promised, 2 delivered
  }
  CHECK_THROWS_AS(read_pgm(path), std::runtime_error);
  std::remove(path.c_str());
  CHECK_THROWS_AS(read_pgm("missing_file.pgm"), std::runtime_error);
}

TEST_CASE("pgm read honors comments and maxval") {
  const std::string path = "test_comment.pgm";
  {
    std::ofstream os(path, std::ios::binary);
    os << "P5\n# a comment\n2 1\n100\n";
    const unsigned char payload[2] = {0, 100};
    os.write(reinterpret_cast<const char*>(payload), 2);
  }
  Tensor img = read_pgm(path);
  CHECK(img.rows() == 1);
  CHECK(img.cols() == 2);
  CHECK(img[0] == 0.0);
  CHECK(img[1] == 1.0);
  std::remove(path.c_str());
}

TEST_CASE("diagnostics CSV round-trips") {
  MetricsRecord r;
  r.iter = 3;
  r.loss = 1.23456789012;
  r.loss_F = 0.4;
  r.loss_R = 0.5;
  r.loss_T = 0.33456789;
  r.grad_ratio = 17.123456789;
  r.cos_RT = -0.987654321;
  r.cos_RF = 0.123456789;
  r.cos_TF = 1e-12;
  r.conflicts = 2;
  r.mae = 0.0123456789;
  r.max_f = 0.87;

  const std::string path = "test_diag.csv";
  write_diagnostics_csv({r}, path);

  std::ifstream is(path);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(is, line)) ++lines;
  CHECK(lines == 2);  // header + one row

  std::vector<MetricsRecord> back = read_diagnostics_csv(path);
  REQUIRE(back.size() == 1);
  CHECK(back[0].iter == 3);
  CHECK(back[0].conflicts == 2);
  const auto close = [](double a, double b) {
    return std::abs(a - b) <= 1e-8 * std::max(1.0, std::abs(b));
  };
  CHECK(close(back[0].loss, r.loss));
  CHECK(close(back[0].grad_ratio, r.grad_ratio));
  CHECK(close(back[0].cos_RT, r.cos_RT));
  CHECK(close(back[0].cos_TF, r.cos_TF));
  CHECK(close(back[0].mae, r.mae));
  std::remove(path.c_str());
}

TEST_CASE("empty diagnostics are rejected without creating a file") {
  const std::string path = "should_not_exist.csv";
  CHECK_THROWS_AS(write_diagnostics_csv({}, path), std::invalid_argument);
  CHECK(!std::filesystem::exists(path));
}

TEST_CASE("manifest round-trips and loads samples") {
  SynthConfig cfg;
  cfg.dominance = 0.8;
  std::mt19937_64 rng(31);
  Sample s = generate_sample(cfg, rng);

  std::filesystem::create_directories("test_data");
  write_pgm(s.I_R, "test_data/0_R.pgm");
  write_pgm(s.I_T, "test_data/0_T.pgm");
  write_pgm(s.GT, "test_data/0_GT.pgm");
  std::vector<ManifestEntry> entries = {
      {0, "test_data/0_R.pgm", "test_data/0_T.pgm", "test_data/0_GT.pgm"}};
  write_manifest(entries, "test_data/manifest.txt");

  std::vector<ManifestEntry> back = read_manifest("test_data/manifest.txt");
  REQUIRE(back.size() == 1);
  CHECK(back[0].index == 0);
  CHECK(back[0].path_GT == "test_data/0_GT.pgm");

  Sample loaded = load_sample(back[0]);
  for (std::size_t i = 0; i < s.GT.size(); ++i) {
    CHECK(loaded.GT[i] == s.GT[i]);  // binary mask survives quantization
    CHECK(std::abs(loaded.I_R[i] - s.I_R[i]) <= 1.0 / 255.0);
  }
  std::filesystem::remove_all("test_data");
}
