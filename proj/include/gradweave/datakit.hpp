// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradweave/network.hpp"
#include "gradweave/tensor.hpp"

namespace gradweave {

// ---- synthetic two-modality dataset -----------------------------------------

/// Controls for the procedural dataset. `dominance` skews signal strength and
/// noise toward modality A; `background_cue_strength` makes the background
/// texture informative about object location, with the modality-B cue placed
/// at the mirrored position so the two streams can disagree.
struct SynthConfig {
  std::size_t H = 32;
  std::size_t W = 32;
  std::size_t n_objects = 3;  // per-sample count drawn uniformly from 1..n_objects
  double dominance = 0.5;
  double background_cue_strength = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (H < 8 || W < 8) throw std::invalid_argument("SynthConfig: H, W must be >= 8");
    if (n_objects < 1) throw std::invalid_argument("SynthConfig: n_objects must be >= 1");
    if (dominance < 0.0 || dominance > 1.0) {
      throw std::invalid_argument("SynthConfig: dominance must lie in [0,1]");
    }
    if (background_cue_strength < 0.0 || background_cue_strength > 1.0) {
      throw std::invalid_argument("SynthConfig: background_cue_strength must lie in [0,1]");
    }
  }
};

namespace detail {

inline constexpr double kTwoPi = 6.28318530717958647692;

inline double clip01(double v) { return std::min(1.0, std::max(0.0, v)); }

/// One modality image: foreground amplitude and noise suppression both grow
/// with `strength`. The context level `ctx` (the background cue strength)
/// controls how much the task depends on context: the cue halo marks the true
/// object, distractor blobs mimic foreground away from it, and camouflaged
/// object pixels fade toward a faint bump whose evidence lives in weak
/// activations. At ctx = 0 the image is plain bright objects over texture.
inline Tensor synth_modality(const Tensor& gt, const Tensor& distractor, const Tensor& camo,
                             double strength, double ctx, double cue_r, double cue_c,
                             double tex_fr, double tex_fc, double tex_phase, double noise_sigma,
                             std::mt19937_64& rng) {
  const std::size_t H = gt.rows(), W = gt.cols();
  std::normal_distribution<double> noise(0.0, noise_sigma);
  const double fg_amp = 0.5 + 0.5 * strength;
  const double camo_amp = 0.30 * fg_amp;
  const double cue_amp = 0.35 * ctx;
  const double noise_scale = 1.0 - strength * 0.5;
  const double sigma2 = 2.0 * 0.12 * 0.12 * static_cast<double>(H) * static_cast<double>(W);
  Tensor img({H, W});
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      const double tex =
          0.1 * (1.0 + std::sin(kTwoPi * (tex_fr * static_cast<double>(r) / H +
                                          tex_fc * static_cast<double>(c) / W) +
                                tex_phase));
      const double dr = static_cast<double>(r) - cue_r;
      const double dc = static_cast<double>(c) - cue_c;
      const double cue = cue_amp * std::exp(-(dr * dr + dc * dc) / sigma2);
      const double g = gt.at(r, c);
      const double cm = camo.at(r, c) * ctx;
      const double d = distractor.at(r, c) * ctx;
      const double v = g * ((1.0 - cm) * fg_amp + cm * (tex + camo_amp)) + d * 0.9 * fg_amp +
                       (1.0 - g) * (1.0 - d) * (tex + cue) + noise(rng) * noise_scale;
      img.at(r, c) = clip01(v);
    }
  }
  return img;
}

}  // namespace detail

/// Draws one paired sample: GT is a union of 1..n_objects random ellipses and
/// rectangles; modality A is built with `dominance`, modality B with
/// (1 - dominance), so dominance = 0.5 is symmetric by construction.
inline Sample generate_sample(const SynthConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t H = cfg.H, W = cfg.W;
  std::uniform_int_distribution<std::size_t> count_dist(1, cfg.n_objects);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tensor gt({H, W});
  const std::size_t count = count_dist(rng);
  for (std::size_t k = 0; k < count; ++k) {
    const bool ellipse = unit(rng) < 0.5;
    const double cy = (0.25 + 0.5 * unit(rng)) * static_cast<double>(H);
    const double cx = (0.25 + 0.5 * unit(rng)) * static_cast<double>(W);
    const double ay = (0.10 + 0.15 * unit(rng)) * static_cast<double>(H);
    const double ax = (0.10 + 0.15 * unit(rng)) * static_cast<double>(W);
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t c = 0; c < W; ++c) {
        const double dy = (static_cast<double>(r) - cy) / ay;
        const double dx = (static_cast<double>(c) - cx) / ax;
        const bool inside = ellipse ? (dy * dy + dx * dx <= 1.0)
                                    : (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0);
        if (inside) gt.at(r, c) = 1.0;
      }
    }
  }
  // object centroid drives the background cues
  double sr = 0.0, sc = 0.0, n = 0.0;
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      if (gt.at(r, c) > 0.5) {
        sr += static_cast<double>(r);
        sc += static_cast<double>(c);
        n += 1.0;
      }
    }
  }
  const double cy = n > 0.0 ? sr / n : static_cast<double>(H) / 2.0;
  const double cx = n > 0.0 ? sc / n : static_cast<double>(W) / 2.0;

  // distractor blobs: foreground-like brightness, excluded from GT; only the
  // cue halo around the true object separates the two
  Tensor distractor({H, W});
  std::uniform_int_distribution<std::size_t> d_count_dist(1, 2);
  const std::size_t d_count = d_count_dist(rng);
  const double min_dist = 0.35 * static_cast<double>(std::min(H, W));
  for (std::size_t k = 0; k < d_count; ++k) {
    double dcy = 0.0, dcx = 0.0;
    for (int attempt = 0; attempt < 20; ++attempt) {
      dcy = (0.10 + 0.80 * unit(rng)) * static_cast<double>(H);
      dcx = (0.10 + 0.80 * unit(rng)) * static_cast<double>(W);
      const double dy = dcy - cy, dx = dcx - cx;
      if (std::sqrt(dy * dy + dx * dx) >= min_dist) break;
    }
    const bool ellipse = unit(rng) < 0.5;
    const double ay = (0.08 + 0.10 * unit(rng)) * static_cast<double>(H);
    const double ax = (0.08 + 0.10 * unit(rng)) * static_cast<double>(W);
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t c = 0; c < W; ++c) {
        if (gt.at(r, c) == 1.0) continue;
        const double dy = (static_cast<double>(r) - dcy) / ay;
        const double dx = (static_cast<double>(c) - dcx) / ax;
        const bool inside = ellipse ? (dy * dy + dx * dx <= 1.0)
                                    : (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0);
        if (inside) distractor.at(r, c) = 1.0;
      }
    }
  }

  // camouflaged sector: the lower band of the object shows only a faint
  // brightness bump in one modality per sample, so the other modality
  // uniquely carries that part of the object
  std::size_t obj_max_r = 0;
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      if (gt.at(r, c) == 1.0) obj_max_r = r;
    }
  }
  const double band_start = cy + 0.45 * (static_cast<double>(obj_max_r) - cy);
  Tensor camo({H, W});
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      if (gt.at(r, c) == 1.0 && static_cast<double>(r) > band_start) camo.at(r, c) = 1.0;
    }
  }
  const Tensor no_camo({H, W});
  const bool camo_in_a = unit(rng) < 0.5;

  std::uniform_real_distribution<double> phase(0.0, detail::kTwoPi);
  const double phase_a = phase(rng);
  const double phase_b = phase(rng);
  const double ctx = cfg.background_cue_strength;

  Sample s;
  s.GT = gt;
  // modality A: cue halo at the true centroid; modality B: cue at the mirror
  s.I_R = detail::synth_modality(gt, distractor, camo_in_a ? camo : no_camo, cfg.dominance, ctx,
                                 cy, cx, 2.0, 3.0, phase_a, 0.12, rng);
  s.I_T = detail::synth_modality(gt, distractor, camo_in_a ? no_camo : camo,
                                 1.0 - cfg.dominance, ctx, static_cast<double>(H - 1) - cy,
                                 static_cast<double>(W - 1) - cx, 3.0, -2.0, phase_b, 0.12, rng);
  s.validate();
  return s;
}

inline std::vector<Sample> generate_dataset(const SynthConfig& cfg, std::size_t count) {
  std::mt19937_64 rng(cfg.seed);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(cfg, rng));
  return out;
}

// ---- metrics -----------------------------------------------------------------

/// Mean absolute error between a [0,1] map and the binary ground truth.
inline double mae(const Tensor& pred, const Tensor& gt) {
  if (!pred.same_shape(gt)) throw std::invalid_argument("mae: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - gt[i]);
  return s / static_cast<double>(pred.size());
}

/// Max F-measure with beta^2 = 0.3 over 255 uniform thresholds spanning the
/// prediction's own value range (binarize pred > tau). The range-relative
/// sweep makes the score exactly invariant to positive affine rescalings of
/// pred. 0/0 counts as 0. GT must contain at least one positive pixel.
inline double max_f_measure(const Tensor& pred, const Tensor& gt) {
  if (!pred.same_shape(gt)) throw std::invalid_argument("max_f_measure: shape mismatch");
  std::size_t positives = 0;
  for (double v : gt.data()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("max_f_measure: GT must be binary");
    if (v == 1.0) ++positives;
  }
  if (positives == 0) throw std::invalid_argument("max_f_measure: empty GT");
  double mn = pred[0], mx = pred[0];
  for (double v : pred.data()) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  constexpr double beta2 = 0.3;
  constexpr int kThresholds = 255;
  double best = 0.0;
  for (int t = 0; t < kThresholds; ++t) {
    const double tau = mn + (mx - mn) * static_cast<double>(t) / (kThresholds - 1);
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool hit = pred[i] > tau;
      const bool pos = gt[i] == 1.0;
      if (hit && pos) ++tp;
      else if (hit) ++fp;
      else if (pos) ++fn;
    }
    const double prec = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double rec = static_cast<double>(tp) / static_cast<double>(tp + fn);
    const double denom = beta2 * prec + rec;
    const double f = denom > 0.0 ? (1.0 + beta2) * prec * rec / denom : 0.0;
    best = std::max(best, f);
  }
  return best;
}

// ---- PGM I/O -----------------------------------------------------------------

/// 8-bit binary PGM (P5, maxval 255); values quantized round-half-up.
inline void write_pgm(const Tensor& img, const std::string& path) {
  if (img.rank() != 2) throw std::invalid_argument("write_pgm: rank-2 image required");
  for (double v : img.data()) {
    if (v < 0.0 || v > 1.0) throw std::invalid_argument("write_pgm: values must lie in [0,1]");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
  os << "P5\n" << img.cols() << " " << img.rows() << "\n255\n";
  std::vector<unsigned char> bytes(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::floor(img[i] * 255.0 + 0.5));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write_pgm: write failed: " + path);
}

namespace detail {

inline int pgm_token(std::istream& is) {
  // skips whitespace and '#' comment lines, returns next integer token
  int c = is.get();
  while (is) {
    if (c == '#') {
      while (is && c != '\n') c = is.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = is.get();
  }
  if (!is || !std::isdigit(c)) throw std::runtime_error("read_pgm: malformed header");
  int v = 0;
  while (is && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = is.get();
  }
  return v;
}

}  // namespace detail

inline Tensor read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_pgm: cannot open " + path);
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (!is || m0 != 'P' || m1 != '5') throw std::runtime_error("read_pgm: not a binary PGM (P5)");
  const int w = detail::pgm_token(is);
  const int h = detail::pgm_token(is);
  const int maxval = detail::pgm_token(is);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw std::runtime_error("read_pgm: malformed header");
  }
  // pgm_token consumed the single whitespace after maxval
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (is.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw std::runtime_error("read_pgm: truncated payload");
  }
  Tensor img({static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (std::size_t i = 0; i < img.size(); ++i) {
    img[i] = static_cast<double>(bytes[i]) / static_cast<double>(maxval);
  }
  return img;
}

// ---- diagnostics CSV -----------------------------------------------------------

/// One training-step row of the diagnostics CSV.
struct MetricsRecord {
  std::size_t iter = 0;
  double loss = 0.0, loss_F = 0.0, loss_R = 0.0, loss_T = 0.0;
  double grad_ratio = 0.0;
  double cos_RT = 0.0, cos_RF = 0.0, cos_TF = 0.0;
  std::size_t conflicts = 0;
  double mae = 0.0, max_f = 0.0;
};

inline constexpr const char* kDiagnosticsHeader =
    "iter,loss,loss_F,loss_R,loss_T,grad_ratio,cos_RT,cos_RF,cos_TF,conflicts,mae,max_f";

inline std::string format_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline void write_diagnostics_csv(const std::vector<MetricsRecord>& records,
                                  const std::string& path) {
  if (records.empty()) {
    throw std::invalid_argument("write_diagnostics_csv: no records");
  }
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_diagnostics_csv: cannot open " + path);
  os << kDiagnosticsHeader << "\n";
  for (const MetricsRecord& r : records) {
    os << r.iter << ',' << format_g9(r.loss) << ',' << format_g9(r.loss_F) << ','
       << format_g9(r.loss_R) << ',' << format_g9(r.loss_T) << ',' << format_g9(r.grad_ratio)
       << ',' << format_g9(r.cos_RT) << ',' << format_g9(r.cos_RF) << ',' << format_g9(r.cos_TF)
       << ',' << r.conflicts << ',' << format_g9(r.mae) << ',' << format_g9(r.max_f) << "\n";
  }
  if (!os) throw std::runtime_error("write_diagnostics_csv: write failed: " + path);
}

inline std::vector<MetricsRecord> read_diagnostics_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_diagnostics_csv: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != kDiagnosticsHeader) {
    throw std::runtime_error("read_diagnostics_csv: bad header");
  }
  std::vector<MetricsRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 12) throw std::runtime_error("read_diagnostics_csv: bad row");
    MetricsRecord r;
    r.iter = static_cast<std::size_t>(std::stoull(cells[0]));
    r.loss = std::stod(cells[1]);
    r.loss_F = std::stod(cells[2]);
    r.loss_R = std::stod(cells[3]);
    r.loss_T = std::stod(cells[4]);
    r.grad_ratio = std::stod(cells[5]);
    r.cos_RT = std::stod(cells[6]);
    r.cos_RF = std::stod(cells[7]);
    r.cos_TF = std::stod(cells[8]);
    r.conflicts = static_cast<std::size_t>(std::stoull(cells[9]));
    r.mae = std::stod(cells[10]);
    r.max_f = std::stod(cells[11]);
    out.push_back(r);
  }
  return out;
}

// ---- dataset manifest -----------------------------------------------------------

struct ManifestEntry {
  std::size_t index = 0;
  std::string path_R, path_T, path_GT;
};

inline void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_manifest: cannot open " + path);
  for (const auto& e : entries) {
    os << e.index << ',' << e.path_R << ',' << e.path_T << ',' << e.path_GT << "\n";
  }
  if (!os) throw std::runtime_error("write_manifest: write failed: " + path);
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_manifest: cannot open " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string cell;
    if (!std::getline(ls, cell, ',')) throw std::runtime_error("read_manifest: bad row");
    e.index = static_cast<std::size_t>(std::stoull(cell));
    if (!std::getline(ls, e.path_R, ',') || !std::getline(ls, e.path_T, ',') ||
        !std::getline(ls, e.path_GT)) {
      throw std::runtime_error("read_manifest: bad row");
    }
    out.push_back(std::move(e));
  }
  return out;
}

/// GT read back from PGM must be exactly binary again; 0 and 255 survive the
/// quantization untouched.
inline Sample load_sample(const ManifestEntry& e) {
  Sample s;
  s.I_R = read_pgm(e.path_R);
  s.I_T = read_pgm(e.path_T);
  s.GT = read_pgm(e.path_GT);
  for (double& v : s.GT.data()) v = v >= 0.5 ? 1.0 : 0.0;
  s.validate();
  return s;
}

}  // namespace gradweave
