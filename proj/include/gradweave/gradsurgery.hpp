// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradweave/network.hpp"

namespace gradweave {

// ---- flat-vector helpers ----------------------------------------------------

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

/// Cosine similarity; zero-norm inputs count as similarity 0 (no conflict).
inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

/// Removes the component of g along `onto`: g - (g.onto / |onto|^2) onto.
inline std::vector<double> project_out(const std::vector<double>& g,
                                       const std::vector<double>& onto) {
  const double n2 = dot(onto, onto);
  if (n2 == 0.0) throw std::invalid_argument("project_out: zero-norm onto");
  const double c = dot(g, onto) / n2;
  std::vector<double> out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] - c * onto[i];
  return out;
}

// ---- gradient deconfliction -------------------------------------------------

struct DeconflictResult {
  std::vector<double> combined;                 // mean of the updated gradients
  std::vector<std::vector<double>> components;  // each G_i after its projections
  std::size_t projections = 0;
};

/// Pairwise deconfliction: each gradient drops its projections onto every
/// original gradient it conflicts with (cosine < 0), visiting the others in
/// ascending index order; the updated gradients are then averaged.
/// `shuffle_rng`, when given, randomizes the visiting order per gradient.
inline DeconflictResult grad_deconflict_full(const std::vector<std::vector<double>>& grads,
                                             std::mt19937_64* shuffle_rng = nullptr) {
  if (grads.empty()) throw std::invalid_argument("grad_deconflict: need at least one gradient");
  const std::size_t n = grads[0].size();
  for (const auto& g : grads) {
    if (g.size() != n) throw std::invalid_argument("grad_deconflict: length mismatch");
  }
  DeconflictResult r;
  r.components.reserve(grads.size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    std::vector<double> cur = grads[i];
    std::vector<std::size_t> order;
    for (std::size_t j = 0; j < grads.size(); ++j) {
      if (j != i) order.push_back(j);
    }
    if (shuffle_rng) std::shuffle(order.begin(), order.end(), *shuffle_rng);
    for (std::size_t j : order) {
      if (cosine_similarity(cur, grads[j]) < 0.0) {
        cur = project_out(cur, grads[j]);
        ++r.projections;
      }
    }
    r.components.push_back(std::move(cur));
  }
  r.combined.assign(n, 0.0);
  for (const auto& c : r.components) {
    for (std::size_t k = 0; k < n; ++k) r.combined[k] += c[k];
  }
  for (double& v : r.combined) v /= static_cast<double>(grads.size());
  return r;
}

inline std::vector<double> grad_deconflict(const std::vector<std::vector<double>>& grads,
                                           std::mt19937_64* shuffle_rng = nullptr) {
  return grad_deconflict_full(grads, shuffle_rng).combined;
}

// ---- per-stream, per-group gradients ----------------------------------------

/// Flat gradients of each loss stream restricted to the group it reaches.
/// Keys are exactly (F,R,T) x theta_D plus (F,R) x theta_R and (F,T) x theta_T;
/// a unimodal stream never touches the other modality's encoder.
struct GradientSet {
  std::vector<double> f_theta_R, r_theta_R;
  std::vector<double> f_theta_T, t_theta_T;
  std::vector<double> f_theta_D, r_theta_D, t_theta_D;
};

struct StreamLosses {
  double L = 0.0, L_F = 0.0, L_R = 0.0, L_T = 0.0;
};

/// One backward pass per stream loss, split by parameter-group prefix.
inline GradientSet grouped_gradients(const Sample& s, const ModelParams& m, bool decoupled,
                                     StreamLosses* losses = nullptr) {
  ForwardTrace t = trace_forward(s, m, decoupled);
  const GradientMap gF = t.graph.backward(t.L_F);
  const GradientMap gR = t.graph.backward(t.L_R);
  const GradientMap gT = t.graph.backward(t.L_T);
  if (losses) {
    losses->L_F = t.graph.value(t.L_F)[0];
    losses->L_R = t.graph.value(t.L_R)[0];
    losses->L_T = t.graph.value(t.L_T)[0];
    losses->L = t.graph.value(t.L)[0];
  }
  GradientSet out;
  out.f_theta_R = flatten_group(gF, m, "theta_R.");
  out.r_theta_R = flatten_group(gR, m, "theta_R.");
  out.f_theta_T = flatten_group(gF, m, "theta_T.");
  out.t_theta_T = flatten_group(gT, m, "theta_T.");
  out.f_theta_D = flatten_group(gF, m, "theta_D.");
  out.r_theta_D = flatten_group(gR, m, "theta_D.");
  out.t_theta_D = flatten_group(gT, m, "theta_D.");
  return out;
}

struct DeconflictedUpdates {
  std::vector<double> G_R, G_T, G_D;
  std::size_t projections = 0;
  double min_component_cos = 1.0;  // min cosine(applied update, component)
};

/// GradDeConflict over the two encoder pairs (unimodal stream first, fusion
/// second) and the decoder triple (R, T, F order).
inline DeconflictedUpdates deconflict_all(const GradientSet& gs,
                                          std::mt19937_64* shuffle_rng = nullptr) {
  DeconflictedUpdates u;
  const auto run = [&](const std::vector<std::vector<double>>& grads) {
    DeconflictResult r = grad_deconflict_full(grads, shuffle_rng);
    u.projections += r.projections;
    const double nc = norm(r.combined);
    for (const auto& comp : r.components) {
      const double denom = nc * norm(comp);
      if (denom > 0.0) {
        u.min_component_cos = std::min(u.min_component_cos, dot(r.combined, comp) / denom);
      }
    }
    return r.combined;
  };
  u.G_R = run({gs.r_theta_R, gs.f_theta_R});
  u.G_T = run({gs.t_theta_T, gs.f_theta_T});
  u.G_D = run({gs.r_theta_D, gs.t_theta_D, gs.f_theta_D});
  return u;
}

/// Plain SGD on the three trainable groups; the backbone never moves.
/// eta = 0 is an explicit no-op.
inline void sgd_update(ModelParams& m, const std::vector<double>& G_R,
                       const std::vector<double>& G_T, const std::vector<double>& G_D,
                       double eta) {
  if (eta < 0.0) throw std::invalid_argument("sgd_update: eta must be >= 0");
  apply_group_update(m, "theta_R.", G_R, eta);
  apply_group_update(m, "theta_T.", G_T, eta);
  apply_group_update(m, "theta_D.", G_D, eta);
}

// ---- training step -----------------------------------------------------------

/// Which of the three mechanisms a run enables.
struct ModeFlags {
  bool unimodal = false;
  bool deconflict = false;
  bool decoupled = false;
};

enum class RunMode { Baseline, Unimodal, Deconflict, Decoupled, Full };

inline ModeFlags flags_of(RunMode mode) {
  switch (mode) {
    case RunMode::Baseline:
      return {false, false, false};
    case RunMode::Unimodal:
      return {true, false, false};
    case RunMode::Deconflict:
      return {true, true, false};
    case RunMode::Decoupled:
      return {false, false, true};
    case RunMode::Full:
      return {true, true, true};
  }
  throw std::invalid_argument("flags_of: bad mode");
}

inline std::string mode_name(RunMode mode) {
  switch (mode) {
    case RunMode::Baseline:
      return "baseline";
    case RunMode::Unimodal:
      return "+unimodal";
    case RunMode::Deconflict:
      return "+deconflict";
    case RunMode::Decoupled:
      return "+decoupled";
    case RunMode::Full:
      return "full";
  }
  throw std::invalid_argument("mode_name: bad mode");
}

inline RunMode parse_mode(const std::string& s) {
  const std::string t = (!s.empty() && s[0] == '+') ? s.substr(1) : s;
  if (t == "baseline") return RunMode::Baseline;
  if (t == "unimodal") return RunMode::Unimodal;
  if (t == "deconflict") return RunMode::Deconflict;
  if (t == "decoupled") return RunMode::Decoupled;
  if (t == "full") return RunMode::Full;
  throw std::invalid_argument("unknown mode: " + s +
                              " (expected baseline, +unimodal, +deconflict, +decoupled, full)");
}

/// Per-step diagnostics: losses, the encoder gradient-magnitude ratio, the
/// decoder stream cosines, and deconfliction activity.
struct StepReport {
  double loss = 0.0, loss_F = 0.0, loss_R = 0.0, loss_T = 0.0;
  double grad_ratio = 0.0;  // ||G_R|| / ||G_T|| of the pre-deconfliction totals
  double cos_RT = 0.0, cos_RF = 0.0, cos_TF = 0.0;
  std::size_t conflicts = 0;
  double min_update_component_cos = 1.0;
};

struct TrainStepConfig {
  ModeFlags flags;
  double eta = 1e-3;
  bool shuffle_projections = false;
  std::mt19937_64* shuffle_rng = nullptr;
};

inline void add_into(std::vector<double>& acc, const std::vector<double>& v, double scale) {
  if (acc.empty()) acc.assign(v.size(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) acc[i] += scale * v[i];
}

inline std::vector<double> summed(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

/// One optimization step over a batch: forward + per-stream backward per
/// sample, batch-mean gradients, optional deconfliction, SGD update.
inline StepReport training_step(const std::vector<Sample>& batch, ModelParams& m,
                                const TrainStepConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("training_step: empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  GradientSet gs;
  StepReport rep;
  for (const Sample& s : batch) {
    StreamLosses sl;
    GradientSet one = grouped_gradients(s, m, cfg.flags.decoupled, &sl);
    rep.loss += inv * sl.L;
    rep.loss_F += inv * sl.L_F;
    rep.loss_R += inv * sl.L_R;
    rep.loss_T += inv * sl.L_T;
    add_into(gs.f_theta_R, one.f_theta_R, inv);
    add_into(gs.r_theta_R, one.r_theta_R, inv);
    add_into(gs.f_theta_T, one.f_theta_T, inv);
    add_into(gs.t_theta_T, one.t_theta_T, inv);
    add_into(gs.f_theta_D, one.f_theta_D, inv);
    add_into(gs.r_theta_D, one.r_theta_D, inv);
    add_into(gs.t_theta_D, one.t_theta_D, inv);
  }

  // totals that drive the update before any deconfliction
  const std::vector<double> total_R =
      cfg.flags.unimodal ? summed(gs.f_theta_R, gs.r_theta_R) : gs.f_theta_R;
  const std::vector<double> total_T =
      cfg.flags.unimodal ? summed(gs.f_theta_T, gs.t_theta_T) : gs.f_theta_T;
  const double nR = norm(total_R), nT = norm(total_T);
  rep.grad_ratio = (nR > 0.0 && nT > 0.0) ? nR / nT : 0.0;
  rep.cos_RT = cosine_similarity(gs.r_theta_D, gs.t_theta_D);
  rep.cos_RF = cosine_similarity(gs.r_theta_D, gs.f_theta_D);
  rep.cos_TF = cosine_similarity(gs.t_theta_D, gs.f_theta_D);

  if (cfg.flags.deconflict) {
    std::mt19937_64* rng = cfg.shuffle_projections ? cfg.shuffle_rng : nullptr;
    DeconflictedUpdates u = deconflict_all(gs, rng);
    rep.conflicts = u.projections;
    rep.min_update_component_cos = u.min_component_cos;
    sgd_update(m, u.G_R, u.G_T, u.G_D, cfg.eta);
  } else if (cfg.flags.unimodal) {
    sgd_update(m, total_R, total_T, summed(summed(gs.r_theta_D, gs.t_theta_D), gs.f_theta_D),
               cfg.eta);
  } else {
    sgd_update(m, gs.f_theta_R, gs.f_theta_T, gs.f_theta_D, cfg.eta);
  }
  return rep;
}

}  // namespace gradweave
