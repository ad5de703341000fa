// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "gradweave/datakit.hpp"
#include "gradweave/finite_diff.hpp"
#include "gradweave/gradsurgery.hpp"
#include "gradweave/network.hpp"

namespace gradweave {

/// Resolved configuration of one training run.
struct RunConfig {
  RunMode mode = RunMode::Baseline;
  double eta = 1e-3;
  std::size_t epochs = 20;
  std::size_t batch_size = 4;
  std::uint64_t seed = 1;
  SynthConfig synth;
  NetConfig net;
  std::size_t train_samples = 24;
  std::size_t eval_samples = 16;
  bool shuffle_projections = false;
  std::string out_dir;

  void validate() const {
    if (!(eta > 0.0)) throw std::invalid_argument("eta must be > 0");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch-size must be >= 1");
    if (train_samples < batch_size) {
      throw std::invalid_argument("train-samples must be >= batch-size");
    }
    if (eval_samples < 1) throw std::invalid_argument("eval-samples must be >= 1");
    synth.validate();
    net.validate();
    if (synth.H != net.H || synth.W != net.W) {
      throw std::invalid_argument("synth and net image sizes must agree");
    }
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Mean metrics of final_prediction over a sample set.
struct EvalMetrics {
  double mae = 0.0;
  double max_f = 0.0;
};

inline EvalMetrics evaluate(const ModelParams& m, const std::vector<Sample>& samples,
                            bool decoupled) {
  EvalMetrics e;
  for (const Sample& s : samples) {
    const StreamOutputs out = forward_all(s, m, decoupled);
    const Tensor pred = final_prediction(out.P_R, out.P_T, out.P_F);
    e.mae += mae(pred, s.GT);
    e.max_f += max_f_measure(pred, s.GT);
  }
  e.mae /= static_cast<double>(samples.size());
  e.max_f /= static_cast<double>(samples.size());
  return e;
}

struct RunResult {
  std::vector<MetricsRecord> diagnostics;
  EvalMetrics held_out;
  double median_grad_ratio_last_half = 0.0;
  double min_update_component_cos = 1.0;  // min over deconflicted steps
  ModelParams model;
};

/// Deterministic in-memory training: fixed seeds drive the model init, the
/// dataset, the epoch shuffles, and (if enabled) the projection order.
inline RunResult run_training(const RunConfig& cfg) {
  cfg.validate();
  const ModeFlags flags = flags_of(cfg.mode);

  SynthConfig train_synth = cfg.synth;
  const std::vector<Sample> train = generate_dataset(train_synth, cfg.train_samples);
  SynthConfig eval_synth = cfg.synth;
  eval_synth.seed = cfg.synth.seed + 1000003;  // held-out split
  const std::vector<Sample> eval_set = generate_dataset(eval_synth, cfg.eval_samples);

  RunResult res;
  res.model = init_model(cfg.net, cfg.seed);
  std::mt19937_64 order_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x2545f4914f6cdd1dULL);

  TrainStepConfig step;
  step.flags = flags;
  step.eta = cfg.eta;
  step.shuffle_projections = cfg.shuffle_projections;
  step.shuffle_rng = &shuffle_rng;

  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::size_t iter = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(idx.begin(), idx.end(), order_rng);
    for (std::size_t off = 0; off + cfg.batch_size <= idx.size(); off += cfg.batch_size) {
      std::vector<Sample> batch;
      batch.reserve(cfg.batch_size);
      for (std::size_t k = 0; k < cfg.batch_size; ++k) batch.push_back(train[idx[off + k]]);
      const StepReport rep = training_step(batch, res.model, step);
      res.min_update_component_cos =
          std::min(res.min_update_component_cos, rep.min_update_component_cos);

      EvalMetrics batch_metrics;
      for (const Sample& s : batch) {
        const StreamOutputs out = forward_all(s, res.model, flags.decoupled);
        const Tensor pred = final_prediction(out.P_R, out.P_T, out.P_F);
        batch_metrics.mae += mae(pred, s.GT);
        batch_metrics.max_f += max_f_measure(pred, s.GT);
      }
      batch_metrics.mae /= static_cast<double>(batch.size());
      batch_metrics.max_f /= static_cast<double>(batch.size());

      MetricsRecord rec;
      rec.iter = iter++;
      rec.loss = rep.loss;
      rec.loss_F = rep.loss_F;
      rec.loss_R = rep.loss_R;
      rec.loss_T = rep.loss_T;
      rec.grad_ratio = rep.grad_ratio;
      rec.cos_RT = rep.cos_RT;
      rec.cos_RF = rep.cos_RF;
      rec.cos_TF = rep.cos_TF;
      rec.conflicts = rep.conflicts;
      rec.mae = batch_metrics.mae;
      rec.max_f = batch_metrics.max_f;
      res.diagnostics.push_back(rec);
    }
  }
  res.held_out = evaluate(res.model, eval_set, flags.decoupled);

  std::vector<double> last_half;
  for (std::size_t i = res.diagnostics.size() / 2; i < res.diagnostics.size(); ++i) {
    last_half.push_back(res.diagnostics[i].grad_ratio);
  }
  res.median_grad_ratio_last_half = median(std::move(last_half));
  return res;
}

// ---- gradient audit -----------------------------------------------------------

struct GradcheckReport {
  bool pass = false;
  double worst_rel_err = 0.0;
  std::string worst_path;
  std::size_t worst_index = 0;
  std::string worst_stream;
  std::size_t checked = 0;
  std::size_t resampled = 0;
  double eps = 1e-5;
};

/// Compares tape gradients against central finite differences for every
/// stream loss over every trainable group, on random small models and
/// samples. Configurations too close to a mask flip (TopK tie or a budget
/// floor boundary) are resampled so the mask is locally constant, as the
/// oracle assumes. `inject_fault` corrupts one compared gradient entry to
/// prove the audit can fail.
inline GradcheckReport run_gradcheck(double eps = 1e-5, std::size_t n_models = 3,
                                     std::size_t coords_per_pair = 24,
                                     bool inject_fault = false, std::uint64_t seed = 7) {
  GradcheckReport rep;
  rep.eps = eps;
  rep.pass = true;

  NetConfig net;
  net.H = 16;
  net.W = 16;
  net.patch = 4;
  net.d = 8;
  net.layers = 2;
  net.dec_hidden = 8;
  net.adapter = AdapterConfig{8, 4};

  SynthConfig synth;
  synth.H = 16;
  synth.W = 16;
  synth.dominance = 0.7;
  synth.background_cue_strength = 0.5;

  // a single +-eps probe shifts any activation by well under 10*eps here, so
  // a 20*eps margin guarantees the mask cannot flip under the probe
  const double min_mask_margin = std::max(20.0 * eps, 1e-4);
  std::size_t built = 0;
  for (std::uint64_t attempt = 0; built < n_models && attempt < n_models + 400; ++attempt) {
    const std::uint64_t s = seed + attempt;
    const bool decoupled = built % 2 == 0;  // alternate adapter kinds
    ModelParams m = init_model(net, s);
    std::mt19937_64 rng(s * 2654435761ULL + 17);
    // fully random trainables; the training-time identity init would leave
    // zero gradients everywhere downstream of W_up
    visit_params(m, [&](const std::string& path, Tensor& t) {
      if (!starts_with(path, "backbone.")) {
        t = random_normal(t.shape(), 0.35, rng);
      }
    });
    synth.seed = s + 991;
    std::mt19937_64 data_rng(synth.seed);
    const Sample sample = generate_sample(synth, data_rng);

    ForwardTrace trace = trace_forward(sample, m, decoupled);
    if (decoupled && trace.graph.mask_decision_margin() < min_mask_margin) {
      ++rep.resampled;
      continue;
    }
    ++built;

    const GradientMap ad_F = trace.graph.backward(trace.L_F);
    const GradientMap ad_R = trace.graph.backward(trace.L_R);
    const GradientMap ad_T = trace.graph.backward(trace.L_T);

    // coordinate probes evaluate the fresh model directly
    std::vector<std::pair<std::string, Tensor*>> coords;
    visit_params(m, [&](const std::string& path, Tensor& t) {
      if (!starts_with(path, "backbone.")) coords.emplace_back(path, &t);
    });
    const auto loss_value = [&](int stream) {
      ForwardTrace tr = trace_forward(sample, m, decoupled);
      const Node n = stream == 0 ? tr.L_F : (stream == 1 ? tr.L_R : tr.L_T);
      return tr.graph.value(n)[0];
    };

    struct Combo {
      int stream;
      const GradientMap* ad;
      const char* stream_name;
      const char* prefix;
    };
    const std::vector<Combo> combos = {
        {0, &ad_F, "F", "theta_R."}, {0, &ad_F, "F", "theta_T."}, {0, &ad_F, "F", "theta_D."},
        {1, &ad_R, "R", "theta_R."}, {1, &ad_R, "R", "theta_D."},
        {2, &ad_T, "T", "theta_T."}, {2, &ad_T, "T", "theta_D."},
    };
    std::uniform_real_distribution<double> pick(0.0, 1.0);
    bool fault_pending = inject_fault;
    for (const Combo& combo : combos) {
      std::vector<std::pair<std::string, Tensor*>> group;
      for (auto& [path, t] : coords) {
        if (starts_with(path, combo.prefix)) group.emplace_back(path, t);
      }
      for (std::size_t k = 0; k < coords_per_pair; ++k) {
        auto& [path, tensor] = group[static_cast<std::size_t>(pick(rng) * group.size()) %
                                     group.size()];
        const std::size_t i =
            static_cast<std::size_t>(pick(rng) * tensor->size()) % tensor->size();
        const double saved = (*tensor)[i];
        (*tensor)[i] = saved + eps;
        const double fp = loss_value(combo.stream);
        (*tensor)[i] = saved - eps;
        const double fm = loss_value(combo.stream);
        (*tensor)[i] = saved;
        const double fd = (fp - fm) / (2.0 * eps);
        double ad = combo.ad->at(path)[i];
        if (fault_pending) {
          ad += 0.5 * std::abs(ad) + 0.1;
          fault_pending = false;
        }
        const double err = relative_error(ad, fd);
        ++rep.checked;
        if (err > rep.worst_rel_err) {
          rep.worst_rel_err = err;
          rep.worst_path = path;
          rep.worst_index = i;
          rep.worst_stream = combo.stream_name;
        }
      }
    }
  }
  if (built < n_models) {
    rep.pass = false;
    rep.worst_path = "(could not sample tie-free configurations)";
    return rep;
  }
  rep.pass = rep.worst_rel_err < 1e-4;
  return rep;
}

// ---- ablation grid -----------------------------------------------------------

/// The four experiment arms, fixed row order of the comparison table.
inline const std::vector<RunMode>& ablation_arms() {
  static const std::vector<RunMode> arms = {RunMode::Baseline, RunMode::Deconflict,
                                            RunMode::Decoupled, RunMode::Full};
  return arms;
}

struct ArmSummary {
  RunMode mode = RunMode::Baseline;
  double median_mae = 0.0;
  double median_max_f = 0.0;
  double median_grad_ratio = 0.0;
  std::vector<double> maes, max_fs, grad_ratios;  // per seed
};

/// Runs every arm over `n_seeds` consecutive seeds. Worker threads (capped by
/// `threads`) each own their runs; aggregation order is fixed, so results do
/// not depend on the thread count.
inline std::vector<ArmSummary> run_ablation(const RunConfig& base, std::size_t n_seeds,
                                            std::size_t threads) {
  if (n_seeds < 1) throw std::invalid_argument("run_ablation: need at least one seed");
  struct Job {
    std::size_t arm_idx;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  const auto& arms = ablation_arms();
  for (std::size_t a = 0; a < arms.size(); ++a) {
    for (std::size_t s = 0; s < n_seeds; ++s) {
      jobs.push_back({a, base.seed + s});
    }
  }
  struct JobResult {
    double mae = 0.0, max_f = 0.0, grad_ratio = 0.0;
  };
  std::vector<JobResult> results(jobs.size());
  std::mutex mu;
  std::size_t next = 0;
  const auto worker = [&]() {
    for (;;) {
      std::size_t j;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= jobs.size()) return;
        j = next++;
      }
      RunConfig cfg = base;
      cfg.mode = arms[jobs[j].arm_idx];
      cfg.seed = jobs[j].seed;
      cfg.synth.seed = base.synth.seed + jobs[j].seed;
      const RunResult r = run_training(cfg);
      results[j] = {r.held_out.mae, r.held_out.max_f, r.median_grad_ratio_last_half};
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t + 1 < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::vector<ArmSummary> out;
  for (std::size_t a = 0; a < arms.size(); ++a) {
    ArmSummary sum;
    sum.mode = arms[a];
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      if (jobs[j].arm_idx != a) continue;
      sum.maes.push_back(results[j].mae);
      sum.max_fs.push_back(results[j].max_f);
      sum.grad_ratios.push_back(results[j].grad_ratio);
    }
    sum.median_mae = median(sum.maes);
    sum.median_max_f = median(sum.max_fs);
    sum.median_grad_ratio = median(sum.grad_ratios);
    out.push_back(std::move(sum));
  }
  return out;
}

inline std::size_t thread_cap_from_env() {
  const char* env = std::getenv("GRADWEAVE_THREADS");
  if (env) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? hc : 1;
}

}  // namespace gradweave
