// SPDX-License-Identifier: Apache-2.0
//
// gradweave: experiment runner for two-modality encoder-decoder training with
// unimodal supervision, gradient deconfliction, and decoupled TopK adapters.
//
// Subcommands: train, eval, gradcheck, ablate. See README.md.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "gradweave/trainer.hpp"

namespace fs = std::filesystem;
using namespace gradweave;

namespace {

struct CliOptions {
  std::string mode = "baseline";
  double eta = 1e-3;
  std::size_t epochs = 20;
  std::size_t batch_size = 4;
  std::uint64_t seed = 1;
  double dominance = 0.5;
  double bg_cue = 0.0;
  std::string out = "out";
  bool shuffle_projections = false;
  double eps = 1e-5;
  std::size_t train_samples = 24;
  std::size_t eval_samples = 16;
  std::size_t seeds = 5;
  bool inject_fault = false;
  std::string ckpt_path;
  std::string manifest_path;
};

RunConfig make_run_config(const CliOptions& o) {
  RunConfig cfg;
  cfg.mode = parse_mode(o.mode);
  cfg.eta = o.eta;
  cfg.epochs = o.epochs;
  cfg.batch_size = o.batch_size;
  cfg.seed = o.seed;
  cfg.synth.dominance = o.dominance;
  cfg.synth.background_cue_strength = o.bg_cue;
  cfg.synth.seed = o.seed * 1001;
  cfg.train_samples = o.train_samples;
  cfg.eval_samples = o.eval_samples;
  cfg.shuffle_projections = o.shuffle_projections;
  cfg.out_dir = o.out;
  return cfg;
}

// flags win over the config file; the resolved values are echoed back out so
// a run directory doubles as a reusable --config input
void echo_config(const CliOptions& o, const std::string& path) {
  std::ofstream os(path);
  os << "mode = " << o.mode << "\n"
     << "eta = " << format_g9(o.eta) << "\n"
     << "epochs = " << o.epochs << "\n"
     << "batch-size = " << o.batch_size << "\n"
     << "seed = " << o.seed << "\n"
     << "dominance = " << format_g9(o.dominance) << "\n"
     << "bg-cue = " << format_g9(o.bg_cue) << "\n"
     << "train-samples = " << o.train_samples << "\n"
     << "eval-samples = " << o.eval_samples << "\n"
     << "shuffle-projections = " << (o.shuffle_projections ? "true" : "false") << "\n"
     << "seeds = " << o.seeds << "\n";
}

int validate_common(const CliOptions& o) {
  const auto fail = [](const std::string& msg) {
    std::cerr << "error: " << msg << "\n";
    return 2;
  };
  if (!(o.eta > 0.0)) return fail("--eta must be > 0 (got " + format_g9(o.eta) + ")");
  if (o.epochs < 1) return fail("--epochs must be >= 1");
  if (o.batch_size < 1) return fail("--batch-size must be >= 1");
  if (o.dominance < 0.0 || o.dominance > 1.0) return fail("--dominance must lie in [0,1]");
  if (o.bg_cue < 0.0 || o.bg_cue > 1.0) return fail("--bg-cue must lie in [0,1]");
  if (!(o.eps > 0.0)) return fail("--eps must be > 0");
  if (o.train_samples < o.batch_size) return fail("--train-samples must be >= --batch-size");
  if (o.eval_samples < 1) return fail("--eval-samples must be >= 1");
  if (o.seeds < 1) return fail("--seeds must be >= 1");
  return 0;
}

void write_eval_split(const RunConfig& cfg, const fs::path& dir) {
  SynthConfig eval_synth = cfg.synth;
  eval_synth.seed = cfg.synth.seed + 1000003;  // must match run_training's split
  const std::vector<Sample> eval_set = generate_dataset(eval_synth, cfg.eval_samples);
  fs::create_directories(dir);
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    ManifestEntry e;
    e.index = i;
    e.path_R = (dir / (std::to_string(i) + "_R.pgm")).string();
    e.path_T = (dir / (std::to_string(i) + "_T.pgm")).string();
    e.path_GT = (dir / (std::to_string(i) + "_GT.pgm")).string();
    write_pgm(eval_set[i].I_R, e.path_R);
    write_pgm(eval_set[i].I_T, e.path_T);
    write_pgm(eval_set[i].GT, e.path_GT);
    entries.push_back(std::move(e));
  }
  write_manifest(entries, (dir / "manifest.txt").string());
}

int cmd_train(const CliOptions& o) {
  if (int rc = validate_common(o)) return rc;
  RunConfig cfg = make_run_config(o);
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  fs::create_directories(cfg.out_dir);
  echo_config(o, (fs::path(cfg.out_dir) / "config.txt").string());

  const RunResult res = run_training(cfg);
  write_diagnostics_csv(res.diagnostics, (fs::path(cfg.out_dir) / "diag.csv").string());
  save_checkpoint(res.model, (fs::path(cfg.out_dir) / "model.ckpt").string());
  write_eval_split(cfg, fs::path(cfg.out_dir) / "data");

  std::ofstream summary((fs::path(cfg.out_dir) / "summary.txt").string());
  summary << "mode = " << mode_name(cfg.mode) << "\n"
          << "seed = " << cfg.seed << "\n"
          << "epochs = " << cfg.epochs << "\n"
          << "steps = " << res.diagnostics.size() << "\n"
          << "final_loss = " << format_g9(res.diagnostics.back().loss) << "\n"
          << "held_out_mae = " << format_g9(res.held_out.mae) << "\n"
          << "held_out_max_f = " << format_g9(res.held_out.max_f) << "\n"
          << "median_grad_ratio_last_half = " << format_g9(res.median_grad_ratio_last_half)
          << "\n";

  std::printf("mae=%.9g max_f=%.9g\n", res.held_out.mae, res.held_out.max_f);
  return 0;
}

int cmd_eval(const CliOptions& o) {
  if (int rc = validate_common(o)) return rc;
  RunConfig cfg = make_run_config(o);
  ModelParams model = init_model(cfg.net, 0);
  try {
    load_checkpoint(model, o.ckpt_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::vector<ManifestEntry> entries;
  try {
    entries = read_manifest(o.manifest_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  const bool decoupled = flags_of(cfg.mode).decoupled;
  fs::create_directories(o.out);
  std::ofstream csv((fs::path(o.out) / "metrics.csv").string());
  csv << "index,mae,max_f\n";
  double sum_mae = 0.0, sum_f = 0.0;
  for (const ManifestEntry& e : entries) {
    try {
      const Sample s = load_sample(e);
      const StreamOutputs out = forward_all(s, model, decoupled);
      const Tensor pred = final_prediction(out.P_R, out.P_T, out.P_F);
      const double m = mae(pred, s.GT);
      const double f = max_f_measure(pred, s.GT);
      write_pgm(pred, (fs::path(o.out) / ("pred_" + std::to_string(e.index) + ".pgm")).string());
      csv << e.index << ',' << format_g9(m) << ',' << format_g9(f) << "\n";
      sum_mae += m;
      sum_f += f;
    } catch (const std::exception& ex) {
      std::cerr << "error: sample " << e.index << ": " << ex.what() << "\n";
      return 1;
    }
  }
  if (entries.empty()) {
    std::cerr << "error: empty manifest\n";
    return 1;
  }
  std::printf("mae=%.9g max_f=%.9g\n", sum_mae / static_cast<double>(entries.size()),
              sum_f / static_cast<double>(entries.size()));
  return 0;
}

int cmd_gradcheck(const CliOptions& o) {
  if (int rc = validate_common(o)) return rc;
  std::printf("gradcheck eps=%.9g models=3 coords-per-pair=24\n", o.eps);
  const GradcheckReport rep = run_gradcheck(o.eps, 3, 24, o.inject_fault, o.seed);
  std::printf("checked=%zu resampled=%zu worst_rel_err=%.9g at %s[%zu] stream=%s\n", rep.checked,
              rep.resampled, rep.worst_rel_err, rep.worst_path.c_str(), rep.worst_index,
              rep.worst_stream.c_str());
  if (!rep.pass) {
    std::fprintf(stderr, "gradcheck FAILED: worst %s[%zu] rel err %.9g (threshold 1e-4)\n",
                 rep.worst_path.c_str(), rep.worst_index, rep.worst_rel_err);
    return 1;
  }
  std::printf("gradcheck OK\n");
  return 0;
}

int cmd_ablate(const CliOptions& o) {
  if (int rc = validate_common(o)) return rc;
  RunConfig base = make_run_config(o);
  base.synth.seed = 0;  // per-run seeds are derived from the run seed
  try {
    base.validate();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  fs::create_directories(o.out);
  echo_config(o, (fs::path(o.out) / "config.txt").string());
  const std::vector<ArmSummary> table = run_ablation(base, o.seeds, thread_cap_from_env());

  // fixed arm order: baseline, +deconflict, +decoupled, full
  std::ofstream csv((fs::path(o.out) / "ablation.csv").string());
  csv << "arm,median_mae,median_max_f,median_grad_ratio\n";
  for (const ArmSummary& arm : table) {
    csv << mode_name(arm.mode) << ',' << format_g9(arm.median_mae) << ','
        << format_g9(arm.median_max_f) << ',' << format_g9(arm.median_grad_ratio) << "\n";
    std::printf("%-11s median_mae=%.9g median_max_f=%.9g median_grad_ratio=%.9g\n",
                mode_name(arm.mode).c_str(), arm.median_mae, arm.median_max_f,
                arm.median_grad_ratio);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gradweave: two-modality training with gradient deconfliction"};
  app.fallthrough(true);
  app.set_config("--config", "", "key = value config file; command-line flags win");

  CliOptions o;
  app.add_option("--mode", o.mode,
                 "mechanisms: baseline, +unimodal, +deconflict, +decoupled, full")
      ->capture_default_str();
  app.add_option("--eta", o.eta, "SGD learning rate")->capture_default_str();
  app.add_option("--epochs", o.epochs, "training epochs")->capture_default_str();
  app.add_option("--batch-size", o.batch_size, "samples per step")->capture_default_str();
  app.add_option("--seed", o.seed, "run seed (model init, data, shuffles)")
      ->capture_default_str();
  app.add_option("--dominance", o.dominance, "modality-A signal advantage in [0,1]")
      ->capture_default_str();
  app.add_option("--bg-cue", o.bg_cue, "background cue strength in [0,1]")
      ->capture_default_str();
  app.add_option("--out", o.out, "output directory")->capture_default_str();
  app.add_flag("--shuffle-projections", o.shuffle_projections,
               "randomize the deconfliction projection order");
  app.add_option("--eps", o.eps, "finite-difference step for gradcheck")->capture_default_str();
  app.add_option("--train-samples", o.train_samples, "training set size")->capture_default_str();
  app.add_option("--eval-samples", o.eval_samples, "held-out set size")->capture_default_str();
  app.add_option("--seeds", o.seeds, "seeds per ablation arm")->capture_default_str();

  CLI::App* train = app.add_subcommand("train", "train one run and write artifacts");
  CLI::App* eval_cmd = app.add_subcommand("eval", "score a checkpoint over a dataset manifest");
  eval_cmd->add_option("checkpoint", o.ckpt_path, "model checkpoint path")->required();
  eval_cmd->add_option("manifest", o.manifest_path, "dataset manifest path")->required();
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  gradcheck->add_flag("--inject-fault", o.inject_fault,
                      "corrupt one gradient to prove the audit fails");
  CLI::App* ablate = app.add_subcommand("ablate", "run the four-arm comparison grid");
  app.require_subcommand(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (train->parsed()) return cmd_train(o);
    if (eval_cmd->parsed()) return cmd_eval(o);
    if (gradcheck->parsed()) return cmd_gradcheck(o);
    if (ablate->parsed()) return cmd_ablate(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
