#include <iostream>

#include <CLI11.hpp>

#include "crqat/crqat.hpp"

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfigError = 2, kMissingPrerequisite = 3, kNumericFailure = 4 };

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
};

crqat::ExperimentConfig load(const GlobalOptions& g) {
  crqat::ExperimentConfig cfg = g.config.empty() ? crqat::ExperimentConfig{} : crqat::load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

std::vector<std::uint64_t> seeds_for(const GlobalOptions& g, const crqat::ExperimentConfig& cfg) {
  if (g.seed) return {*g.seed};
  return cfg.seeds;
}

void print(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Curriculum and relational quantization-aware training on a toy open-vocabulary detector"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "Flat JSON object of dotted config keys")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Run seed (overrides experiment.seed and restricts multi-seed commands)");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset (manifest and records)");
  auto* teacher = app.add_subcommand("train-teacher", "Train the full-precision teacher");

  auto* ptq = app.add_subcommand("ptq", "Post-training quantization of the teacher");
  std::string calibrator = "all";
  ptq->add_option("--calibrator", calibrator, "minmax, percentile, mse or all")->capture_default_str();

  auto* qat = app.add_subcommand("qat", "Quantization-aware training (naive baseline unless --method is given)");
  std::string method = "qat";
  qat->add_option("--method", method, "qat, cqat, kd-only, cr-qat, cr-qat-no-trkd, cr-qat-region-text, cr-qat-region-region, cr-qat-3stage")
      ->capture_default_str();

  auto* crqat_cmd = app.add_subcommand("cr-qat", "Two-stage curriculum QAT with feature and text-relational distillation");
  std::optional<std::size_t> stop_after;
  bool resume = false;
  crqat_cmd->add_option("--stop-after-stage", stop_after, "Stop once this stage (1-based) has finished");
  crqat_cmd->add_flag("--resume", resume, "Continue from the latest stage checkpoint");

  auto* ablate = app.add_subcommand("ablate", "Run one ablation axis across seeds");
  std::string axis;
  ablate->add_option("--axis", axis, "curriculum-kd, trkd-variant, stage-count or granularity")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a finished run's checkpoint");
  std::string run = "teacher";
  eval->add_option("--run", run, "Run directory name under seed-<s>/")->capture_default_str();

  auto* analyze = app.add_subcommand("analyze", "Distortion diagnostics and cross-seed summary");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    const crqat::ExperimentConfig cfg = load(g);
    const crqat::Experiment exp(cfg, g.out);
    if (gen->parsed()) {
      exp.generate_data();
      print(crqat::dataset_manifest(exp.dataset()));
    } else if (teacher->parsed()) {
      print(exp.train_teacher(cfg.seed));
    } else if (ptq->parsed()) {
      nlohmann::json all = nlohmann::json::array();
      const std::vector<std::string> names = calibrator == "all" ? std::vector<std::string>{"minmax", "percentile", "mse"} : std::vector<std::string>{calibrator};
      for (const auto& c : names) {
        crqat::Calibrator cal;
        try {
          cal = crqat::parse_calibrator(c);
        } catch (const std::invalid_argument& e) {
          throw crqat::ConfigError(e.what());
        }
        all.push_back(exp.run_ptq(cfg.seed, cal));
      }
      print(all);
    } else if (qat->parsed()) {
      print(exp.run_qat(cfg.seed, crqat::find_method(method)));
    } else if (crqat_cmd->parsed()) {
      crqat::Experiment::RunControl rc;
      rc.stop_after_stage = stop_after;
      rc.resume = resume;
      print(exp.run_qat(cfg.seed, crqat::find_method("cr-qat"), rc));
    } else if (ablate->parsed()) {
      print(crqat::run_ablation(exp, axis, seeds_for(g, cfg)));
    } else if (eval->parsed()) {
      const crqat::Model m = exp.load_run(cfg.seed, run);
      const auto r = exp.evaluate(m);
      nlohmann::json j{{"run", run}, {"seed", cfg.seed}, {"ap50", {{"val_base", r.ap50_base}, {"val_novel", r.ap50_novel}}}};
      if (run != "teacher") j["distortion"] = crqat::distortion_to_json(exp.diagnose(m, exp.load_teacher(cfg.seed)));
      print(j);
    } else if (analyze->parsed()) {
      print(crqat::analyze(exp, seeds_for(g, cfg)));
    }
    return kOk;
  } catch (const crqat::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const crqat::MissingPrerequisite& e) {
    std::cerr << "missing prerequisite: " << e.what() << '\n';
    return kMissingPrerequisite;
  } catch (const crqat::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumericFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
