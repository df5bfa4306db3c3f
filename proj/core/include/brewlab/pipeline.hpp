#pragma once

#include <string>
#include <utility>
#include <vector>

#include "brewlab/analysis.hpp"
#include "brewlab/config.hpp"
#include "brewlab/package.hpp"

namespace brewlab {

/// Data splits and the model spec an experiment runs on.
struct Workspace {
  Dataset train;
  Dataset validation;
  ModelSpec spec;
};

/// Loads or synthesizes the data and derives the spec (including input
/// normalization from the clean training split when enabled).
Workspace load_workspace(const ExperimentConfig& config);

/// Victim schedule with the given seed.
TrainConfig victim_config(const ExperimentConfig& config, std::uint64_t seed);
/// Attacker's clean-model schedule for ensemble member `member`.
TrainConfig pretrain_config(const ExperimentConfig& config, std::size_t member);

/// Trains brew.ensemble clean models (in parallel).
std::vector<ModelParams> run_pretrain(const ExperimentConfig& config, const Workspace& ws, std::size_t threads);

/// Throws ConfigError unless the checkpoints match the workspace's spec and
/// the configured ensemble size.
void check_ensemble(const ExperimentConfig& config, const Workspace& ws, std::span<const ModelParams> ensemble);

std::vector<PoisonCase> sample_cases(const ExperimentConfig& config, const Workspace& ws);

/// Brews every case; restarts of one case run in parallel.
std::vector<PoisonPackage> run_brew(const ExperimentConfig& config, const Workspace& ws,
                                    std::span<const ModelParams> ensemble, std::size_t threads);

SuiteOptions suite_options(const ExperimentConfig& config, std::size_t threads);

struct Evaluation {
  EvalReport poisoned;
  /// Same cases and victim seeds with epsilon 0.
  EvalReport null_attack;
};
Evaluation run_evaluate(const ExperimentConfig& config, const Workspace& ws, std::span<const PoisonPackage> packages,
                        std::size_t threads, bool keep_params = false);

struct PipelineResult {
  std::vector<ModelParams> ensemble;
  std::vector<PoisonPackage> packages;
  Evaluation evaluation;
};
/// pretrain -> brew -> evaluate, all in memory.
PipelineResult run_pipeline(const ExperimentConfig& config, const Workspace& ws, std::size_t threads,
                            bool keep_params = false);

/// Writes eval_runs.csv, null_runs.csv, alignment.csv and summary.json to `dir`.
void write_evaluation(const std::string& dir, const ExperimentConfig& config,
                      std::span<const PoisonPackage> packages, const Evaluation& evaluation);

/// Checkpoints as `dir`/model_<k>.ckpt.
void save_ensemble(const std::string& dir, std::span<const ModelParams> ensemble);
std::vector<ModelParams> load_ensemble(const std::string& dir);
/// Packages as `dir`/case_<i>/.
void save_packages(const std::string& dir, std::span<const PoisonPackage> packages, const std::string& echo);
std::vector<PoisonPackage> load_packages(const std::string& dir, const Workspace& ws);

/// Feature-space filtering with each case's first victim, at every
/// configured fraction. Victims are the poisoned runs of `evaluation`
/// (which must have been produced with keep_params).
std::vector<std::pair<std::size_t, FilterReport>> run_filter_defense(const ExperimentConfig& config,
                                                                     std::span<const PoisonPackage> packages,
                                                                     const Workspace& ws,
                                                                     const EvalReport& poisoned);

std::vector<DPPoint> run_dp_defense(const ExperimentConfig& config, const Workspace& ws,
                                    std::span<const PoisonPackage> packages, std::size_t threads);

/// One axis of an ablation grid: a config field path and its values.
struct AblationAxis {
  std::string path;
  std::vector<std::string> values;
};
/// Grid manifest lines "section.key = v1, v2, ..."; "#" comments.
std::vector<AblationAxis> parse_grid(const std::string& text);

struct AblationCell {
  std::vector<std::pair<std::string, std::string>> assignment;
  std::string error;
  double avg_success = 0.0;
  double standard_error = 0.0;
  double null_success = 0.0;
  double validation_accuracy = 0.0;
  double mean_final_loss = 0.0;
};
/// Cartesian sweep; every cell runs the full pipeline from the same
/// experiment seed, so cells share case seeds. Failed cells keep their error.
std::vector<AblationCell> run_ablation(const ExperimentConfig& base, std::span<const AblationAxis> axes,
                                       std::size_t threads);
void write_ablation_csv(const std::string& path, std::span<const AblationAxis> axes,
                        std::span<const AblationCell> cells, const std::string& config_echo);

}  // namespace brewlab
