#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "brewlab/brewer.hpp"
#include "brewlab/data.hpp"
#include "brewlab/nn.hpp"
#include "brewlab/trainer.hpp"

namespace brewlab {

enum class DataSource { kSynthetic, kCifar };

struct DatasetConfig {
  DataSource source = DataSource::kSynthetic;
  std::string cifar_dir = "data/cifar-10-batches-bin";
  std::size_t cifar_train_per_class = 1000;
  std::size_t cifar_validation_per_class = 100;
  /// Training split parameters; `synth.per_class` is the training count.
  SynthParams synth;
  std::size_t synth_validation_per_class = 50;
  /// Standardize model inputs with the clean training set's channel statistics.
  bool normalize = true;

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct ModelConfig {
  Architecture arch = Architecture::kConvNet;
  std::vector<std::size_t> widths{64, 128, 128, 256, 256};
  WidthScale width_scale{1, 8};
  std::size_t kernel = 3;
  std::size_t pool = 3;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct PretrainConfig {
  /// Training schedule of the attacker's clean models; epochs may differ
  /// from the victims' (pretraining-epoch ablation).
  std::size_t epochs = 10;

  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

struct EvalConfig {
  std::size_t cases = 5;
  std::size_t victims = 4;
  bool alignment = true;
  std::vector<double> filter_fractions{0.1, 0.2};
  std::vector<double> dp_sigmas{0.0, 0.01, 0.05};

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

/// Fully elaborated experiment. Every field has a default; a config file
/// only lists what it changes.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  DatasetConfig dataset;
  ModelConfig model;
  ThreatModel threat;
  BrewConfig brew;
  TrainConfig train;
  PretrainConfig pretrain;
  DPConfig dp;
  EvalConfig eval;
  std::string output_dir = "out";

  /// Throws ConfigError naming the field path ("train.epochs: ...").
  void validate() const;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Parses the line-oriented format: "[section]" headers, "key = value"
/// lines, "#" comments. Unknown sections or keys and malformed values throw
/// ConfigError with the field path and line number. The result is validated.
ExperimentConfig parse_config(const std::string& text, const ExperimentConfig& base = {});
ExperimentConfig load_config(const std::string& path);

/// Every field of `config` in the same format; parse_config of the result
/// reproduces `config` exactly.
std::string echo_config(const ExperimentConfig& config);

/// Applies one "section.key=value" assignment, as used by ablation grids.
void set_config_field(ExperimentConfig& config, const std::string& path, const std::string& value);

/// Seeds derived from the experiment seed; each consumer has its own stream.
std::uint64_t pretrain_seed(const ExperimentConfig& config, std::size_t member);
std::uint64_t case_seed(const ExperimentConfig& config, std::size_t case_index);
std::uint64_t brew_seed(const ExperimentConfig& config, std::size_t case_index);
std::uint64_t suite_seed(const ExperimentConfig& config);

}  // namespace brewlab
