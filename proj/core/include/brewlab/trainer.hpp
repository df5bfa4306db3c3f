#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "brewlab/data.hpp"
#include "brewlab/gradient_vector.hpp"
#include "brewlab/nn.hpp"
#include "brewlab/rng.hpp"

namespace brewlab {

/// Victim / pretraining schedule. `drop_epochs` are given on the reference
/// 40-epoch scale and multiplied by `epoch_scale` (rounded) before use.
struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  std::vector<std::size_t> drop_epochs{14, 24, 35};
  double drop_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool augment = true;
  std::size_t padding = 4;
  std::uint64_t seed = 0;
  double epoch_scale = 0.25;
  /// Fraction of the training set kept (drawn once, before training).
  double keep_fraction = 1.0;

  /// Drop epochs after scaling; these are the epochs at which the rate falls.
  std::vector<std::size_t> scaled_drops() const;
  /// Learning rate used throughout (0-based) epoch `epoch`.
  double lr_at(std::size_t epoch) const;
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Batch-level clipping plus Gaussian noise.
struct DPConfig {
  bool enabled = false;
  double clip = 1.0;
  double sigma = 0.0;
  void validate() const;

  friend bool operator==(const DPConfig&, const DPConfig&) = default;
};

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double validation_accuracy = 0.0;
  std::optional<double> alignment_adversarial;
  std::optional<double> alignment_original;
};

struct TrainTrace {
  std::vector<EpochStats> epochs;
  ModelParams final_params;
  std::size_t train_size = 0;
};

/// Observer of a training run. Called with the parameters before each step
/// and the step's data-loss gradient (before clipping, noise, weight decay).
class TrainMonitor {
 public:
  virtual ~TrainMonitor() = default;
  virtual void on_batch(std::size_t epoch, const ModelParams& params, const GradientVector& data_gradient) = 0;
  /// May fill the alignment fields of `stats`.
  virtual void on_epoch_end(std::size_t epoch, EpochStats& stats) = 0;
};

/// Clips `g` to norm at most dp.clip, then adds N(0, (dp.sigma * dp.clip)^2) per coordinate.
GradientVector dp_sgd_step(const GradientVector& g, const DPConfig& dp, Rng& rng);

/// Trains a fresh model built from (spec, config.seed) on `train`.
TrainTrace train_victim(const Dataset& train, const Dataset& validation, const ModelSpec& spec,
                        const TrainConfig& config, const DPConfig& dp = {}, TrainMonitor* monitor = nullptr);

/// Clean training; identical to train_victim without DP or monitor.
ModelParams pretrain_clean(const Dataset& train, const Dataset& validation, const ModelSpec& spec,
                           const TrainConfig& config);

/// Fraction of examples whose predicted class equals the label.
double accuracy(const ModelParams& params, const Dataset& data);

}  // namespace brewlab
