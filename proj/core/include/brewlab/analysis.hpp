#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "brewlab/data.hpp"
#include "brewlab/nn.hpp"
#include "brewlab/package.hpp"
#include "brewlab/trainer.hpp"

namespace brewlab {

// ---- success evaluation ----------------------------------------------------------

struct VictimRun {
  std::size_t case_index = 0;
  std::size_t victim_index = 0;
  std::uint64_t seed = 0;
  /// Predicted class of each target.
  std::vector<int> predictions;
  /// Fraction of targets classified as the adversarial class.
  double success = 0.0;
  double validation_accuracy = 0.0;
  bool diverged = false;
  std::string error;
  std::vector<EpochStats> epochs;
  /// Kept only when SuiteOptions::keep_params is set.
  std::optional<ModelParams> final_params;
};

struct EvalReport {
  std::size_t cases = 0;
  std::size_t victims = 0;
  std::vector<VictimRun> runs;  // ordered by (case, victim)
  std::vector<double> case_success;
  double avg_success = 0.0;
  /// Standard error over the case averages.
  double standard_error = 0.0;
  double mean_validation_accuracy = 0.0;
  std::size_t diverged_runs = 0;
};

struct SuiteOptions {
  std::size_t victims = 4;
  std::uint64_t seed = 0;
  DPConfig dp;
  bool monitor_alignment = false;
  bool keep_params = false;
  std::size_t threads = 1;
};

/// Seed of victim `v` in case `c`; independent of everything but the suite seed.
std::uint64_t victim_seed(std::uint64_t suite_seed, std::size_t case_index, std::size_t victim_index);

/// Trains `victims` fresh models per package on the poisoned training set and
/// aggregates success over cases: mean and standard error of the per-case
/// success rates. Diverged runs are recorded (success 0) without aborting.
EvalReport evaluate_case_suite(std::span<const PoisonPackage> packages, const Dataset& train,
                               const Dataset& validation, const ModelSpec& spec, const TrainConfig& train_config,
                               const SuiteOptions& options);

/// Mean and standard error (sample std / sqrt(n); 0 for n < 2).
std::pair<double, double> mean_and_standard_error(std::span<const double> values);

// ---- gradient alignment ----------------------------------------------------------

/// Bound of the adversarial-descent condition at one training step.
struct BoundSample {
  std::size_t epoch = 0;
  double cosine = 0.0;
  /// beta (1 - B) |grad L| / |grad L_adv|, as the condition is printed.
  double printed = 0.0;
  /// beta (1 - B) |grad L_adv| / |grad L|, the ratio the descent argument uses.
  double descent = 0.0;
};

/// Per-epoch mean cosine between the adversarial target gradient and each
/// minibatch gradient, plus the same with the targets' original label.
class AlignmentMonitor final : public TrainMonitor {
 public:
  AlignmentMonitor(Tensor targets, int adversarial_class, int original_class, double beta = 0.9);

  void on_batch(std::size_t epoch, const ModelParams& params, const GradientVector& data_gradient) override;
  void on_epoch_end(std::size_t epoch, EpochStats& stats) override;

  const std::vector<double>& adversarial_series() const { return adv_series_; }
  const std::vector<double>& original_series() const { return orig_series_; }
  const std::vector<BoundSample>& bound_trace() const { return bounds_; }
  std::size_t skipped_batches() const { return skipped_; }

 private:
  Tensor targets_;
  std::vector<int> adv_labels_;
  std::vector<int> orig_labels_;
  double beta_;
  double adv_sum_ = 0.0, orig_sum_ = 0.0;
  std::size_t adv_count_ = 0, orig_count_ = 0, skipped_ = 0;
  std::vector<double> adv_series_, orig_series_;
  std::vector<BoundSample> bounds_;
};

// ---- descent verifier ------------------------------------------------------------

struct DescentCheckReport {
  std::size_t instances = 0;
  std::size_t steps = 0;
  std::size_t premise_satisfied = 0;
  std::size_t premise_unsatisfied = 0;
  /// Steps taken inside the bound after which L_adv did not strictly decrease.
  std::size_t violations = 0;
  /// Same check with step sizes from the printed ratio |grad L| / |grad L_adv|.
  std::size_t printed_form_violations = 0;
  std::size_t printed_form_steps = 0;
};

struct QuadraticInstance {
  std::size_t dimension = 0;
  std::vector<double> a_matrix;  // row-major SPD, L(theta) = 1/2 |theta - b|_A^2
  std::vector<double> b_matrix;  // row-major SPD, L_adv(theta) = 1/2 |theta - a|_B^2
  std::vector<double> a_center;  // a
  std::vector<double> b_center;  // b
  std::vector<double> start;
};

/// Gradient descent on L with steps u * beta * cos * |grad L_adv| / (|grad L| * Lip)
/// for u in [0.5, 1), checking that L_adv strictly decreases whenever the
/// step-size premise can be met (cos > 0).
DescentCheckReport verify_descent(const QuadraticInstance& instance, double beta, std::size_t steps,
                                  std::uint64_t seed);
/// Random instances of the given dimension with random SPD curvatures.
DescentCheckReport prop1_toy_verifier(std::size_t dimension, std::size_t instances, std::uint64_t seed,
                                      double beta = 0.9, std::size_t steps = 50);

// ---- defenses --------------------------------------------------------------------

/// Per class, removes the `fraction` of examples farthest (Euclidean) from
/// their class centroid in feature space. Returns the removal mask.
std::vector<bool> filter_by_centroid(const Tensor& features, std::span<const int> labels, std::size_t classes,
                                     double fraction);

struct FilterReport {
  double fraction = 0.0;
  std::size_t poisons = 0;
  std::size_t poison_class_clean = 0;
  std::size_t poisons_removed = 0;
  /// Clean images of the poison class that were removed.
  std::size_t clean_removed = 0;
  std::size_t total_removed = 0;
  double random_poisons_removed = 0.0;
  double random_clean_removed = 0.0;
};

FilterReport feature_filter_defense(const Dataset& poisoned, const ModelParams& victim, const PoisonCase& c,
                                    double fraction);
FilterReport filter_report(const std::vector<bool>& removed, std::span<const int> labels, const PoisonCase& c,
                           double fraction);

struct DPPoint {
  double sigma = 0.0;
  EvalReport report;
};

/// One suite per sigma with clip fixed at `clip`; sigma = 0 runs undefended.
std::vector<DPPoint> dp_defense_sweep(std::span<const PoisonPackage> packages, const Dataset& train,
                                      const Dataset& validation, const ModelSpec& spec,
                                      const TrainConfig& train_config, std::span<const double> sigmas,
                                      const SuiteOptions& options, double clip = 1.0);

}  // namespace brewlab
