#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "brewlab/augment.hpp"
#include "brewlab/data.hpp"
#include "brewlab/gradient_vector.hpp"
#include "brewlab/nn.hpp"
#include "brewlab/rng.hpp"

namespace brewlab {

/// Attacker capabilities. `epsilon_pixels` is on the 0-255 scale.
struct ThreatModel {
  double epsilon_pixels = 16.0;
  double budget = 0.01;
  std::size_t targets = 1;

  double epsilon() const { return epsilon_pixels / 255.0; }
  void validate() const;

  friend bool operator==(const ThreatModel&, const ThreatModel&) = default;
};

/// Perturbations of the poison images, one block per poison, in the order of
/// `indices` (training-set indices).
struct PoisonDelta {
  Shape image_shape;
  std::vector<std::size_t> indices;
  std::vector<double> values;

  std::size_t count() const { return indices.size(); }
  std::size_t image_size() const { return numel(image_shape); }
  std::span<const double> block(std::size_t k) const;
  std::span<double> block(std::size_t k);
  double max_abs() const;

  static PoisonDelta zeros(const Shape& image_shape, std::vector<std::size_t> indices);
};

/// Copy of `train` with the perturbations added to the poison images.
Dataset apply_poison(const Dataset& train, const PoisonDelta& delta);

enum class Objective { kCosine, kEuclidean, kFeatureCollision, kBullseye };
std::string to_string(Objective o);
Objective parse_objective(const std::string& s);

struct BrewConfig {
  std::size_t restarts = 4;
  std::size_t steps = 100;
  /// Signed-Adam step as a fraction of epsilon.
  double step_size = 0.1;
  std::size_t ensemble = 1;
  Objective objective = Objective::kCosine;
  bool augment = true;
  std::size_t padding = 4;
  std::size_t poison_batch = 128;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Step-size decay by 10x after ceil(3M/8), ceil(5M/8), ceil(7M/8) steps.
  bool decay = true;
  /// Noise-aware counter to DP training: clip and perturb the poison
  /// gradient inside the objective, redrawn at every evaluation.
  bool dp_counter = false;
  double counter_clip = 1.0;
  double counter_sigma = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  /// Step length (in [0,1] pixel units) of step `k` for bound `epsilon`.
  double step_length(std::size_t k, double epsilon) const;

  friend bool operator==(const BrewConfig&, const BrewConfig&) = default;
};

/// Gradient of the summed adversarial loss of the targets, per model.
std::vector<GradientVector> target_gradient(std::span<const ModelParams> ensemble, const Dataset& validation,
                                            const PoisonCase& c);

/// The matching objective B for one case and ensemble.
///
/// Cosine: 1 - cos(target gradient, mean poison gradient). Euclidean: squared
/// distance between the two. Feature collision: mean squared feature distance
/// of each poison to the target features. Bullseye: squared distance of the
/// mean poison feature to the target features. Poison gradients exclude
/// weight decay. Values are averaged over ensemble members.
class MatchingObjective {
 public:
  MatchingObjective(std::vector<ModelParams> ensemble, const Dataset& train, const Dataset& validation,
                    const PoisonCase& c, const BrewConfig& config, double loss_scale = 1.0);

  struct Evaluation {
    double loss = 0.0;
    /// d loss / d delta for the evaluated poisons (batch x image), if requested.
    std::vector<double> gradient;
  };

  /// B for the poisons at positions `batch` (0-based into the case's poison
  /// list) with perturbations `delta` (one block per position), optionally
  /// augmented. `counter_rng` supplies DP-counter noise when enabled.
  Evaluation evaluate(std::span<const std::size_t> batch, std::span<const double> delta,
                      std::span<const AugmentParams> augment, bool want_gradient,
                      Rng* counter_rng = nullptr) const;

  /// B over all poisons without augmentation or counter noise.
  double full_loss(const PoisonDelta& delta) const;

  const std::vector<GradientVector>& target_gradients() const { return target_grads_; }
  std::size_t poison_count() const { return poison_idx_.size(); }
  const Shape& image_shape() const { return image_shape_; }
  std::span<const std::size_t> poison_indices() const { return poison_idx_; }

 private:
  double member_loss(std::size_t m, std::span<const std::size_t> batch, std::span<const double> delta,
                     std::span<const AugmentParams> augment, std::vector<double>* grad, Rng* counter_rng) const;

  std::vector<ModelParams> ensemble_;
  std::vector<GradientVector> target_grads_;
  std::vector<Tensor> target_features_;
  std::vector<double> poison_pixels_;
  std::vector<int> poison_labels_;
  std::vector<std::size_t> poison_idx_;
  Shape image_shape_;
  BrewConfig config_;
  double loss_scale_ = 1.0;
};

/// Adam moments for signed updates.
struct SignedAdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;
};

/// delta -= step * sign(mhat / (sqrt(vhat) + eps)); coordinates with a zero
/// direction stay put.
void signed_adam_step(std::span<double> delta, std::span<const double> gradient, SignedAdamState& state,
                      double step, const BrewConfig& config);

/// Clamps to [-eps, eps], then keeps x + delta inside [0, 1].
void project(std::span<double> delta, std::span<const double> images, double epsilon);
void project(PoisonDelta& delta, const Dataset& train, const ThreatModel& threat);
/// Throws ConstraintViolation unless the perturbations are feasible.
void check_constraints(const PoisonDelta& delta, const Dataset& train, double epsilon);

struct RestartDiagnostics {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> step_losses;
  std::size_t constraint_checks = 0;
  std::string error;
};

struct MatchResult {
  PoisonDelta delta;
  std::vector<double> final_losses;
  std::size_t chosen = 0;
  std::vector<RestartDiagnostics> restarts;
  std::size_t constraint_checks = 0;
};

/// Poison brewing: R restarts of M signed-Adam steps on B from random
/// feasible starts; returns the restart with the lowest final B (lowest
/// index on ties). Restarts run on up to `threads` threads.
MatchResult brew(std::span<const ModelParams> ensemble, const Dataset& train, const Dataset& validation,
                 const PoisonCase& c, const ThreatModel& threat, const BrewConfig& config,
                 std::size_t threads = 1);

}  // namespace brewlab
