#include <gtest/gtest.h>

#include <cmath>

#include "brewlab/analysis.hpp"
#include "brewlab/errors.hpp"
#include "test_util.hpp"

namespace brewlab {
namespace {

using testing::tiny_synth;

TEST(Aggregation, MeanAndStandardErrorOverCases) {
  const double ones[] = {1.0, 1.0, 1.0};
  EXPECT_EQ(mean_and_standard_error(ones), std::make_pair(1.0, 0.0));
  const double mixed[] = {0.0, 0.5, 1.0};
  auto [mean, se] = mean_and_standard_error(mixed);
  EXPECT_DOUBLE_EQ(mean, 0.5);
  EXPECT_DOUBLE_EQ(se, 0.5 / std::sqrt(3.0));
  const double single[] = {0.25};
  EXPECT_EQ(mean_and_standard_error(single), std::make_pair(0.25, 0.0));
}

TEST(Aggregation, VictimSeedsDependOnlyOnSuiteSeedAndPosition) {
  EXPECT_EQ(victim_seed(5, 1, 2), victim_seed(5, 1, 2));
  EXPECT_NE(victim_seed(5, 1, 2), victim_seed(5, 2, 1));
  EXPECT_NE(victim_seed(5, 1, 2), victim_seed(6, 1, 2));
}

/// Small MLP world on flattened images in which a victim trains in milliseconds.
struct SuiteWorld {
  Dataset train, val;
  ModelSpec spec;
  TrainConfig train_config;

  SuiteWorld() {
    train = synth_dataset(tiny_synth(20));
    val = synth_dataset(tiny_synth(10), Split::kValidation);
    train.image_shape = val.image_shape = {train.image_size()};
    spec = ModelSpec::mlp({train.image_size(), 16, 3});
    train_config.epochs = 6;
    train_config.batch_size = 10;
    train_config.learning_rate = 0.05;
    train_config.drop_epochs = {};
    train_config.augment = false;
  }

  /// Null package whose single target is validation image `target` with
  /// original label `yt` and adversarial label `yadv`.
  PoisonPackage package(std::size_t target, int yt, int yadv) const {
    PoisonCase c;
    c.target_class = yt;
    c.adversarial_class = yadv;
    c.target_indices = {target};
    c.target_ids = {val.ids[target]};
    for (std::size_t i = 0; i < train.size() && c.poison_indices.empty(); ++i) {
      if (train.labels[i] == yadv) c.poison_indices = {i};
    }
    c.poison_ids = {train.ids[c.poison_indices[0]]};
    PoisonPackage p;
    p.poison_case = c;
    p.threat = ThreatModel{.epsilon_pixels = 0.0};
    p.delta = PoisonDelta::zeros(train.image_shape, c.poison_indices);
    p.initial_losses = p.final_losses = {1.0};
    return p;
  }

  std::size_t first_of_class(int label) const {
    for (std::size_t i = 0; i < val.size(); ++i) {
      if (val.labels[i] == label) return i;
    }
    return 0;
  }
};

TEST(Suite, SuccessCountsOnlyTheAdversarialClass) {
  SuiteWorld w;
  // A class-1 image presented as y_t = 0: victims call it class 1 = y_adv.
  const auto hit = w.package(w.first_of_class(1), 0, 1);
  // A class-0 image with y_t = 0: victims keep the original label.
  const auto miss = w.package(w.first_of_class(0), 0, 2);
  SuiteOptions options;
  options.victims = 2;
  options.seed = 3;

  const PoisonPackage all_hit[] = {hit, hit};
  auto report = evaluate_case_suite(all_hit, w.train, w.val, w.spec, w.train_config, options);
  EXPECT_EQ(report.avg_success, 1.0);
  EXPECT_EQ(report.standard_error, 0.0);
  for (const auto& run : report.runs) EXPECT_EQ(run.predictions, std::vector<int>{1});

  const PoisonPackage mixed[] = {hit, miss};
  report = evaluate_case_suite(mixed, w.train, w.val, w.spec, w.train_config, options);
  EXPECT_EQ(report.case_success, (std::vector<double>{1.0, 0.0}));
  for (std::size_t v = 0; v < 2; ++v) EXPECT_EQ(report.runs[2 + v].predictions, std::vector<int>{0});
  EXPECT_DOUBLE_EQ(report.avg_success, 0.5);
  // Standard error over the two case averages, not over the four runs.
  EXPECT_DOUBLE_EQ(report.standard_error, 0.5);
  EXPECT_GT(report.mean_validation_accuracy, 0.8);
}

TEST(Suite, RunsAreOrderedAndThreadCountInvariant) {
  SuiteWorld w;
  const PoisonPackage pkgs[] = {w.package(w.first_of_class(1), 1, 0), w.package(w.first_of_class(2), 2, 1)};
  SuiteOptions options;
  options.victims = 2;
  options.seed = 9;
  options.monitor_alignment = true;
  auto one = evaluate_case_suite(pkgs, w.train, w.val, w.spec, w.train_config, options);
  options.threads = 3;
  auto three = evaluate_case_suite(pkgs, w.train, w.val, w.spec, w.train_config, options);
  ASSERT_EQ(one.runs.size(), 4u);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(one.runs[j].case_index, j / 2);
    EXPECT_EQ(one.runs[j].victim_index, j % 2);
    EXPECT_EQ(one.runs[j].seed, victim_seed(9, j / 2, j % 2));
    EXPECT_EQ(one.runs[j].predictions, three.runs[j].predictions);
    EXPECT_EQ(one.runs[j].validation_accuracy, three.runs[j].validation_accuracy);
    ASSERT_EQ(one.runs[j].epochs.size(), 6u);
    for (std::size_t e = 0; e < 6; ++e) {
      ASSERT_TRUE(one.runs[j].epochs[e].alignment_adversarial.has_value());
      EXPECT_EQ(*one.runs[j].epochs[e].alignment_adversarial, *three.runs[j].epochs[e].alignment_adversarial);
      EXPECT_LE(std::abs(*one.runs[j].epochs[e].alignment_adversarial), 1.0);
      EXPECT_LE(std::abs(*one.runs[j].epochs[e].alignment_original), 1.0);
    }
  }
}

TEST(Suite, DivergedRunsAreRecordedNotFatal) {
  SuiteWorld w;
  w.train_config.learning_rate = 1e200;
  const PoisonPackage pkgs[] = {w.package(w.first_of_class(1), 1, 0)};
  SuiteOptions options;
  options.victims = 2;
  auto report = evaluate_case_suite(pkgs, w.train, w.val, w.spec, w.train_config, options);
  EXPECT_EQ(report.diverged_runs, 2u);
  for (const auto& run : report.runs) {
    EXPECT_TRUE(run.diverged);
    EXPECT_FALSE(run.error.empty());
    EXPECT_EQ(run.success, 0.0);
  }
}

TEST(Alignment, TargetOnlyBatchGivesOneAndNegationGivesMinusOne) {
  auto spec = ModelSpec::convnet({3, 8, 8}, 3, {1, 16});
  spec.pool = 2;
  auto params = build(spec, 4);
  Dataset val = synth_dataset(tiny_synth(5), Split::kValidation);
  const std::size_t idx[] = {2};
  Tensor target = val.batch(idx);
  AlignmentMonitor monitor(target, 1, val.labels[2]);
  auto g = loss_gradient(params, target, {1});
  monitor.on_batch(0, params, g);
  EpochStats first;
  monitor.on_epoch_end(0, first);
  EXPECT_NEAR(*first.alignment_adversarial, 1.0, 1e-12);

  for (auto& v : g.values) v = -v;
  monitor.on_batch(1, params, g);
  EpochStats second;
  monitor.on_epoch_end(1, second);
  EXPECT_NEAR(*second.alignment_adversarial, -1.0, 1e-12);
  ASSERT_EQ(monitor.adversarial_series().size(), 2u);
  ASSERT_EQ(monitor.bound_trace().size(), 2u);
  EXPECT_NEAR(monitor.bound_trace()[0].descent, 0.9, 1e-12);
}

TEST(Alignment, EpochValueIsTheMeanOverBatchesAndZeroGradientsAreSkipped) {
  auto spec = ModelSpec::convnet({3, 8, 8}, 3, {1, 16});
  spec.pool = 2;
  auto params = build(spec, 4);
  Dataset val = synth_dataset(tiny_synth(5), Split::kValidation);
  const std::size_t idx[] = {0};
  Tensor target = val.batch(idx);
  AlignmentMonitor monitor(target, 2, val.labels[0]);
  auto g = loss_gradient(params, target, {2});
  monitor.on_batch(0, params, g);  // +1
  auto neg = g;
  for (auto& v : neg.values) v = -v;
  monitor.on_batch(0, params, neg);  // -1
  monitor.on_batch(0, params, g);    // +1
  auto zero = g;
  std::fill(zero.values.begin(), zero.values.end(), 0.0);
  monitor.on_batch(0, params, zero);  // skipped
  EpochStats stats;
  monitor.on_epoch_end(0, stats);
  EXPECT_NEAR(*stats.alignment_adversarial, 1.0 / 3.0, 1e-12);
  EXPECT_EQ(monitor.skipped_batches(), 1u);
  EXPECT_EQ(monitor.bound_trace().size(), 3u);
}

// ---- descent verifier --------------------------------------------------------------

std::vector<double> identity(std::size_t d) {
  std::vector<double> m(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) m[i * d + i] = 1.0;
  return m;
}

TEST(Descent, PerfectlyAlignedObjectivesAlwaysDescend) {
  QuadraticInstance q{3, identity(3), identity(3), {1.0, -2.0, 0.5}, {1.0, -2.0, 0.5}, {4.0, 4.0, -4.0}};
  auto r = verify_descent(q, 0.9, 30, 1);
  EXPECT_EQ(r.violations, 0u);
  EXPECT_EQ(r.premise_unsatisfied, 0u);
  EXPECT_EQ(r.premise_satisfied, r.steps);
  EXPECT_EQ(r.steps, 30u);
}

TEST(Descent, OrthogonalGradientsMakeThePremiseVacuous) {
  // At theta = (1, 0): grad L = (1, 0), grad L_adv = (0, -1).
  QuadraticInstance q{2, identity(2), identity(2), {1.0, 1.0}, {0.0, 0.0}, {1.0, 0.0}};
  auto r = verify_descent(q, 0.9, 1, 1);
  EXPECT_EQ(r.premise_satisfied, 0u);
  EXPECT_EQ(r.premise_unsatisfied, 1u);
  EXPECT_EQ(r.violations, 0u);
}

TEST(Descent, RandomQuadraticsHaveNoViolations) {
  auto r = prop1_toy_verifier(10, 100, 2024, 0.9);
  EXPECT_EQ(r.instances, 100u);
  EXPECT_GT(r.premise_satisfied, 0u);
  EXPECT_EQ(r.violations, 0u);
}

// ---- filtering defense -------------------------------------------------------------

PoisonCase case_with_poisons(std::vector<std::size_t> poisons, int adversarial_class) {
  PoisonCase c;
  c.adversarial_class = adversarial_class;
  c.poison_indices = std::move(poisons);
  return c;
}

TEST(Filter, PoisonsAtTheCentroidAreNeverRemoved) {
  // Class 0: four clean points in +-pairs around (1, 2) plus two poisons at (1, 2).
  const std::vector<double> f{0.0, 2.0, 2.0, 2.0, 1.0, 0.0, 1.0, 4.0, 1.0, 2.0, 1.0, 2.0, 9.0, 9.0};
  Tensor features({7, 2}, f);
  const std::vector<int> labels{0, 0, 0, 0, 0, 0, 1};
  auto c = case_with_poisons({4, 5}, 0);
  for (double fraction : {0.2, 0.5}) {
    auto removed = filter_by_centroid(features, labels, 2, fraction);
    auto r = filter_report(removed, labels, c, fraction);
    EXPECT_EQ(r.poisons_removed, 0u) << fraction;
    EXPECT_EQ(r.poisons, 2u);
    EXPECT_EQ(r.poison_class_clean, 4u);
  }
}

TEST(Filter, RemovesTheFarthestFractionPerClass) {
  const std::vector<double> f{0.0, 1.0, 2.0, 10.0, 5.0, 5.1, 4.9, -20.0, 5.0, 5.0};
  Tensor features({10, 1}, f);
  const std::vector<int> labels{0, 0, 0, 0, 1, 1, 1, 1, 1, 1};
  auto removed = filter_by_centroid(features, labels, 2, 0.25);
  // round(0.25 * 4) = 1 from class 0 (the 10), round(0.25 * 6) = 2 from class 1.
  EXPECT_EQ(removed, (std::vector<bool>{false, false, false, true, false, true, false, true, false, false}));
}

TEST(Filter, BaselineArithmeticIsExact) {
  std::vector<int> labels(40);
  for (std::size_t i = 0; i < 40; ++i) labels[i] = static_cast<int>(i % 4);
  auto c = case_with_poisons({1, 5, 9}, 1);
  std::vector<bool> removed(40, false);
  removed[1] = removed[13] = removed[2] = true;
  auto r = filter_report(removed, labels, c, 0.2);
  EXPECT_EQ(r.poisons, 3u);
  EXPECT_EQ(r.poison_class_clean, 7u);
  EXPECT_EQ(r.poisons_removed, 1u);
  EXPECT_EQ(r.clean_removed, 1u);
  EXPECT_EQ(r.total_removed, 3u);
  EXPECT_EQ(r.random_poisons_removed, 0.2 * 3.0);
  EXPECT_EQ(r.random_clean_removed, 0.2 * 7.0);
}

TEST(Filter, NoiseFeaturesRemovePoisonsAtTheRandomRate) {
  const std::size_t n = 600, p = 150;
  const double fraction = 0.2;
  std::size_t total = 0;
  const std::size_t trials = 20;
  for (std::size_t t = 0; t < trials; ++t) {
    Tensor features({n, 4});
    Rng rng = Rng::stream(7, "noise-features", {static_cast<std::uint64_t>(t)});
    for (auto& v : features.data()) v = rng.normal();
    std::vector<int> labels(n, 0);
    std::vector<std::size_t> poisons;
    for (std::size_t i = 0; i < p; ++i) poisons.push_back(i * 4);
    auto removed = filter_by_centroid(features, labels, 1, fraction);
    total += filter_report(removed, labels, case_with_poisons(poisons, 0), fraction).poisons_removed;
  }
  // Binomial approximation of the pooled count over all trials.
  const double expect = fraction * p * trials;
  const double sigma = std::sqrt(p * trials * fraction * (1.0 - fraction));
  EXPECT_LE(std::abs(static_cast<double>(total) - expect), 3.0 * sigma) << total << " vs " << expect;
}

TEST(Filter, InvalidFractionIsRejected) {
  Tensor features({2, 1}, std::vector<double>{0.0, 1.0});
  const std::vector<int> labels{0, 0};
  EXPECT_THROW(filter_by_centroid(features, labels, 1, 1.5), ConfigError);
}

// ---- DP sweep ----------------------------------------------------------------------

TEST(DpSweep, ZeroSigmaMatchesUndefendedAndHugeSigmaApproachesChance) {
  SuiteWorld w;
  const PoisonPackage pkgs[] = {w.package(w.first_of_class(1), 1, 0)};
  SuiteOptions options;
  options.victims = 2;
  options.seed = 4;
  const double sigmas[] = {0.0, 1e4};
  auto curve = dp_defense_sweep(pkgs, w.train, w.val, w.spec, w.train_config, sigmas, options);
  auto plain = evaluate_case_suite(pkgs, w.train, w.val, w.spec, w.train_config, options);
  ASSERT_EQ(curve.size(), 2u);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_EQ(curve[0].report.runs[j].predictions, plain.runs[j].predictions);
    EXPECT_EQ(curve[0].report.runs[j].validation_accuracy, plain.runs[j].validation_accuracy);
  }
  EXPECT_GT(plain.mean_validation_accuracy, 0.8);
  EXPECT_LT(std::abs(curve[1].report.mean_validation_accuracy - 1.0 / 3.0), 0.2);
}

}  // namespace
}  // namespace brewlab
