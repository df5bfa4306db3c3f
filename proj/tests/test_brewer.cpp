#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "brewlab/brewer.hpp"
#include "brewlab/errors.hpp"
#include "brewlab/gradcheck.hpp"
#include "brewlab/package.hpp"
#include "brewlab/trainer.hpp"
#include "test_util.hpp"

namespace brewlab {
namespace {

using testing::random_tensor;
using testing::tiny_synth;

Dataset flat(Dataset d) {
  d.image_shape = {d.image_size()};
  return d;
}

/// Dataset of `n` random flat images of dimension `dim` with the given labels.
Dataset random_flat(std::size_t n, std::size_t dim, std::size_t classes, std::uint64_t seed) {
  Dataset d;
  d.image_shape = {dim};
  d.classes = classes;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim; ++j) d.pixels.push_back(rng.uniform(0.1, 0.9));
    d.labels.push_back(static_cast<int>(i % classes));
    d.ids.push_back(i);
  }
  return d;
}

PoisonCase manual_case(const Dataset& train, const Dataset& val, std::vector<std::size_t> targets,
                       std::vector<std::size_t> poisons, int adversarial_class) {
  PoisonCase c;
  c.target_class = val.labels[targets[0]];
  c.adversarial_class = adversarial_class;
  c.target_indices = std::move(targets);
  c.poison_indices = std::move(poisons);
  for (auto i : c.target_indices) c.target_ids.push_back(val.ids[i]);
  for (auto i : c.poison_indices) c.poison_ids.push_back(train.ids[i]);
  c.budget = static_cast<double>(c.poison_count()) / static_cast<double>(train.size());
  return c;
}

BrewConfig plain_config(Objective objective = Objective::kCosine) {
  BrewConfig c;
  c.objective = objective;
  c.augment = false;
  c.restarts = 1;
  c.steps = 10;
  return c;
}

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

// ---- target gradient ---------------------------------------------------------------

TEST(TargetGradient, SingleTargetMatchesFiniteDifferences) {
  Dataset val = random_flat(4, 2, 2, 1);
  Dataset train = random_flat(4, 2, 2, 2);
  auto model = build(ModelSpec::mlp({2, 4, 2}), 0);
  auto c = manual_case(train, val, {0}, {1}, 1);
  const ModelParams ensemble[] = {model};
  auto g = target_gradient(ensemble, val, c)[0];
  const Tensor x = val.batch(c.target_indices);
  auto report = finite_diff_check(
      [&](const Tensor& t, Tensor* grad) {
        ModelParams p = model;
        p.theta = t.vector();
        double loss = 0.0;
        auto gg = loss_gradient(p, x, {1}, true, &loss);
        if (grad) *grad = Tensor({gg.size()}, gg.values);
        return loss;
      },
      Tensor({model.count()}, model.theta));
  ASSERT_EQ(report.coordinates.size(), g.size());
  for (const auto& coord : report.coordinates) EXPECT_EQ(coord.analytic, g.values[coord.index]);
  EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(TargetGradient, TwoIdenticalTargetsDoubleTheGradient) {
  Dataset val = random_flat(3, 2, 2, 1);
  std::copy_n(val.image(0).begin(), 2, val.image(2).begin());
  Dataset train = random_flat(4, 2, 2, 2);
  auto model = build(ModelSpec::mlp({2, 4, 2}), 0);
  const ModelParams ensemble[] = {model};
  auto one = target_gradient(ensemble, val, manual_case(train, val, {0}, {1}, 1))[0];
  auto two = target_gradient(ensemble, val, manual_case(train, val, {0, 2}, {1}, 1))[0];
  for (std::size_t i = 0; i < one.size(); ++i) EXPECT_EQ(two.values[i], 2.0 * one.values[i]);
}

TEST(TargetGradient, UniformLogitsGiveSoftmaxMinusOneHot) {
  Dataset val = random_flat(2, 3, 4, 1);
  Dataset train = random_flat(4, 3, 4, 2);
  auto model = build(ModelSpec::mlp({3, 4}), 0);
  std::fill(model.theta.begin(), model.theta.end(), 0.0);
  const ModelParams ensemble[] = {model};
  auto g = target_gradient(ensemble, val, manual_case(train, val, {0}, {1}, 2))[0];
  auto bias = g.slice(1);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(bias[k], 0.25 - (k == 2 ? 1.0 : 0.0));
  auto weight = g.slice(0);
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(weight[k * 3 + j], bias[k] * val.image(0)[j]);
  }
}

// ---- matching objective ------------------------------------------------------------

TEST(Matching, InsertingTheTargetGivesZeroCosineLoss) {
  Dataset val = random_flat(4, 2, 2, 1);
  Dataset train = random_flat(6, 2, 2, 2);
  // Poison 1 (label 1) is replaced by target 0 of class 0, relabelled as y_adv = 1.
  std::copy_n(val.image(0).begin(), 2, train.image(1).begin());
  auto model = build(ModelSpec::mlp({2, 4, 2}), 0);
  auto c = manual_case(train, val, {0}, {1}, 1);
  MatchingObjective objective({model}, train, val, c, plain_config());
  EXPECT_NEAR(objective.full_loss(PoisonDelta::zeros(train.image_shape, {1})), 0.0, 1e-10);
}

TEST(Matching, AntipodalGradientsGiveTwo) {
  // Zero-weight linear model with two classes: softmax is (1/2, 1/2), so the
  // gradient of label 0 is the exact negation of the gradient of label 1.
  Dataset val = random_flat(2, 3, 2, 1);
  Dataset train = random_flat(4, 3, 2, 2);
  std::copy_n(val.image(0).begin(), 3, train.image(2).begin());  // train[2] has label 0
  auto model = build(ModelSpec::mlp({3, 2}), 0);
  std::fill(model.theta.begin(), model.theta.end(), 0.0);
  auto c = manual_case(train, val, {0}, {2}, 1);
  MatchingObjective objective({model}, train, val, c, plain_config());
  EXPECT_NEAR(objective.full_loss(PoisonDelta::zeros(train.image_shape, {2})), 2.0, 1e-12);
}

struct MlpFixture {
  Dataset train = random_flat(12, 2, 2, 7);
  Dataset val = random_flat(4, 2, 2, 8);
  ModelParams model = build(ModelSpec::mlp({2, 4, 2}), 0);
  PoisonCase c = manual_case(train, val, {0}, {1, 3, 5}, 1);
  std::vector<double> delta = random_tensor({6}, 9, -0.05, 0.05).vector();

  Tensor poisoned_batch() const {
    Tensor x = train.batch(c.poison_indices);
    for (std::size_t i = 0; i < delta.size(); ++i) x[i] += delta[i];
    return x;
  }
};

TEST(Matching, CosineMatchesExplicitGradientVectors) {
  MlpFixture f;
  MatchingObjective objective({f.model}, f.train, f.val, f.c, plain_config());
  const auto batch = iota_n(3);
  const double b = objective.evaluate(batch, f.delta, {}, false).loss;
  auto target = loss_gradient(f.model, f.val.batch(f.c.target_indices), {1}, true);
  auto poison = loss_gradient(f.model, f.poisoned_batch(), {1, 1, 1});
  EXPECT_NEAR(b, 1.0 - *cosine(target.values, poison.values), 1e-12);
  EXPECT_GE(b, 0.0);
  EXPECT_LE(b, 2.0);
}

TEST(Matching, EuclideanMatchesExplicitGradientVectors) {
  MlpFixture f;
  MatchingObjective objective({f.model}, f.train, f.val, f.c, plain_config(Objective::kEuclidean));
  const double b = objective.evaluate(iota_n(3), f.delta, {}, false).loss;
  auto target = loss_gradient(f.model, f.val.batch(f.c.target_indices), {1}, true);
  auto poison = loss_gradient(f.model, f.poisoned_batch(), {1, 1, 1});
  double expect = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) expect += std::pow(poison.values[i] - target.values[i], 2);
  EXPECT_NEAR(b, expect, 1e-12);
}

TEST(Matching, FeatureObjectivesMatchExplicitFeatures) {
  MlpFixture f;
  const Tensor ft = penultimate_features(f.model, f.val.batch(f.c.target_indices));
  const Tensor fp = penultimate_features(f.model, f.poisoned_batch());
  const std::size_t w = ft.numel();
  double collision = 0.0;
  std::vector<double> mean(w, 0.0);
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t j = 0; j < w; ++j) {
      collision += std::pow(fp[k * w + j] - ft[j], 2) / 3.0;
      mean[j] += fp[k * w + j] / 3.0;
    }
  }
  double bullseye = 0.0;
  for (std::size_t j = 0; j < w; ++j) bullseye += std::pow(mean[j] - ft[j], 2);
  MatchingObjective fc({f.model}, f.train, f.val, f.c, plain_config(Objective::kFeatureCollision));
  MatchingObjective be({f.model}, f.train, f.val, f.c, plain_config(Objective::kBullseye));
  EXPECT_NEAR(fc.evaluate(iota_n(3), f.delta, {}, false).loss, collision, 1e-12);
  EXPECT_NEAR(be.evaluate(iota_n(3), f.delta, {}, false).loss, bullseye, 1e-12);
}

TEST(Matching, CosineIsInvariantToLossScaleButEuclideanIsNot) {
  MlpFixture f;
  for (auto kind : {Objective::kCosine, Objective::kEuclidean}) {
    MatchingObjective base({f.model}, f.train, f.val, f.c, plain_config(kind));
    MatchingObjective scaled({f.model}, f.train, f.val, f.c, plain_config(kind), 3.7);
    const double a = base.evaluate(iota_n(3), f.delta, {}, false).loss;
    const double b = scaled.evaluate(iota_n(3), f.delta, {}, false).loss;
    if (kind == Objective::kCosine) {
      EXPECT_NEAR(a, b, 1e-10);
    } else {
      EXPECT_NEAR(b, 3.7 * 3.7 * a, 1e-10 * b);
    }
  }
}

TEST(Matching, CosineLossStaysInRange) {
  MlpFixture f;
  MatchingObjective objective({f.model}, f.train, f.val, f.c, plain_config());
  for (std::uint64_t s = 0; s < 30; ++s) {
    auto d = random_tensor({6}, 100 + s, -0.1, 0.1).vector();
    const double b = objective.evaluate(iota_n(3), d, {}, false).loss;
    EXPECT_GE(b, 0.0);
    EXPECT_LE(b, 2.0);
  }
}

TEST(Matching, GradientMatchesFiniteDifferencesOnMlp) {
  Dataset train = random_flat(6, 2, 2, 3);
  Dataset val = random_flat(4, 2, 2, 4);
  auto model = build(ModelSpec::mlp({2, 4, 2}), 0);
  auto c = manual_case(train, val, {0}, {1}, 1);
  MatchingObjective objective({model}, train, val, c, plain_config());
  const std::size_t batch[] = {0};
  auto report = finite_diff_check(
      [&](const Tensor& d, Tensor* grad) {
        auto e = objective.evaluate(batch, d.data(), {}, grad != nullptr);
        if (grad) *grad = Tensor(d.shape(), e.gradient);
        return e.loss;
      },
      random_tensor({2}, 5, -0.05, 0.05));
  EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(Matching, AugmentedConvNetGradientMatchesFiniteDifferences) {
  SynthParams p = tiny_synth(10);
  p.height = p.width = 9;
  Dataset train = synth_dataset(p);
  Dataset val = synth_dataset(p, Split::kValidation);
  auto c = sample_case(train, val, 0.1, 1, 5);
  auto model = build(ModelSpec::convnet({3, 9, 9}, 3, {1, 16}), 6);
  BrewConfig config = plain_config();
  config.augment = true;
  config.padding = 2;
  MatchingObjective objective({model}, train, val, c, config);
  const std::size_t batch[] = {0, 2};
  Rng rng(7);
  const AugmentParams augs[] = {draw_continuous(rng, 2), draw_continuous(rng, 2)};
  std::vector<std::size_t> coords;
  for (int i = 0; i < 20; ++i) coords.push_back(rng.below(2 * 243));
  auto report = finite_diff_check(
      [&](const Tensor& d, Tensor* grad) {
        auto e = objective.evaluate(batch, d.data(), augs, grad != nullptr);
        if (grad) *grad = Tensor(d.shape(), e.gradient);
        return e.loss;
      },
      random_tensor({2 * 243}, 8, -0.03, 0.03), 1e-5, coords);
  EXPECT_TRUE(report.passed(1e-4)) << report.max_rel_error << " kinks " << report.kinks;
}

TEST(Matching, ZeroTargetGradientNamesTheTargetSide) {
  Dataset val = random_flat(2, 2, 2, 1);
  Dataset train = random_flat(4, 2, 2, 2);
  auto model = build(ModelSpec::mlp({2, 2}), 0);
  std::fill(model.theta.begin(), model.theta.end(), 0.0);
  model.theta[4] = 1000.0;  // class 0 saturates: softmax is exactly one-hot
  model.theta[5] = -1000.0;
  auto c = manual_case(train, val, {1}, {1}, 0);
  MatchingObjective objective({model}, train, val, c, plain_config());
  try {
    objective.full_loss(PoisonDelta::zeros(train.image_shape, {1}));
    FAIL() << "expected DegenerateGradientError";
  } catch (const DegenerateGradientError& e) {
    EXPECT_NE(std::string(e.what()).find("target gradient"), std::string::npos) << e.what();
  }
}

TEST(Matching, DpCounterRedrawsNoise) {
  MlpFixture f;
  BrewConfig config = plain_config();
  config.dp_counter = true;
  config.counter_clip = 0.01;
  config.counter_sigma = 0.5;
  MatchingObjective objective({f.model}, f.train, f.val, f.c, config);
  Rng a(1), b(2);
  const double la = objective.evaluate(iota_n(3), f.delta, {}, false, &a).loss;
  const double lb = objective.evaluate(iota_n(3), f.delta, {}, false, &b).loss;
  EXPECT_NE(la, lb);

  config.counter_clip = 1e9;
  config.counter_sigma = 0.0;
  MatchingObjective inert({f.model}, f.train, f.val, f.c, config);
  MatchingObjective plain({f.model}, f.train, f.val, f.c, plain_config());
  EXPECT_NEAR(inert.evaluate(iota_n(3), f.delta, {}, false, &a).loss,
              plain.evaluate(iota_n(3), f.delta, {}, false).loss, 1e-15);
}

// ---- optimizer and projection ------------------------------------------------------

TEST(SignedAdam, FirstStepMovesAgainstTheGradientSign) {
  std::vector<double> delta{0.0, 0.5, -0.25, 1.0};
  const std::vector<double> g{3.0, -1e-9, 0.0, 2.5};
  SignedAdamState state;
  signed_adam_step(delta, g, state, 0.01, BrewConfig{});
  EXPECT_EQ(delta, (std::vector<double>{-0.01, 0.51, -0.25, 0.99}));
}

TEST(SignedAdam, ZeroGradientLeavesDeltaUnchanged) {
  std::vector<double> delta{0.1, -0.2};
  SignedAdamState state;
  for (int k = 0; k < 3; ++k) signed_adam_step(delta, std::vector<double>{0.0, 0.0}, state, 0.1, BrewConfig{});
  EXPECT_EQ(delta, (std::vector<double>{0.1, -0.2}));
}

TEST(SignedAdam, ThreeStepsOnQuadraticMatchHandTrace) {
  // f(d) = 1/2 (d0 - 0.15)^2 + 1/2 (d1 + 0.05)^2 from d = 0 with step 0.1.
  // Coordinate 0: g = -0.15, -0.05, +0.05; first moments -0.015, -0.0185,
  // -0.01165 keep the sign, so momentum carries it past the minimum.
  // Coordinate 1: g = +0.05, -0.05, +0.05; moments 0.005, -0.0005, 0.00455.
  std::vector<double> delta{0.0, 0.0};
  SignedAdamState state;
  const double expect0[] = {0.1, 0.2, 0.3};
  const double expect1[] = {-0.1, 0.0, -0.1};
  for (int k = 0; k < 3; ++k) {
    const std::vector<double> g{delta[0] - 0.15, delta[1] + 0.05};
    signed_adam_step(delta, g, state, 0.1, BrewConfig{});
    EXPECT_DOUBLE_EQ(delta[0], expect0[k]) << k;
    EXPECT_NEAR(delta[1], expect1[k], 1e-17) << k;
  }
}

TEST(StepSchedule, DecaysTenfoldAtThreeEighthsFiveEighthsSevenEighths) {
  BrewConfig c;
  c.steps = 100;
  c.step_size = 0.1;
  const double eps = 16.0 / 255.0;
  EXPECT_EQ(c.step_length(0, eps), 0.1 * eps);
  EXPECT_EQ(c.step_length(37, eps), 0.1 * eps);
  EXPECT_NEAR(c.step_length(38, eps), 0.01 * eps, 1e-18);
  EXPECT_NEAR(c.step_length(62, eps), 0.01 * eps, 1e-18);
  EXPECT_NEAR(c.step_length(63, eps), 0.001 * eps, 1e-18);
  EXPECT_NEAR(c.step_length(88, eps), 0.0001 * eps, 1e-18);
  c.decay = false;
  EXPECT_EQ(c.step_length(99, eps), 0.1 * eps);
}

TEST(Project, ClampsToEpsilonThenPixelRange) {
  std::vector<double> d{0.3};
  project(d, std::vector<double>{0.5}, 0.1);
  EXPECT_EQ(d[0], 0.1);
  d = {0.1};
  project(d, std::vector<double>{0.95}, 0.2);
  EXPECT_NEAR(d[0], 0.05, 1e-15);
  EXPECT_LE(0.95 + d[0], 1.0);
  d = {-0.2};
  project(d, std::vector<double>{0.1}, 0.15);
  EXPECT_EQ(d[0], -0.1);
}

TEST(Project, IsIdempotentAndFeasibleOnRandomInputs) {
  Rng rng(11);
  const double eps = 16.0 / 255.0;
  std::vector<double> d(10000), x(10000);
  for (std::size_t i = 0; i < d.size(); ++i) {
    x[i] = rng.uniform();
    d[i] = rng.uniform(-0.5, 0.5);
  }
  project(d, x, eps);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_LE(std::abs(d[i]), eps);
    EXPECT_GE(x[i] + d[i], 0.0);
    EXPECT_LE(x[i] + d[i], 1.0);
  }
  auto again = d;
  project(again, x, eps);
  EXPECT_EQ(again, d);
}

TEST(Project, ConstraintCheckRejectsInfeasibleDelta) {
  Dataset train = random_flat(3, 2, 2, 1);
  auto delta = PoisonDelta::zeros(train.image_shape, {1});
  delta.values[0] = 0.5;
  EXPECT_THROW(check_constraints(delta, train, 0.1), ConstraintViolation);
  project(delta, train, ThreatModel{.epsilon_pixels = 25.5});
  EXPECT_NO_THROW(check_constraints(delta, train, 0.1));
}

// ---- brewing -----------------------------------------------------------------------

struct BlobFixture {
  Dataset train, val;
  ModelParams model;
  BlobFixture() {
    SynthParams p = tiny_synth(30);
    train = flat(synth_dataset(p));
    val = flat(synth_dataset(p, Split::kValidation));
    auto spec = ModelSpec::mlp({train.image_size(), 16, p.classes});
    TrainConfig tc;
    tc.epochs = 5;
    tc.batch_size = 16;
    tc.learning_rate = 0.05;
    tc.drop_epochs = {};
    tc.augment = false;
    tc.seed = 1;
    model = pretrain_clean(train, val, spec, tc);
  }
};

TEST(Brew, ZeroStepsReturnsBestRandomStart) {
  BlobFixture f;
  auto c = sample_case(f.train, f.val, 0.05, 1, 3);
  BrewConfig config = plain_config();
  config.restarts = 3;
  config.steps = 0;
  config.seed = 4;
  const ThreatModel threat{.epsilon_pixels = 16.0, .budget = 0.05};
  const ModelParams ensemble[] = {f.model};
  auto result = brew(ensemble, f.train, f.val, c, threat, config);
  ASSERT_EQ(result.final_losses.size(), 3u);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(result.restarts[r].initial_loss, result.restarts[r].final_loss);
    EXPECT_LE(result.final_losses[result.chosen], result.final_losses[r]);
  }
  // The chosen delta is the projected uniform draw of its restart.
  Rng init = Rng::stream(config.seed, "brew-init", {result.chosen});
  auto expect = PoisonDelta::zeros(f.train.image_shape, c.poison_indices);
  for (auto& v : expect.values) v = init.uniform(-threat.epsilon(), threat.epsilon());
  project(expect, f.train, threat);
  EXPECT_EQ(result.delta.values, expect.values);
}

TEST(Brew, ZeroEpsilonYieldsZeroPerturbationAndCleanData) {
  BlobFixture f;
  auto c = sample_case(f.train, f.val, 0.05, 1, 3);
  BrewConfig config = plain_config();
  config.restarts = 2;
  const ModelParams ensemble[] = {f.model};
  auto result = brew(ensemble, f.train, f.val, c, ThreatModel{.epsilon_pixels = 0.0, .budget = 0.05}, config);
  EXPECT_EQ(result.delta.max_abs(), 0.0);
  EXPECT_EQ(apply_poison(f.train, result.delta).pixels, f.train.pixels);
}

TEST(Brew, LargeEpsilonHalvesTheLossForMostSeeds) {
  BlobFixture f;
  const ModelParams ensemble[] = {f.model};
  std::size_t halved = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto c = sample_case(f.train, f.val, 1.0 / 90.0, 1, 100 + seed);
    ASSERT_EQ(c.poison_count(), 1u);
    BrewConfig config = plain_config();
    config.steps = 100;
    config.seed = seed;
    auto result = brew(ensemble, f.train, f.val, c, ThreatModel{.epsilon_pixels = 128.0, .budget = 1.0 / 90.0},
                       config);
    const auto& d = result.restarts[result.chosen];
    halved += d.final_loss < 0.5 * d.initial_loss;
  }
  EXPECT_GE(halved, 9u);
}

TEST(Brew, ConstraintsAreCheckedAfterEveryStep) {
  BlobFixture f;
  auto c = sample_case(f.train, f.val, 0.05, 1, 3);
  BrewConfig config = plain_config();
  config.restarts = 2;
  config.steps = 7;
  const ModelParams ensemble[] = {f.model};
  const ThreatModel threat{.epsilon_pixels = 16.0, .budget = 0.05};
  auto result = brew(ensemble, f.train, f.val, c, threat, config);
  EXPECT_EQ(result.constraint_checks, 2u * (7 + 1));
  for (const auto& r : result.restarts) EXPECT_EQ(r.step_losses.size(), 7u);
  EXPECT_NO_THROW(check_constraints(result.delta, f.train, threat.epsilon()));
}

TEST(Brew, ResultDoesNotDependOnThreadCount) {
  BlobFixture f;
  auto c = sample_case(f.train, f.val, 0.05, 1, 3);
  BrewConfig config = plain_config();
  config.restarts = 3;
  config.steps = 5;
  config.poison_batch = 2;
  const ModelParams ensemble[] = {f.model};
  const ThreatModel threat{.epsilon_pixels = 16.0, .budget = 0.05};
  auto one = brew(ensemble, f.train, f.val, c, threat, config, 1);
  auto three = brew(ensemble, f.train, f.val, c, threat, config, 3);
  EXPECT_EQ(one.delta.values, three.delta.values);
  EXPECT_EQ(one.final_losses, three.final_losses);
  EXPECT_EQ(one.chosen, three.chosen);
}

TEST(Brew, EnsembleSizeMustMatchConfig) {
  BlobFixture f;
  auto c = sample_case(f.train, f.val, 0.05, 1, 3);
  BrewConfig config = plain_config();
  config.ensemble = 2;
  const ModelParams ensemble[] = {f.model};
  EXPECT_THROW(brew(ensemble, f.train, f.val, c, ThreatModel{}, config), ConfigError);
}

// ---- packages ----------------------------------------------------------------------

TEST(Package, SaveLoadRoundTripAndNullAttack) {
  BlobFixture f;
  auto c = sample_case(f.train, f.val, 0.05, 1, 3);
  BrewConfig config = plain_config();
  config.restarts = 2;
  config.steps = 3;
  const ThreatModel threat{.epsilon_pixels = 16.0, .budget = 0.05};
  const ModelParams ensemble[] = {f.model};
  auto pkg = make_package(c, threat, config, brew(ensemble, f.train, f.val, c, threat, config));
  const auto dir = (std::filesystem::temp_directory_path() / "brewlab_pkg_test").string();
  std::filesystem::remove_all(dir);
  save_package(dir, pkg, "# echo line");
  auto back = load_package(dir, f.train, f.val);
  EXPECT_EQ(back.delta.values, pkg.delta.values);
  EXPECT_EQ(back.delta.indices, pkg.delta.indices);
  EXPECT_EQ(back.final_losses, pkg.final_losses);
  EXPECT_EQ(back.initial_losses, pkg.initial_losses);
  EXPECT_EQ(back.chosen, pkg.chosen);
  EXPECT_EQ(back.threat, pkg.threat);
  EXPECT_EQ(back.brew, pkg.brew);
  EXPECT_EQ(back.poison_case.poison_indices, c.poison_indices);

  auto null = null_package(pkg);
  EXPECT_EQ(null.threat.epsilon_pixels, 0.0);
  EXPECT_EQ(null.delta.max_abs(), 0.0);
  EXPECT_EQ(null.poison_case.poison_indices, c.poison_indices);
  std::filesystem::remove_all(dir);
}

TEST(Package, QuantizedExportRespectsTheIntegerBound) {
  SynthParams p = tiny_synth(30);
  Dataset train = synth_dataset(p);
  Dataset val = synth_dataset(p, Split::kValidation);
  auto c = sample_case(train, val, 0.05, 1, 2);
  PoisonPackage pkg;
  pkg.poison_case = c;
  pkg.threat = ThreatModel{.epsilon_pixels = 8.0, .budget = 0.05};
  pkg.delta = PoisonDelta::zeros(train.image_shape, c.poison_indices);
  Rng rng(5);
  for (auto& v : pkg.delta.values) v = rng.uniform(-1.0, 1.0) * pkg.threat.epsilon();
  project(pkg.delta, train, pkg.threat);
  const auto path = (std::filesystem::temp_directory_path() / "brewlab_quant.bin").string();
  auto report = export_quantized(path, train, pkg);
  EXPECT_LE(report.max_abs_units, 8u);
  Dataset back = import_quantized(path, train, pkg);
  for (std::size_t k = 0; k < c.poison_count(); ++k) {
    const auto idx = c.poison_indices[k];
    for (std::size_t i = 0; i < train.image_size(); ++i) {
      const double clean = std::round(train.image(idx)[i] * 255.0);
      EXPECT_LE(std::abs(back.image(idx)[i] * 255.0 - clean), 8.0 + 1e-9);
      EXPECT_NEAR(back.image(idx)[i], train.image(idx)[i] + pkg.delta.block(k)[i], 1.0 / 255.0);
    }
  }
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace brewlab
