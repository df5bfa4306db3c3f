#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "brewlab/augment.hpp"
#include "brewlab/errors.hpp"
#include "brewlab/data.hpp"
#include "brewlab/gradcheck.hpp"
#include "test_util.hpp"

namespace brewlab {
namespace {

using testing::random_tensor;
using testing::tiny_synth;

std::vector<unsigned char> cifar_record(unsigned char label, unsigned char fill) {
  std::vector<unsigned char> r(3073, fill);
  r[0] = label;
  return r;
}

TEST(Cifar, ParsesCraftedRecords) {
  auto bytes = cifar_record(3, 0);
  auto second = cifar_record(7, 255);
  second[1] = 128;
  bytes.insert(bytes.end(), second.begin(), second.end());
  Dataset d = parse_cifar_binary(bytes);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.labels, (std::vector<int>{3, 7}));
  EXPECT_EQ(d.image_shape, (Shape{3, 32, 32}));
  EXPECT_EQ(d.image(0)[5], 0.0);
  EXPECT_EQ(d.image(1)[0], 128.0 / 255.0);
  EXPECT_EQ(d.image(1)[3071], 1.0);
  EXPECT_EQ(d.ids, (std::vector<std::uint64_t>{0, 1}));
}

TEST(Cifar, PixelLayoutIsChannelPlanar) {
  auto bytes = cifar_record(0, 0);
  bytes[1 + 1024 + 32 * 2 + 5] = 51;  // green channel, row 2, column 5
  Dataset d = parse_cifar_binary(bytes);
  EXPECT_EQ(d.image(0)[1024 + 2 * 32 + 5], 0.2);
}

TEST(Cifar, RejectsTruncatedFileAndBadLabel) {
  auto bytes = cifar_record(1, 0);
  bytes.pop_back();
  EXPECT_THROW(parse_cifar_binary(bytes), FormatError);
  EXPECT_THROW(parse_cifar_binary(cifar_record(10, 0)), FormatError);
}

TEST(Cifar, WriteThenReadIsBitIdenticalAfterQuantization) {
  Dataset d;
  d.image_shape = {3, 32, 32};
  Rng rng(3);
  for (int i = 0; i < 3; ++i) {
    d.labels.push_back(i * 3);
    d.ids.push_back(i);
    for (int k = 0; k < 3072; ++k) d.pixels.push_back(rng.uniform());
  }
  auto once = parse_cifar_binary(encode_cifar_binary(d));
  auto twice = parse_cifar_binary(encode_cifar_binary(once));
  EXPECT_EQ(once.pixels, twice.pixels);
  EXPECT_EQ(once.labels, d.labels);
  for (std::size_t i = 0; i < d.pixels.size(); ++i) EXPECT_LE(std::abs(once.pixels[i] - d.pixels[i]), 0.5 / 255);

  const auto path = (std::filesystem::temp_directory_path() / "brewlab_cifar_roundtrip.bin").string();
  write_cifar_binary(path, once);
  EXPECT_EQ(load_cifar_binary(path).pixels, once.pixels);
  std::filesystem::remove(path);
}

TEST(Dataset, ValidateCatchesBrokenInvariants) {
  Dataset d = synth_dataset(tiny_synth(4));
  EXPECT_NO_THROW(d.validate());
  Dataset bad = d;
  bad.pixels[0] = 1.5;
  EXPECT_THROW(bad.validate(), FormatError);
  bad = d;
  bad.labels[0] = 3;
  EXPECT_THROW(bad.validate(), FormatError);
  bad = d;
  bad.ids[1] = bad.ids[0];
  EXPECT_THROW(bad.validate(), FormatError);
}

TEST(Synth, SizesAndDeterminism) {
  SynthParams p = tiny_synth(10);
  p.classes = 2;
  Dataset a = synth_dataset(p);
  EXPECT_EQ(a.size(), 20u);
  EXPECT_EQ(a.image_shape, (Shape{3, 8, 8}));
  Dataset b = synth_dataset(p);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  Dataset v = synth_dataset(p, Split::kValidation);
  EXPECT_NE(a.pixels, v.pixels);
  EXPECT_NO_THROW(a.validate());
}

TEST(Synth, NoiselessClassesAreLinearlySeparable) {
  SynthParams p = tiny_synth(15);
  p.classes = 4;
  p.noise = 0.0;
  p.jitter = 0.0;
  p.nuisance = 0.0;
  Dataset d = synth_dataset(p);
  const std::size_t dim = d.image_size(), k = d.classes;
  // Multinomial logistic regression trained by plain gradient descent.
  std::vector<double> w(k * (dim + 1), 0.0);
  auto scores = [&](std::size_t i) {
    std::vector<double> s(k);
    for (std::size_t c = 0; c < k; ++c) {
      double z = w[c * (dim + 1) + dim];
      for (std::size_t j = 0; j < dim; ++j) z += w[c * (dim + 1) + j] * d.image(i)[j];
      s[c] = z;
    }
    return s;
  };
  for (int step = 0; step < 300; ++step) {
    std::vector<double> grad(w.size(), 0.0);
    for (std::size_t i = 0; i < d.size(); ++i) {
      auto s = scores(i);
      const double m = *std::max_element(s.begin(), s.end());
      double z = 0.0;
      for (auto& v : s) z += (v = std::exp(v - m));
      for (std::size_t c = 0; c < k; ++c) {
        const double r = s[c] / z - (static_cast<int>(c) == d.labels[i] ? 1.0 : 0.0);
        for (std::size_t j = 0; j < dim; ++j) grad[c * (dim + 1) + j] += r * d.image(i)[j];
        grad[c * (dim + 1) + dim] += r;
      }
    }
    for (std::size_t q = 0; q < w.size(); ++q) w[q] -= 0.5 * grad[q] / static_cast<double>(d.size());
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto s = scores(i);
    correct += static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin()) == d.labels[i];
  }
  EXPECT_EQ(correct, d.size());
}

TEST(Cases, BudgetToPoisonCount) {
  EXPECT_EQ(poison_count_for(0.01, 50000), 500u);
  EXPECT_EQ(poison_count_for(0.01, 3000), 30u);
  EXPECT_EQ(poison_count_for(0.01, 99), 0u);
}

TEST(Cases, ZeroPoisonBudgetIsAnError) {
  Dataset train = synth_dataset(tiny_synth(10));
  Dataset val = synth_dataset(tiny_synth(10), Split::kValidation);
  EXPECT_THROW(sample_case(train, val, 0.01, 1, 0), ConfigError);
}

TEST(Cases, ClassTooSmallForBudgetIsAnError) {
  Dataset train = synth_dataset(tiny_synth(10));
  Dataset val = synth_dataset(tiny_synth(10), Split::kValidation);
  EXPECT_THROW(sample_case(train, val, 0.5, 1, 0), ConfigError);
}

TEST(Cases, PoisonsStayInAdversarialClassAndTargetsInValidation) {
  Dataset train = synth_dataset(tiny_synth(40));
  Dataset val = synth_dataset(tiny_synth(10), Split::kValidation);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    PoisonCase c = sample_case(train, val, 0.1, 2, seed);
    EXPECT_NE(c.target_class, c.adversarial_class);
    EXPECT_EQ(c.poison_count(), 12u);
    EXPECT_TRUE(std::is_sorted(c.poison_indices.begin(), c.poison_indices.end()));
    EXPECT_EQ(std::set<std::size_t>(c.poison_indices.begin(), c.poison_indices.end()).size(), 12u);
    for (auto i : c.poison_indices) EXPECT_EQ(train.labels[i], c.adversarial_class);
    ASSERT_EQ(c.target_indices.size(), 2u);
    for (std::size_t k = 0; k < 2; ++k) {
      EXPECT_EQ(val.labels[c.target_indices[k]], c.target_class);
      EXPECT_EQ(c.target_ids[k], val.ids[c.target_indices[k]]);
    }
  }
}

TEST(Cases, FixedSeedGivesPinnedCase) {
  Dataset train = synth_dataset(tiny_synth(40));
  Dataset val = synth_dataset(tiny_synth(10), Split::kValidation);
  PoisonCase a = sample_case(train, val, 0.05, 1, 1234);
  PoisonCase b = sample_case(train, val, 0.05, 1, 1234);
  EXPECT_EQ(a.poison_indices, b.poison_indices);
  EXPECT_EQ(a.target_indices, b.target_indices);
  // The generator is SplitMix64 with hand-written distributions, so these
  // values hold on every platform.
  EXPECT_EQ(a.target_class, 0);
  EXPECT_EQ(a.adversarial_class, 1);
  EXPECT_EQ(a.target_indices, (std::vector<std::size_t>{6}));
  EXPECT_EQ(a.poison_indices, (std::vector<std::size_t>{31, 55, 58, 64, 67, 118}));
}

TEST(Cases, ManifestRoundTripAndValidation) {
  Dataset train = synth_dataset(tiny_synth(40));
  Dataset val = synth_dataset(tiny_synth(10), Split::kValidation);
  PoisonCase c = sample_case(train, val, 0.05, 2, 77);
  std::stringstream s;
  write_case(s, c);
  std::stringstream copy(s.str());
  PoisonCase back = read_case(copy, train, val);
  EXPECT_EQ(back.poison_indices, c.poison_indices);
  EXPECT_EQ(back.target_indices, c.target_indices);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.adversarial_class, c.adversarial_class);

  Dataset relabeled = train;
  relabeled.labels[c.poison_indices[0]] = c.target_class;
  std::stringstream again(s.str());
  EXPECT_THROW(read_case(again, relabeled, val), FormatError);
}

// ---- augmentation -----------------------------------------------------------------

Tensor test_image(std::uint64_t seed) { return random_tensor({3, 8, 8}, seed, 0.0, 1.0); }

TEST(Augment, IdentityIsBitExact) {
  Tensor x = test_image(1);
  EXPECT_EQ(augment_differentiable(x, {}, 2), x);
  EXPECT_EQ(augment_standard(x, {}, 2), x);
}

TEST(Augment, FlipTwiceIsIdentity) {
  Tensor x = test_image(2);
  AugmentParams flip{.flip = true};
  EXPECT_EQ(augment_differentiable(augment_differentiable(x, flip, 2), flip, 2), x);
  EXPECT_EQ(augment_standard(augment_standard(x, flip, 2), flip, 2), x);
}

TEST(Augment, FlipOnlyMirrorsRows) {
  Tensor x = test_image(3);
  Tensor y = augment_standard(x, {.flip = true}, 2);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < 8; ++i) {
      for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(y[(c * 8 + i) * 8 + j], x[(c * 8 + i) * 8 + 7 - j]);
    }
  }
}

TEST(Augment, ShiftSamplesZeroPaddedInput) {
  Tensor x = test_image(4);
  Tensor y = augment_standard(x, {.dx = 1.0, .dy = -2.0}, 2);
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      const long si = static_cast<long>(i) - 2, sj = static_cast<long>(j) + 1;
      const double expect = (si < 0 || sj > 7) ? 0.0 : x[si * 8 + sj];
      EXPECT_EQ(y[i * 8 + j], expect);
    }
  }
}

TEST(Augment, StandardMatchesDifferentiableAtEveryIntegerShift) {
  Tensor x = test_image(5);
  const int pad = 3;
  for (int dy = -pad; dy <= pad; ++dy) {
    for (int dx = -pad; dx <= pad; ++dx) {
      for (bool flip : {false, true}) {
        AugmentParams p{.flip = flip, .dx = static_cast<double>(dx), .dy = static_cast<double>(dy)};
        EXPECT_EQ(augment_standard(x, p, pad), augment_differentiable(x, p, pad))
            << dx << "," << dy << "," << flip;
      }
    }
  }
}

TEST(Augment, OutputsStayInUnitRange) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = test_image(100 + trial);
    Tensor y = augment_differentiable(x, draw_continuous(rng, 2), 2);
    for (double v : y.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Augment, ShiftBeyondPaddingIsRejected) {
  EXPECT_THROW(check_augment({.dx = 2.5}, 2), ConfigError);
  EXPECT_THROW(augment_standard(test_image(7), {.dy = -3.0}, 2), ConfigError);
  EXPECT_NO_THROW(check_augment({.dx = -2.0, .dy = 2.0}, 2));
}

TEST(Augment, DrawsRespectPaddingAndIntegrality) {
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    auto c = draw_continuous(rng, 4);
    EXPECT_LE(std::abs(c.dx), 4.0);
    EXPECT_LE(std::abs(c.dy), 4.0);
    auto n = draw_integer(rng, 4);
    EXPECT_EQ(n.dx, std::round(n.dx));
    EXPECT_LE(std::abs(n.dy), 4.0);
  }
}

double weighted_augment_sum(const Tensor& x, const AugmentParams& p, const Tensor& weights, Tensor* grad) {
  Graph g;
  Var xv = g.leaf(x.reshaped({1, 3, 8, 8}), true);
  const AugmentParams ps[] = {p};
  Var y = augment_differentiable(xv, ps, 2);
  Var s = ops::dot(y, g.constant(weights));
  if (grad) {
    const Var wrt[] = {xv};
    *grad = g.grad(s, wrt)[0].value().reshaped(x.shape());
  }
  return s.value().item();
}

TEST(Augment, GradientMatchesFiniteDifferences) {
  Tensor x = test_image(9);
  Tensor ones({1, 3, 8, 8}, 1.0);
  for (AugmentParams p : {AugmentParams{.dx = 1.0}, AugmentParams{.flip = true, .dx = -0.37, .dy = 1.61}}) {
    auto report = finite_diff_check(
        [&](const Tensor& t, Tensor* grad) { return weighted_augment_sum(t, p, ones, grad); }, x);
    EXPECT_LT(report.max_rel_error, 1e-4);
    Tensor w = random_tensor({1, 3, 8, 8}, 10);
    report = finite_diff_check(
        [&](const Tensor& t, Tensor* grad) { return weighted_augment_sum(t, p, w, grad); }, x);
    EXPECT_LT(report.max_rel_error, 1e-4);
  }
}

}  // namespace
}  // namespace brewlab
