#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "brewlab/checkpoint.hpp"
#include "brewlab/errors.hpp"
#include "brewlab/gradcheck.hpp"
#include "brewlab/nn.hpp"
#include "test_util.hpp"

namespace brewlab {
namespace {

using testing::random_tensor;

std::size_t conv_count(std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k + out; }

TEST(ModelSpec, MlpParameterCount) {
  auto params = build(ModelSpec::mlp({2, 4, 2}), 0);
  EXPECT_EQ(params.count(), 22u);
  EXPECT_EQ(parameter_count(ModelSpec::mlp({2, 4, 2})), 22u);
}

TEST(ModelSpec, ScaledConvNetParameterCount) {
  auto spec = ModelSpec::convnet({3, 32, 32}, 10, {1, 8});
  EXPECT_EQ(spec.effective_widths(), (std::vector<std::size_t>{8, 16, 16, 32, 32}));
  // 32 -> pool 3 -> 10 -> pool 3 -> 3, so 32 * 3 * 3 features.
  const std::size_t expected = conv_count(3, 8, 3) + conv_count(8, 16, 3) + conv_count(16, 16, 3) +
                               conv_count(16, 32, 3) + conv_count(32, 32, 3) + (32 * 9 * 10 + 10);
  EXPECT_EQ(expected, 20490u);
  EXPECT_EQ(parameter_count(spec), expected);
  EXPECT_EQ(build(spec, 0).count(), expected);
}

TEST(ModelSpec, LayoutTilesTheParameterVector) {
  for (const auto& spec : {ModelSpec::mlp({2, 4, 2}), ModelSpec::convnet({3, 12, 12}, 5, {1, 8})}) {
    auto layout = make_layout(spec);
    EXPECT_TRUE(layout->is_bijective());
    EXPECT_EQ(layout->total(), parameter_count(spec));
  }
}

TEST(ModelSpec, FullWidthFeatureWidth) {
  EXPECT_EQ(ModelSpec::convnet().feature_width(), 2304u);
  EXPECT_EQ(ModelSpec::mlp({2, 4, 2}).feature_width(), 4u);
}

TEST(ModelSpec, WidthScaleRoundsUpWithMinimumOne) {
  WidthScale s{1, 8};
  EXPECT_EQ(s.apply(64), 8u);
  EXPECT_EQ(s.apply(12), 2u);
  EXPECT_EQ(s.apply(1), 1u);
  EXPECT_EQ((WidthScale{1, 1000}).apply(64), 1u);
  EXPECT_EQ(WidthScale::parse("3/16"), (WidthScale{3, 16}));
  EXPECT_EQ(WidthScale::parse(s.str()), s);
}

TEST(ModelSpec, PoolingToZeroIsRejected) {
  auto spec = ModelSpec::convnet({3, 8, 8}, 10, {1, 8});
  EXPECT_THROW(build(spec, 0), Error);
}

TEST(Build, SameSeedIsBitIdentical) {
  auto spec = ModelSpec::convnet({3, 12, 12}, 4, {1, 8});
  EXPECT_EQ(build(spec, 17).theta, build(spec, 17).theta);
  EXPECT_NE(build(spec, 17).theta, build(spec, 18).theta);
}

TEST(Build, InitializationIsFanInScaled) {
  auto params = build(ModelSpec::mlp({50, 20, 3}), 1);
  const double bound = 1.0 / std::sqrt(50.0);
  for (std::size_t i = 0; i < 50 * 20 + 20; ++i) EXPECT_LE(std::abs(params.theta[i]), bound);
}

TEST(Logits, ZeroFinalLayerGivesZeroLogits) {
  auto params = build(ModelSpec::convnet({3, 9, 9}, 4, {1, 16}), 2);
  const auto slots = params.layout->slots();
  for (std::size_t s = slots.size() - 2; s < slots.size(); ++s) {
    std::fill_n(params.theta.begin() + static_cast<std::ptrdiff_t>(slots[s].offset), slots[s].size(), 0.0);
  }
  Tensor z = logits(params, random_tensor({3, 3, 9, 9}, 1, 0.0, 1.0));
  EXPECT_EQ(z, Tensor({3, 4}, 0.0));
}

TEST(Logits, SingleExampleMatchesBatchRow) {
  auto params = build(ModelSpec::convnet({3, 9, 9}, 4, {1, 16}), 2);
  Tensor batch = random_tensor({5, 3, 9, 9}, 3, 0.0, 1.0);
  Tensor all = logits(params, batch);
  for (std::size_t b = 0; b < 5; ++b) {
    Tensor one({1, 3, 9, 9});
    std::copy_n(batch.data().begin() + static_cast<std::ptrdiff_t>(b * 243), 243, one.data().begin());
    Tensor row = logits(params, one);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(row[k], all[b * 4 + k]);
  }
}

TEST(Logits, ShapeMismatchThrows) {
  auto params = build(ModelSpec::convnet({3, 9, 9}, 4, {1, 16}), 2);
  EXPECT_THROW(logits(params, Tensor({1, 3, 8, 8})), ShapeError);
}

/// Direct loops: normalize, conv (zero padding k/2) + ReLU, pooling after the
/// last two convs, linear.
std::vector<double> convnet_oracle(const ModelParams& p, std::span<const double> image) {
  const auto& spec = p.spec;
  const auto widths = spec.effective_widths();
  std::size_t c = spec.input_shape[0], h = spec.input_shape[1], w = spec.input_shape[2];
  std::vector<double> x(image.begin(), image.end());
  if (!spec.input_mean.empty()) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const std::size_t ch = i / (h * w);
      x[i] = (x[i] - spec.input_mean[ch]) / spec.input_std[ch];
    }
  }
  const auto slots = p.layout->slots();
  const std::size_t k = spec.kernel;
  const auto pad = static_cast<long>(k / 2);
  for (std::size_t l = 0; l < 5; ++l) {
    const std::size_t co = widths[l];
    const double* wt = p.theta.data() + slots[2 * l].offset;
    const double* bias = p.theta.data() + slots[2 * l + 1].offset;
    std::vector<double> y(co * h * w);
    for (std::size_t o = 0; o < co; ++o) {
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          double s = bias[o];
          for (std::size_t ci = 0; ci < c; ++ci) {
            for (std::size_t a = 0; a < k; ++a) {
              for (std::size_t b = 0; b < k; ++b) {
                const long ii = static_cast<long>(i + a) - pad, jj = static_cast<long>(j + b) - pad;
                if (ii < 0 || jj < 0 || ii >= static_cast<long>(h) || jj >= static_cast<long>(w)) continue;
                s += wt[((o * c + ci) * k + a) * k + b] * x[(ci * h + ii) * w + jj];
              }
            }
          }
          y[(o * h + i) * w + j] = std::max(s, 0.0);
        }
      }
    }
    c = co;
    x = std::move(y);
    if (l >= 3) {
      const std::size_t q = spec.pool, ho = h / q, wo = w / q;
      std::vector<double> z(c * ho * wo);
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < ho; ++i) {
          for (std::size_t j = 0; j < wo; ++j) {
            double m = -INFINITY;
            for (std::size_t a = 0; a < q; ++a) {
              for (std::size_t b = 0; b < q; ++b) m = std::max(m, x[(ch * h + i * q + a) * w + j * q + b]);
            }
            z[(ch * ho + i) * wo + j] = m;
          }
        }
      }
      h = ho;
      w = wo;
      x = std::move(z);
    }
  }
  const double* lw = p.theta.data() + slots[10].offset;
  const double* lb = p.theta.data() + slots[11].offset;
  std::vector<double> out(spec.classes);
  for (std::size_t o = 0; o < spec.classes; ++o) {
    double s = lb[o];
    for (std::size_t i = 0; i < x.size(); ++i) s += lw[o * x.size() + i] * x[i];
    out[o] = s;
  }
  return out;
}

TEST(Logits, ConvNetMatchesStraightLineOracle) {
  auto spec = ModelSpec::convnet({3, 12, 12}, 5, {1, 8});
  spec.input_mean = {0.4, 0.5, 0.6};
  spec.input_std = {0.2, 0.25, 0.3};
  auto params = build(spec, 0);
  Tensor batch = random_tensor({2, 3, 12, 12}, 4, 0.0, 1.0);
  Tensor z = logits(params, batch);
  for (std::size_t b = 0; b < 2; ++b) {
    auto oracle = convnet_oracle(params, batch.data().subspan(b * 432, 432));
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(z[b * 5 + k], oracle[k], 1e-12);
  }
}

TEST(Features, IdenticalInputsGiveIdenticalFeatures) {
  auto params = build(ModelSpec::convnet({3, 9, 9}, 4, {1, 16}), 5);
  Tensor one = random_tensor({1, 3, 9, 9}, 6, 0.0, 1.0);
  Tensor two({2, 3, 9, 9});
  for (std::size_t i = 0; i < 243; ++i) two[i] = two[243 + i] = one[i];
  Tensor f = penultimate_features(params, two);
  const std::size_t d = params.spec.feature_width();
  ASSERT_EQ(f.shape(), (Shape{2, d}));
  for (std::size_t i = 0; i < d; ++i) EXPECT_EQ(f[i], f[d + i]);
}

TEST(Features, FinalLinearMapReproducesLogits) {
  auto params = build(ModelSpec::convnet({3, 12, 12}, 5, {1, 8}), 8);
  Tensor batch = random_tensor({3, 3, 12, 12}, 9, 0.0, 1.0);
  Tensor f = penultimate_features(params, batch);
  Tensor z = logits(params, batch);
  Tensor lw = params.tensor(10), lb = params.tensor(11);
  const std::size_t d = params.spec.feature_width();
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t o = 0; o < 5; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += f[b * d + i] * lw[o * d + i];
      EXPECT_NEAR(z[b * 5 + o], s + lb[o], 1e-12);
    }
  }
}

TEST(Features, CrossEntropyGradientChecksAcrossSpecGrid) {
  std::vector<std::pair<ModelSpec, Shape>> grid{
      {ModelSpec::mlp({4, 5, 3}), {3, 4}},
      {ModelSpec::convnet({3, 9, 9}, 3, {1, 16}), {3, 3, 9, 9}},
      {ModelSpec::convnet({1, 9, 9}, 2, {1, 32}), {3, 1, 9, 9}},
  };
  for (auto& [spec, shape] : grid) {
    auto base = build(spec, 4);
    Tensor x = random_tensor(shape, 5, 0.0, 1.0);
    std::vector<int> y{0, 1, 1};
    std::vector<std::size_t> coords;
    Rng rng(6);
    for (int i = 0; i < 25; ++i) coords.push_back(rng.below(base.count()));
    auto report = finite_diff_check(
        [&](const Tensor& t, Tensor* grad) {
          ModelParams p = base;
          p.theta = t.vector();
          double loss = 0.0;
          auto g = loss_gradient(p, x, y, false, &loss);
          if (grad) *grad = Tensor({g.size()}, g.values);
          return loss;
        },
        Tensor({base.count()}, base.theta), 1e-5, coords);
    EXPECT_TRUE(report.passed(1e-4)) << to_string(spec.arch) << " " << report.max_rel_error;
  }
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  auto spec = ModelSpec::convnet({3, 12, 12}, 5, {1, 8});
  spec.input_mean = {0.1, 0.2, 0.3};
  spec.input_std = {0.3, 0.2, 0.1};
  auto params = build(spec, 42);
  std::stringstream buffer;
  write_checkpoint(buffer, params);
  auto back = read_checkpoint(buffer);
  EXPECT_EQ(back.spec, params.spec);
  EXPECT_EQ(back.seed, params.seed);
  EXPECT_EQ(back.theta, params.theta);
}

TEST(Checkpoint, TruncatedFileIsRejected) {
  auto params = build(ModelSpec::mlp({2, 4, 2}), 0);
  std::stringstream buffer;
  write_checkpoint(buffer, params);
  std::string text = buffer.str();
  std::stringstream cut(text.substr(0, text.size() - 8));
  EXPECT_THROW(read_checkpoint(cut), FormatError);
  std::stringstream bad("NOT-A-CKPT\n");
  EXPECT_THROW(read_checkpoint(bad), FormatError);
}

}  // namespace
}  // namespace brewlab
