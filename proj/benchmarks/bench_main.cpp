#include <benchmark/benchmark.h>

#include "brewlab/autograd.hpp"
#include "brewlab/brewer.hpp"
#include "brewlab/nn.hpp"
#include "brewlab/ops.hpp"
#include "brewlab/rng.hpp"

namespace brewlab {
namespace {

Tensor random(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Args: channels in = channels out, spatial size; batch 32, 3x3 kernel.
void BM_Conv2dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  const Tensor x = random({32, c, s, s}, 1), w = random({c, c, 3, 3}, 2);
  for (auto _ : state) {
    Graph g;
    benchmark::DoNotOptimize(ops::conv2d(g.constant(x), g.constant(w), 1).value());
  }
}
BENCHMARK(BM_Conv2dForward)->Args({8, 12})->Args({16, 12})->Args({32, 4})->Unit(benchmark::kMicrosecond);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  const Tensor x = random({32, c, s, s}, 1), w = random({c, c, 3, 3}, 2);
  for (auto _ : state) {
    Graph g;
    const Var xv = g.leaf(x, true), wv = g.leaf(w, true);
    const Var wrt[] = {xv, wv};
    benchmark::DoNotOptimize(g.grad(ops::sum(ops::conv2d(xv, wv, 1)), wrt));
  }
}
BENCHMARK(BM_Conv2dBackward)->Args({8, 12})->Args({16, 12})->Args({32, 4})->Unit(benchmark::kMicrosecond);

ModelSpec desk_spec() { return ModelSpec::convnet({3, 12, 12}, 10, {1, 8}); }

Dataset random_dataset(std::size_t n, std::uint64_t seed) {
  Dataset d;
  d.image_shape = {3, 12, 12};
  d.classes = 10;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d.image_size(); ++k) d.pixels.push_back(rng.uniform());
    d.labels.push_back(static_cast<int>(i % 10));
    d.ids.push_back(i);
  }
  return d;
}

// One training step's gradient on the desk-scale model (batch 32).
void BM_TrainingStepGradient(benchmark::State& state) {
  const ModelParams params = build(desk_spec(), 0);
  const Tensor x = random({32, 3, 12, 12}, 3);
  std::vector<int> labels(32);
  for (std::size_t i = 0; i < 32; ++i) labels[i] = static_cast<int>(i % 10);
  for (auto _ : state) benchmark::DoNotOptimize(loss_gradient(params, x, labels));
}
BENCHMARK(BM_TrainingStepGradient)->Unit(benchmark::kMillisecond);

// One brewing step: B and its gradient through double backprop, P poisons.
void BM_MatchingLossGradient(benchmark::State& state) {
  const auto p = static_cast<std::size_t>(state.range(0));
  const Dataset train = random_dataset(10 * p, 4), val = random_dataset(10, 5);
  PoisonCase c;
  c.target_class = 0;
  c.adversarial_class = 1;
  c.target_indices = {0};
  c.target_ids = {val.ids[0]};
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (train.labels[i] == 1) {
      c.poison_indices.push_back(i);
      c.poison_ids.push_back(train.ids[i]);
    }
  }
  BrewConfig config;
  config.augment = false;
  const MatchingObjective objective({build(desk_spec(), 0)}, train, val, c, config);
  std::vector<std::size_t> batch(p);
  for (std::size_t i = 0; i < p; ++i) batch[i] = i;
  const std::vector<double> delta(p * train.image_size(), 0.01);
  for (auto _ : state) benchmark::DoNotOptimize(objective.evaluate(batch, delta, {}, true).loss);
}
BENCHMARK(BM_MatchingLossGradient)->Arg(1)->Arg(10)->Arg(30)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace brewlab

BENCHMARK_MAIN();
