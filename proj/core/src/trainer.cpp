#include "brewlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "brewlab/augment.hpp"
#include "brewlab/errors.hpp"

namespace brewlab {

std::vector<std::size_t> TrainConfig::scaled_drops() const {
  std::vector<std::size_t> out;
  for (auto d : drop_epochs) out.push_back(static_cast<std::size_t>(std::lround(static_cast<double>(d) * epoch_scale)));
  return out;
}

double TrainConfig::lr_at(std::size_t epoch) const {
  double lr = learning_rate;
  for (auto d : scaled_drops()) {
    if (d <= epoch) lr *= drop_factor;
  }
  return lr;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train.batch_size: must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate: must be positive");
  if (!(drop_factor > 0.0 && drop_factor <= 1.0)) throw ConfigError("train.drop_factor: must lie in (0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum: must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay: must be non-negative");
  if (!(epoch_scale > 0.0)) throw ConfigError("train.epoch_scale: must be positive");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw ConfigError("train.keep_fraction: must lie in (0, 1]");
  const auto drops = scaled_drops();
  for (std::size_t i = 0; i < drops.size(); ++i) {
    if (i > 0 && drops[i] <= drops[i - 1]) {
      throw ConfigError("train.drop_epochs: scaled drop epochs must be strictly increasing");
    }
    if (drops[i] >= epochs) {
      throw ConfigError("train.drop_epochs: scaled drop epoch " + std::to_string(drops[i]) +
                        " is not below the epoch count " + std::to_string(epochs));
    }
  }
}

void DPConfig::validate() const {
  if (!(clip > 0.0)) throw ConfigError("dp.clip: must be positive");
  if (!(sigma >= 0.0)) throw ConfigError("dp.sigma: must be non-negative");
}

GradientVector dp_sgd_step(const GradientVector& g, const DPConfig& dp, Rng& rng) {
  GradientVector out = g;
  const double norm = l2_norm(g.values);
  if (norm > dp.clip) {
    const double factor = dp.clip / norm;
    for (auto& v : out.values) v *= factor;
  }
  if (dp.sigma > 0.0) {
    const double std = dp.sigma * dp.clip;
    for (auto& v : out.values) v += std * rng.normal();
  }
  return out;
}

double accuracy(const ModelParams& params, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    idx.resize(std::min(kChunk, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto pred = predict(params, data.batch(idx));
    for (std::size_t k = 0; k < idx.size(); ++k) correct += pred[k] == data.labels[idx[k]];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

std::vector<std::size_t> keep_subset(std::size_t n, const TrainConfig& config) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  if (config.keep_fraction >= 1.0) return all;
  const auto keep = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(config.keep_fraction * static_cast<double>(n) + 0.5)));
  Rng rng = Rng::stream(config.seed, "keep");
  for (std::size_t i = 0; i < keep; ++i) std::swap(all[i], all[i + rng.below(n - i)]);
  all.resize(keep);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

TrainTrace train_victim(const Dataset& train, const Dataset& validation, const ModelSpec& spec,
                        const TrainConfig& config, const DPConfig& dp, TrainMonitor* monitor) {
  config.validate();
  if (dp.enabled) dp.validate();
  if (train.image_shape != spec.input_shape) {
    throw ShapeError("train: dataset images " + to_string(train.image_shape) + " do not match model input " +
                     to_string(spec.input_shape));
  }
  TrainTrace trace;
  trace.final_params = build(spec, config.seed);
  ModelParams& params = trace.final_params;
  std::vector<double> velocity(params.count(), 0.0);

  const auto pool = keep_subset(train.size(), config);
  trace.train_size = pool.size();
  if (pool.empty() && config.epochs > 0) throw ConfigError("train: empty training set");

  std::vector<std::size_t> order = pool;
  std::vector<std::size_t> batch_idx;
  Tensor batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    // Fisher-Yates from the canonical order, so the permutation depends only on (seed, epoch).
    order = pool;
    Rng shuffle = Rng::stream(config.seed, "shuffle", {epoch});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    const double lr = config.lr_at(epoch);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++steps) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch_idx.assign(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
      batch = train.batch(batch_idx);
      if (config.augment) {
        const std::size_t per = train.image_size();
        std::vector<double> src(per);
        for (std::size_t k = 0; k < batch_idx.size(); ++k) {
          // Keyed by example id so the draw does not depend on the batch position.
          Rng rng = Rng::stream(config.seed, "augment", {epoch, train.ids[batch_idx[k]]});
          const auto a = draw_integer(rng, config.padding);
          auto dst = batch.data().subspan(k * per, per);
          std::copy(dst.begin(), dst.end(), src.begin());
          augment_standard(src, dst, train.image_shape, a, config.padding);
        }
      }
      const auto labels = train.batch_labels(batch_idx);

      double loss = 0.0;
      GradientVector g;
      try {
        g = loss_gradient(params, batch, labels, false, &loss);
      } catch (const NonFiniteError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(steps) + ": " + e.what());
      }
      if (!std::isfinite(loss)) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(steps) + ": non-finite loss");
      }
      if (monitor) monitor->on_batch(epoch, params, g);
      if (dp.enabled) {
        Rng noise = Rng::stream(config.seed, "dp-noise", {epoch, steps});
        g = dp_sgd_step(g, dp, noise);
      }
      loss_sum += loss;

      for (std::size_t i = 0; i < params.theta.size(); ++i) {
        const double grad = g.values[i] + config.weight_decay * params.theta[i];
        velocity[i] = config.momentum * velocity[i] + grad;
        params.theta[i] -= lr * (grad + config.momentum * velocity[i]);
      }
      for (double v : params.theta) {
        if (!std::isfinite(v)) {
          throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                                std::to_string(steps) + ": non-finite parameters");
        }
      }
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = lr;
    stats.train_loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
    stats.validation_accuracy = accuracy(params, validation);
    if (monitor) monitor->on_epoch_end(epoch, stats);
    trace.epochs.push_back(stats);
  }
  return trace;
}

ModelParams pretrain_clean(const Dataset& train, const Dataset& validation, const ModelSpec& spec,
                           const TrainConfig& config) {
  return train_victim(train, validation, spec, config).final_params;
}

}  // namespace brewlab
