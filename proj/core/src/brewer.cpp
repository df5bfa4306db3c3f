#include "brewlab/brewer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "brewlab/errors.hpp"
#include "brewlab/ops.hpp"
#include "brewlab/parallel.hpp"

namespace brewlab {

void ThreatModel::validate() const {
  if (!(epsilon_pixels >= 0.0 && epsilon_pixels <= 255.0)) throw ConfigError("threat.epsilon: must lie in [0, 255]");
  if (!(budget > 0.0 && budget <= 1.0)) throw ConfigError("threat.budget: must lie in (0, 1]");
  if (targets == 0) throw ConfigError("threat.targets: must be at least 1");
}

std::span<const double> PoisonDelta::block(std::size_t k) const {
  return std::span<const double>(values).subspan(k * image_size(), image_size());
}

std::span<double> PoisonDelta::block(std::size_t k) {
  return std::span<double>(values).subspan(k * image_size(), image_size());
}

double PoisonDelta::max_abs() const {
  double m = 0.0;
  for (double v : values) m = std::max(m, std::abs(v));
  return m;
}

PoisonDelta PoisonDelta::zeros(const Shape& image_shape, std::vector<std::size_t> indices) {
  PoisonDelta d{image_shape, std::move(indices), {}};
  d.values.assign(d.count() * d.image_size(), 0.0);
  return d;
}

Dataset apply_poison(const Dataset& train, const PoisonDelta& delta) {
  if (delta.image_shape != train.image_shape) throw ShapeError("apply_poison: image shapes differ");
  Dataset out = train;
  for (std::size_t k = 0; k < delta.count(); ++k) {
    auto img = out.image(delta.indices.at(k));
    auto d = delta.block(k);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] += d[i];
  }
  return out;
}

std::string to_string(Objective o) {
  switch (o) {
    case Objective::kCosine: return "cosine";
    case Objective::kEuclidean: return "euclidean";
    case Objective::kFeatureCollision: return "feature-collision";
    case Objective::kBullseye: return "bullseye";
  }
  return "cosine";
}

Objective parse_objective(const std::string& s) {
  if (s == "cosine") return Objective::kCosine;
  if (s == "euclidean") return Objective::kEuclidean;
  if (s == "feature-collision") return Objective::kFeatureCollision;
  if (s == "bullseye") return Objective::kBullseye;
  throw ConfigError("brew.objective: unknown objective '" + s +
                    "' (expected cosine, euclidean, feature-collision or bullseye)");
}

void BrewConfig::validate() const {
  if (restarts == 0) throw ConfigError("brew.restarts: must be at least 1");
  if (!(step_size > 0.0)) throw ConfigError("brew.step_size: must be positive");
  if (ensemble == 0) throw ConfigError("brew.ensemble: must be at least 1");
  if (poison_batch == 0) throw ConfigError("brew.poison_batch: must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("brew.beta1: Adam coefficients must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("brew.adam_eps: must be positive");
  if (dp_counter && !(counter_clip > 0.0 && counter_sigma >= 0.0)) {
    throw ConfigError("brew.counter_clip: clip must be positive and sigma non-negative");
  }
}

double BrewConfig::step_length(std::size_t k, double epsilon) const {
  double tau = step_size * epsilon;
  if (decay) {
    for (std::size_t num : {3u, 5u, 7u}) {
      if (k >= (num * steps + 7) / 8) tau *= 0.1;
    }
  }
  return tau;
}

std::vector<GradientVector> target_gradient(std::span<const ModelParams> ensemble, const Dataset& validation,
                                            const PoisonCase& c) {
  const Tensor x = validation.batch(c.target_indices);
  const std::vector<int> y(c.target_indices.size(), c.adversarial_class);
  std::vector<GradientVector> out;
  for (const auto& member : ensemble) out.push_back(loss_gradient(member, x, y, true));
  return out;
}

// ---- matching objective ----------------------------------------------------------

MatchingObjective::MatchingObjective(std::vector<ModelParams> ensemble, const Dataset& train,
                                     const Dataset& validation, const PoisonCase& c, const BrewConfig& config,
                                     double loss_scale)
    : ensemble_(std::move(ensemble)),
      poison_idx_(c.poison_indices),
      image_shape_(train.image_shape),
      config_(config),
      loss_scale_(loss_scale) {
  if (ensemble_.empty()) throw ConfigError("brew.ensemble: at least one pretrained model is required");
  if (poison_idx_.empty()) throw ConfigError("threat.budget: the case has no poisons");
  if (!(loss_scale > 0.0)) throw ConfigError("matching objective: loss scale must be positive");
  const Tensor px = train.batch(poison_idx_);
  poison_pixels_ = px.vector();
  poison_labels_ = train.batch_labels(poison_idx_);

  if (config_.objective == Objective::kCosine || config_.objective == Objective::kEuclidean) {
    target_grads_ = target_gradient(ensemble_, validation, c);
  } else {
    const Tensor xt = validation.batch(c.target_indices);
    for (const auto& member : ensemble_) {
      const Tensor f = penultimate_features(member, xt);
      const std::size_t width = f.dim(1);
      Tensor mean(Shape{width});
      for (std::size_t t = 0; t < f.dim(0); ++t) {
        for (std::size_t j = 0; j < width; ++j) mean[j] += f[t * width + j];
      }
      for (auto& v : mean.data()) v /= static_cast<double>(f.dim(0));
      target_features_.push_back(std::move(mean));
    }
  }
}

double MatchingObjective::member_loss(std::size_t m, std::span<const std::size_t> batch,
                                      std::span<const double> delta, std::span<const AugmentParams> augment,
                                      std::vector<double>* grad, Rng* counter_rng) const {
  const ModelParams& model = ensemble_[m];
  const std::size_t per = numel(image_shape_);
  const std::size_t b = batch.size();
  Shape batch_shape{b};
  batch_shape.insert(batch_shape.end(), image_shape_.begin(), image_shape_.end());

  std::vector<double> pixels(b * per);
  std::vector<int> labels(b);
  for (std::size_t k = 0; k < b; ++k) {
    const std::size_t pos = batch[k];
    if (pos >= poison_idx_.size()) throw ShapeError("matching objective: poison position out of range");
    std::copy_n(poison_pixels_.begin() + static_cast<long>(pos * per), per, pixels.begin() + static_cast<long>(k * per));
    labels[k] = poison_labels_[pos];
  }

  const bool gradient_kind = config_.objective == Objective::kCosine || config_.objective == Objective::kEuclidean;
  Graph g;
  const auto params = bind_params(g, model, gradient_kind);
  const Var d = g.leaf(Tensor(batch_shape, std::vector<double>(delta.begin(), delta.end())), grad != nullptr);
  Var x = ops::add(g.constant(Tensor(batch_shape, std::move(pixels))), d);
  if (!augment.empty()) x = augment_differentiable(x, augment, config_.padding);
  const ForwardResult fwd = forward(model.spec, params, x);

  Var loss;
  if (gradient_kind) {
    Var data_loss = ops::cross_entropy(fwd.logits, labels, ops::Reduction::kMean);
    if (loss_scale_ != 1.0) data_loss = ops::scale(data_loss, loss_scale_);
    if (!data_loss.requires_grad()) {
      throw DegenerateGradientError("matching objective: poison loss does not depend on the parameters");
    }
    std::vector<Var> poison_grad = g.grad(data_loss, params, {.create_graph = true});

    if (config_.dp_counter) {
      const Var norm = ops::sqrt(ops::squared_norm(poison_grad));
      if (norm.value().item() > config_.counter_clip) {
        const Var factor = ops::div(g.constant(Tensor::scalar(config_.counter_clip)), norm);
        for (auto& pg : poison_grad) pg = ops::mul_scalar(pg, factor);
      }
      if (config_.counter_sigma > 0.0) {
        if (!counter_rng) throw ConfigError("brew.dp_counter: noise requested without a random stream");
        const double std = config_.counter_sigma * config_.counter_clip;
        for (auto& pg : poison_grad) {
          Tensor noise(pg.shape());
          for (auto& v : noise.data()) v = std * counter_rng->normal();
          pg = ops::add(pg, g.constant(std::move(noise)));
        }
      }
    }

    const GradientVector& tg = target_grads_[m];
    std::vector<Var> target;
    for (std::size_t s = 0; s < tg.layout->slots().size(); ++s) {
      Tensor t = tg.tensor(s);
      if (loss_scale_ != 1.0) {
        for (auto& v : t.data()) v *= loss_scale_;
      }
      target.push_back(g.constant(std::move(t)));
    }

    if (config_.objective == Objective::kCosine) {
      Var cos;
      try {
        cos = ops::cosine_similarity(target, poison_grad);
      } catch (const DegenerateGradientError& e) {
        const bool target_side = std::string(e.what()).find("first") != std::string::npos;
        throw DegenerateGradientError(std::string("matching objective: ") +
                                      (target_side ? "target gradient" : "poison gradient") +
                                      " has zero norm, cosine undefined");
      }
      loss = ops::sub(g.constant(Tensor::scalar(1.0)), cos);
    } else {
      std::vector<Var> diff;
      for (std::size_t s = 0; s < target.size(); ++s) diff.push_back(ops::sub(poison_grad[s], target[s]));
      loss = ops::squared_norm(diff);
    }
  } else {
    const Var target = g.constant(target_features_[m]);
    if (config_.objective == Objective::kFeatureCollision) {
      const Var diff = ops::sub(fwd.features, ops::broadcast_rows(target, b));
      loss = ops::scale(ops::dot(diff, diff), 1.0 / static_cast<double>(b));
    } else {
      const Var mean = ops::scale(ops::sum_rows(fwd.features), 1.0 / static_cast<double>(b));
      const Var diff = ops::sub(mean, target);
      loss = ops::dot(diff, diff);
    }
  }

  const double value = loss.value().item();
  if (grad) {
    const Var wrt[] = {d};
    if (loss.requires_grad()) {
      const auto gd = g.grad(loss, wrt);
      *grad = gd[0].value().vector();
    } else {
      grad->assign(b * per, 0.0);
    }
  }
  return value;
}

MatchingObjective::Evaluation MatchingObjective::evaluate(std::span<const std::size_t> batch,
                                                          std::span<const double> delta,
                                                          std::span<const AugmentParams> augment,
                                                          bool want_gradient, Rng* counter_rng) const {
  const std::size_t per = numel(image_shape_);
  if (batch.empty()) throw ShapeError("matching objective: empty poison batch");
  if (delta.size() != batch.size() * per) throw ShapeError("matching objective: delta size does not match batch");
  if (!augment.empty() && augment.size() != batch.size()) {
    throw ShapeError("matching objective: one augmentation per poison is required");
  }
  Evaluation out;
  if (want_gradient) out.gradient.assign(delta.size(), 0.0);
  std::vector<double> member_grad;
  const double inv = 1.0 / static_cast<double>(ensemble_.size());
  for (std::size_t m = 0; m < ensemble_.size(); ++m) {
    out.loss += inv * member_loss(m, batch, delta, augment, want_gradient ? &member_grad : nullptr, counter_rng);
    if (want_gradient) {
      for (std::size_t i = 0; i < member_grad.size(); ++i) out.gradient[i] += inv * member_grad[i];
    }
  }
  return out;
}

double MatchingObjective::full_loss(const PoisonDelta& delta) const {
  if (delta.count() != poison_idx_.size()) throw ShapeError("matching objective: delta has the wrong poison count");
  const std::size_t p = poison_idx_.size();
  const std::size_t per = numel(image_shape_);
  double total = 0.0;
  std::size_t batches = 0;
  std::vector<std::size_t> batch;
  for (std::size_t start = 0; start < p; start += config_.poison_batch, ++batches) {
    const std::size_t end = std::min(p, start + config_.poison_batch);
    batch.resize(end - start);
    std::iota(batch.begin(), batch.end(), start);
    auto d = std::span<const double>(delta.values).subspan(start * per, (end - start) * per);
    total += evaluate(batch, d, {}, false).loss;
  }
  return total / static_cast<double>(batches);
}

// ---- optimizer and projection ----------------------------------------------------

void signed_adam_step(std::span<double> delta, std::span<const double> gradient, SignedAdamState& state,
                      double step, const BrewConfig& config) {
  if (gradient.size() != delta.size()) throw ShapeError("signed_adam_step: gradient size mismatch");
  if (state.m.size() != delta.size()) {
    state.m.assign(delta.size(), 0.0);
    state.v.assign(delta.size(), 0.0);
    state.t = 0;
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < delta.size(); ++i) {
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * gradient[i];
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * gradient[i] * gradient[i];
    const double direction = (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + config.adam_eps);
    if (direction > 0.0) {
      delta[i] -= step;
    } else if (direction < 0.0) {
      delta[i] += step;
    }
  }
}

void project(std::span<double> delta, std::span<const double> images, double epsilon) {
  if (delta.size() != images.size()) throw ShapeError("project: delta and images differ in size");
  for (std::size_t i = 0; i < delta.size(); ++i) {
    double d = std::clamp(delta[i], -epsilon, epsilon);
    const double x = images[i];
    if (x + d > 1.0) {
      d = 1.0 - x;
      // 1 - x can round up; step down until the sum is representable in range.
      while (x + d > 1.0) d = std::nextafter(d, -1.0);
    } else if (x + d < 0.0) {
      d = -x;
    }
    delta[i] = d;
  }
}

namespace {
std::vector<double> poison_images(const PoisonDelta& delta, const Dataset& train) {
  return train.batch(delta.indices).vector();
}

void check_in_loop(std::span<const double> delta, std::span<const double> images, double epsilon) {
  for (std::size_t i = 0; i < delta.size(); ++i) {
    if (!(std::abs(delta[i]) <= epsilon)) {
      throw ConstraintViolation("perturbation coordinate " + std::to_string(i) + " = " + std::to_string(delta[i]) +
                                " exceeds epsilon " + std::to_string(epsilon));
    }
    const double v = images[i] + delta[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ConstraintViolation("poisoned pixel " + std::to_string(i) + " = " + std::to_string(v) +
                                " leaves [0, 1]");
    }
  }
}
}  // namespace

void project(PoisonDelta& delta, const Dataset& train, const ThreatModel& threat) {
  const auto images = poison_images(delta, train);
  project(delta.values, images, threat.epsilon());
}

void check_constraints(const PoisonDelta& delta, const Dataset& train, double epsilon) {
  check_in_loop(delta.values, poison_images(delta, train), epsilon);
}

// ---- brewing ---------------------------------------------------------------------

MatchResult brew(std::span<const ModelParams> ensemble, const Dataset& train, const Dataset& validation,
                 const PoisonCase& c, const ThreatModel& threat, const BrewConfig& config, std::size_t threads) {
  threat.validate();
  config.validate();
  if (ensemble.size() != config.ensemble) {
    throw ConfigError("brew.ensemble: configured " + std::to_string(config.ensemble) + " models but " +
                      std::to_string(ensemble.size()) + " were supplied");
  }
  const MatchingObjective objective(std::vector<ModelParams>(ensemble.begin(), ensemble.end()), train, validation,
                                    c, config);
  const double eps = threat.epsilon();
  const std::size_t p = c.poison_count();
  const std::size_t per = train.image_size();
  const std::vector<double> images = train.batch(c.poison_indices).vector();

  std::vector<RestartDiagnostics> diags(config.restarts);
  std::vector<PoisonDelta> deltas(config.restarts);
  parallel_for(config.restarts, threads, [&](std::size_t r) {
    RestartDiagnostics& diag = diags[r];
    PoisonDelta& delta = deltas[r];
    try {
      delta = PoisonDelta::zeros(train.image_shape, c.poison_indices);
      Rng init = Rng::stream(config.seed, "brew-init", {r});
      for (auto& v : delta.values) v = eps > 0.0 ? init.uniform(-eps, eps) : 0.0;
      project(delta.values, images, eps);
      check_in_loop(delta.values, images, eps);
      ++diag.constraint_checks;
      diag.initial_loss = objective.full_loss(delta);

      SignedAdamState state;
      std::vector<std::size_t> order(p), batch;
      std::vector<double> grad(delta.values.size()), batch_delta;
      std::vector<AugmentParams> augs;
      // With eps = 0 the feasible set is {0}; there is nothing to optimize.
      const std::size_t steps = eps > 0.0 ? config.steps : 0;
      for (std::size_t k = 0; k < steps; ++k) {
        std::iota(order.begin(), order.end(), 0);
        if (p > config.poison_batch) {
          Rng shuffle = Rng::stream(config.seed, "brew-batches", {r, k});
          for (std::size_t i = p; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
        }
        const std::size_t batches = (p + config.poison_batch - 1) / config.poison_batch;
        std::fill(grad.begin(), grad.end(), 0.0);
        double loss = 0.0;
        for (std::size_t bi = 0; bi < batches; ++bi) {
          const std::size_t start = bi * config.poison_batch, end = std::min(p, start + config.poison_batch);
          batch.assign(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
          batch_delta.resize(batch.size() * per);
          augs.clear();
          for (std::size_t j = 0; j < batch.size(); ++j) {
            std::copy_n(delta.values.begin() + static_cast<long>(batch[j] * per), per,
                        batch_delta.begin() + static_cast<long>(j * per));
            if (config.augment) {
              Rng arng = Rng::stream(config.seed, "brew-augment", {r, k, batch[j]});
              augs.push_back(draw_continuous(arng, config.padding));
            }
          }
          Rng counter = Rng::stream(config.seed, "brew-counter", {r, k, bi});
          const auto e = objective.evaluate(batch, batch_delta, augs, true, &counter);
          loss += e.loss / static_cast<double>(batches);
          for (std::size_t j = 0; j < batch.size(); ++j) {
            for (std::size_t i = 0; i < per; ++i) {
              grad[batch[j] * per + i] = e.gradient[j * per + i] / static_cast<double>(batches);
            }
          }
        }
        diag.step_losses.push_back(loss);
        signed_adam_step(delta.values, grad, state, config.step_length(k, eps), config);
        project(delta.values, images, eps);
        check_in_loop(delta.values, images, eps);
        ++diag.constraint_checks;
      }
      diag.final_loss = objective.full_loss(delta);
    } catch (const ConstraintViolation&) {
      throw;
    } catch (const Error& e) {
      diag.error = e.what();
      diag.final_loss = std::numeric_limits<double>::infinity();
    }
  });

  MatchResult result;
  result.restarts = diags;
  bool any = false;
  for (std::size_t r = 0; r < config.restarts; ++r) {
    result.final_losses.push_back(diags[r].final_loss);
    result.constraint_checks += diags[r].constraint_checks;
    if (!diags[r].error.empty()) continue;
    if (!any || diags[r].final_loss < diags[result.chosen].final_loss) result.chosen = r;
    any = true;
  }
  if (!any) {
    std::string msg = "brew: every restart failed:";
    for (std::size_t r = 0; r < config.restarts; ++r) msg += " [restart " + std::to_string(r) + ": " + diags[r].error + "]";
    throw Error(msg);
  }
  result.delta = std::move(deltas[result.chosen]);
  return result;
}

}  // namespace brewlab
