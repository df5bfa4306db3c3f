#include "brewlab/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "brewlab/errors.hpp"
#include "brewlab/parallel.hpp"
#include "brewlab/rng.hpp"

namespace brewlab {

// ---- success evaluation ----------------------------------------------------------

std::uint64_t victim_seed(std::uint64_t suite_seed, std::size_t case_index, std::size_t victim_index) {
  return Rng::stream(suite_seed, "victim", {case_index, victim_index}).next_u64();
}

std::pair<double, double> mean_and_standard_error(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

EvalReport evaluate_case_suite(std::span<const PoisonPackage> packages, const Dataset& train,
                               const Dataset& validation, const ModelSpec& spec, const TrainConfig& train_config,
                               const SuiteOptions& options) {
  if (options.victims == 0) throw ConfigError("eval.victims: must be at least 1");
  EvalReport report;
  report.cases = packages.size();
  report.victims = options.victims;
  report.runs.resize(packages.size() * options.victims);

  parallel_for(report.runs.size(), options.threads, [&](std::size_t job) {
    const std::size_t ci = job / options.victims, vi = job % options.victims;
    const PoisonPackage& pkg = packages[ci];
    VictimRun& run = report.runs[job];
    run.case_index = ci;
    run.victim_index = vi;
    run.seed = victim_seed(options.seed, ci, vi);
    const Dataset poisoned = apply_poison(train, pkg.delta);
    TrainConfig config = train_config;
    config.seed = run.seed;
    const Tensor targets = validation.batch(pkg.poison_case.target_indices);
    std::optional<AlignmentMonitor> monitor;
    if (options.monitor_alignment) {
      monitor.emplace(targets, pkg.poison_case.adversarial_class, pkg.poison_case.target_class);
    }
    try {
      TrainTrace trace = train_victim(poisoned, validation, spec, config, options.dp, monitor ? &*monitor : nullptr);
      run.predictions = predict(trace.final_params, targets);
      std::size_t hits = 0;
      for (int p : run.predictions) hits += p == pkg.poison_case.adversarial_class;
      run.success = static_cast<double>(hits) / static_cast<double>(run.predictions.size());
      run.validation_accuracy = trace.epochs.empty() ? accuracy(trace.final_params, validation)
                                                     : trace.epochs.back().validation_accuracy;
      run.epochs = std::move(trace.epochs);
      if (options.keep_params) run.final_params = std::move(trace.final_params);
    } catch (const DivergenceError& e) {
      run.diverged = true;
      run.error = e.what();
    }
  });

  std::vector<double> accs;
  for (std::size_t ci = 0; ci < packages.size(); ++ci) {
    double sum = 0.0;
    for (std::size_t vi = 0; vi < options.victims; ++vi) {
      const VictimRun& run = report.runs[ci * options.victims + vi];
      sum += run.success;
      if (run.diverged) {
        ++report.diverged_runs;
      } else {
        accs.push_back(run.validation_accuracy);
      }
    }
    report.case_success.push_back(sum / static_cast<double>(options.victims));
  }
  std::tie(report.avg_success, report.standard_error) = mean_and_standard_error(report.case_success);
  report.mean_validation_accuracy = mean_and_standard_error(accs).first;
  return report;
}

// ---- gradient alignment ----------------------------------------------------------

AlignmentMonitor::AlignmentMonitor(Tensor targets, int adversarial_class, int original_class, double beta)
    : targets_(std::move(targets)),
      adv_labels_(targets_.dim(0), adversarial_class),
      orig_labels_(targets_.dim(0), original_class),
      beta_(beta) {}

void AlignmentMonitor::on_batch(std::size_t epoch, const ModelParams& params, const GradientVector& data_gradient) {
  const GradientVector adv = loss_gradient(params, targets_, adv_labels_, true);
  const GradientVector orig = loss_gradient(params, targets_, orig_labels_, true);
  const auto ca = cosine(adv.values, data_gradient.values);
  const auto co = cosine(orig.values, data_gradient.values);
  if (!ca || !co) {
    ++skipped_;
  }
  if (ca) {
    adv_sum_ += *ca;
    ++adv_count_;
    const double ng = l2_norm(data_gradient.values), na = l2_norm(adv.values);
    bounds_.push_back({epoch, *ca, beta_ * *ca * ng / na, beta_ * *ca * na / ng});
  }
  if (co) {
    orig_sum_ += *co;
    ++orig_count_;
  }
}

void AlignmentMonitor::on_epoch_end(std::size_t, EpochStats& stats) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  adv_series_.push_back(adv_count_ ? adv_sum_ / static_cast<double>(adv_count_) : nan);
  orig_series_.push_back(orig_count_ ? orig_sum_ / static_cast<double>(orig_count_) : nan);
  if (adv_count_) stats.alignment_adversarial = adv_series_.back();
  if (orig_count_) stats.alignment_original = orig_series_.back();
  adv_sum_ = orig_sum_ = 0.0;
  adv_count_ = orig_count_ = 0;
}

// ---- descent verifier ------------------------------------------------------------

namespace {
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

Mat as_matrix(const std::vector<double>& v, std::size_t d) {
  if (v.size() != d * d) throw ShapeError("descent verifier: matrix size mismatch");
  return Eigen::Map<const Mat>(v.data(), static_cast<long>(d), static_cast<long>(d));
}

Vec as_vector(const std::vector<double>& v, std::size_t d) {
  if (v.size() != d) throw ShapeError("descent verifier: vector size mismatch");
  return Eigen::Map<const Vec>(v.data(), static_cast<long>(d));
}

double largest_eigenvalue(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> solver(m, Eigen::EigenvaluesOnly);
  return solver.eigenvalues().maxCoeff();
}

// Change of L_adv along -alpha g, expanded exactly for the quadratic.
double adv_change(const Vec& h, const Vec& g, const Mat& b, double alpha) {
  return -alpha * h.dot(g) + 0.5 * alpha * alpha * g.dot(b * g);
}
}  // namespace

DescentCheckReport verify_descent(const QuadraticInstance& q, double beta, std::size_t steps, std::uint64_t seed) {
  if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("descent verifier: beta must lie in (0, 1)");
  const std::size_t d = q.dimension;
  const Mat a = as_matrix(q.a_matrix, d), b = as_matrix(q.b_matrix, d);
  const Vec ca = as_vector(q.a_center, d), cb = as_vector(q.b_center, d);
  Vec theta = as_vector(q.start, d);
  const double lip = largest_eigenvalue(b);
  const double train_lip = largest_eigenvalue(a);
  Rng rng = Rng::stream(seed, "descent-steps");

  DescentCheckReport r;
  r.instances = 1;
  for (std::size_t k = 0; k < steps; ++k) {
    const Vec g = a * (theta - cb);   // grad L
    const Vec h = b * (theta - ca);   // grad L_adv
    const double ng = g.norm(), nh = h.norm();
    if (ng == 0.0 || nh == 0.0) break;
    ++r.steps;
    const double cos = g.dot(h) / (ng * nh);
    const double u = rng.uniform(0.5, 1.0);
    if (cos <= 0.0) {
      // The bound is non-positive: no admissible step exists, so the claim is vacuous.
      ++r.premise_unsatisfied;
      theta -= (1.0 / train_lip) * g;
      continue;
    }
    ++r.premise_satisfied;
    const double alpha = u * beta * cos * (nh / ng) / lip;
    if (adv_change(h, g, b, alpha) >= 0.0) ++r.violations;
    const double printed_alpha = u * beta * cos * (ng / nh) / lip;
    ++r.printed_form_steps;
    if (adv_change(h, g, b, printed_alpha) >= 0.0) ++r.printed_form_violations;
    theta -= alpha * g;
  }
  return r;
}

DescentCheckReport prop1_toy_verifier(std::size_t dimension, std::size_t instances, std::uint64_t seed, double beta,
                                      std::size_t steps) {
  if (dimension == 0) throw ConfigError("descent verifier: dimension must be positive");
  DescentCheckReport total;
  const std::size_t d = dimension;
  for (std::size_t i = 0; i < instances; ++i) {
    Rng rng = Rng::stream(seed, "quadratic", {i});
    auto spd = [&] {
      Mat m(d, d);
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c) m(static_cast<long>(r), static_cast<long>(c)) = rng.normal();
      Mat s = m.transpose() * m / static_cast<double>(d);
      s += 0.1 * Mat::Identity(static_cast<long>(d), static_cast<long>(d));
      return std::vector<double>(s.data(), s.data() + d * d);
    };
    auto vec = [&](double scale) {
      std::vector<double> v(d);
      for (auto& x : v) x = scale * rng.normal();
      return v;
    };
    QuadraticInstance q{d, spd(), spd(), vec(1.0), vec(1.0), vec(3.0)};
    const auto r = verify_descent(q, beta, steps, Rng::stream(seed, "instance-steps", {i}).next_u64());
    total.instances += 1;
    total.steps += r.steps;
    total.premise_satisfied += r.premise_satisfied;
    total.premise_unsatisfied += r.premise_unsatisfied;
    total.violations += r.violations;
    total.printed_form_violations += r.printed_form_violations;
    total.printed_form_steps += r.printed_form_steps;
  }
  return total;
}

// ---- defenses --------------------------------------------------------------------

std::vector<bool> filter_by_centroid(const Tensor& features, std::span<const int> labels, std::size_t classes,
                                     double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("defense.fraction: must lie in [0, 1]");
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw ShapeError("filter: features must be [N, F] with one label per row");
  }
  const std::size_t n = features.dim(0), f = features.dim(1);
  std::vector<std::vector<std::size_t>> members(classes);
  for (std::size_t i = 0; i < n; ++i) members.at(static_cast<std::size_t>(labels[i])).push_back(i);

  std::vector<bool> removed(n, false);
  for (const auto& idx : members) {
    if (idx.empty()) continue;
    std::vector<double> centroid(f, 0.0);
    for (auto i : idx)
      for (std::size_t j = 0; j < f; ++j) centroid[j] += features[i * f + j];
    for (auto& c : centroid) c /= static_cast<double>(idx.size());
    std::vector<std::pair<double, std::size_t>> dist;
    for (auto i : idx) {
      double s = 0.0;
      for (std::size_t j = 0; j < f; ++j) {
        const double e = features[i * f + j] - centroid[j];
        s += e * e;
      }
      dist.emplace_back(s, i);
    }
    // Farthest first; equal distances remove the lower index first.
    std::stable_sort(dist.begin(), dist.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
    const auto k = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
    for (std::size_t r = 0; r < k; ++r) removed[dist[r].second] = true;
  }
  return removed;
}

FilterReport filter_report(const std::vector<bool>& removed, std::span<const int> labels, const PoisonCase& c,
                           double fraction) {
  FilterReport r;
  r.fraction = fraction;
  std::vector<bool> is_poison(labels.size(), false);
  for (auto i : c.poison_indices) is_poison.at(i) = true;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    r.total_removed += removed[i];
    if (labels[i] != c.adversarial_class) continue;
    if (is_poison[i]) {
      ++r.poisons;
      r.poisons_removed += removed[i];
    } else {
      ++r.poison_class_clean;
      r.clean_removed += removed[i];
    }
  }
  r.random_poisons_removed = fraction * static_cast<double>(r.poisons);
  r.random_clean_removed = fraction * static_cast<double>(r.poison_class_clean);
  return r;
}

FilterReport feature_filter_defense(const Dataset& poisoned, const ModelParams& victim, const PoisonCase& c,
                                    double fraction) {
  constexpr std::size_t kChunk = 256;
  std::vector<double> all;
  std::size_t width = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < poisoned.size(); start += kChunk) {
    idx.resize(std::min(kChunk, poisoned.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor f = penultimate_features(victim, poisoned.batch(idx));
    width = f.dim(1);
    all.insert(all.end(), f.data().begin(), f.data().end());
  }
  const Tensor features(Shape{poisoned.size(), width}, std::move(all));
  const auto removed = filter_by_centroid(features, poisoned.labels, poisoned.classes, fraction);
  return filter_report(removed, poisoned.labels, c, fraction);
}

std::vector<DPPoint> dp_defense_sweep(std::span<const PoisonPackage> packages, const Dataset& train,
                                      const Dataset& validation, const ModelSpec& spec,
                                      const TrainConfig& train_config, std::span<const double> sigmas,
                                      const SuiteOptions& options, double clip) {
  std::vector<DPPoint> curve;
  for (double sigma : sigmas) {
    SuiteOptions o = options;
    o.dp = DPConfig{sigma > 0.0, clip, sigma};
    curve.push_back({sigma, evaluate_case_suite(packages, train, validation, spec, train_config, o)});
  }
  return curve;
}

}  // namespace brewlab
