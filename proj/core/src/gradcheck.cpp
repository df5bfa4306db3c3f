#include "brewlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "brewlab/augment.hpp"
#include "brewlab/autograd.hpp"
#include "brewlab/brewer.hpp"
#include "brewlab/data.hpp"
#include "brewlab/errors.hpp"
#include "brewlab/nn.hpp"
#include "brewlab/ops.hpp"
#include "brewlab/rng.hpp"

namespace brewlab {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

FiniteDiffReport finite_diff_check(const ScalarFunction& f, const Tensor& point, double step,
                                   std::span<const std::size_t> coords) {
  Tensor grad(point.shape());
  const double f0 = f(point, &grad);
  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(point.numel());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    coords = all;
  }
  FiniteDiffReport report;
  Tensor x = point;
  for (std::size_t i : coords) {
    if (i >= point.numel()) throw ShapeError("finite_diff_check: coordinate out of range");
    // Central difference plus the gap between the one-sided ones.
    auto probe = [&](double h) {
      const double orig = x[i];
      x[i] = orig + h;
      const double fp = f(x, nullptr);
      x[i] = orig - h;
      const double fm = f(x, nullptr);
      x[i] = orig;
      const double fwd = (fp - f0) / h, bwd = (f0 - fm) / h;
      const double gap = std::abs(fwd - bwd);
      return std::pair{(fp - fm) / (2.0 * h), gap > 1e-3 * std::max(std::abs(fwd), std::abs(bwd)) + 1e-8 ? gap : 0.0};
    };
    CoordinateCheck c;
    c.index = i;
    c.analytic = grad[i];
    auto [numeric, gap] = probe(step);
    if (gap > 0.0) {
      // Curvature shrinks the gap with the step; a kink inside the step does not.
      const auto [fine, fine_gap] = probe(step / 4.0);
      if (fine_gap < 0.5 * gap) {
        numeric = fine;
      } else {
        c.kink = true;
      }
    }
    c.numeric = numeric;
    c.rel_error = relative_error(c.analytic, c.numeric);
    if (c.kink) {
      ++report.kinks;
    } else {
      report.max_rel_error = std::max(report.max_rel_error, c.rel_error);
    }
    report.coordinates.push_back(c);
  }
  return report;
}

namespace {

using Builder = std::function<Var(Graph&, std::span<const Var>)>;
using Sampler = std::function<Tensor(Rng&)>;

Tensor gaussian(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t(shape);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Sampler normal_of(Shape shape, double scale = 1.0) {
  return [shape, scale](Rng& rng) { return gaussian(shape, rng, scale); };
}

Sampler uniform_of(Shape shape, double lo, double hi) {
  return [shape, lo, hi](Rng& rng) { return uniform(shape, rng, lo, hi); };
}

/// Indices of at most `cap` distinct coordinates of a tensor of size n.
std::vector<std::size_t> pick_coordinates(std::size_t n, std::size_t cap, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (n <= cap) return idx;
  for (std::size_t i = 0; i < cap; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  return idx;
}

constexpr std::size_t kCoordinateCap = 40;

void merge(GradcheckEntry& entry, const FiniteDiffReport& r) {
  entry.coordinates += r.coordinates.size();
  entry.kinks += r.kinks;
  entry.max_rel_error = std::max(entry.max_rel_error, r.max_rel_error);
}

void finish(GradcheckEntry& entry, double tolerance) {
  // Kinks are excluded from the error, so a check where they are common proves little.
  entry.passed = entry.max_rel_error < tolerance && entry.kinks * 10 <= entry.coordinates;
}

/// sum(w * op(inputs)) checked with respect to every input in turn.
GradcheckEntry check_op(const std::string& name, std::vector<Sampler> samplers, const Builder& op,
                        const GradcheckOptions& options, std::vector<bool> differentiable = {}) {
  GradcheckEntry entry;
  entry.name = name;
  Rng rng = Rng::stream(options.seed, "gradcheck", {hash_name(name)});
  if (differentiable.empty()) differentiable.assign(samplers.size(), true);
  for (std::size_t p = 0; p < options.points; ++p) {
    std::vector<Tensor> inputs;
    for (const auto& s : samplers) inputs.push_back(s(rng));
    Tensor weights;
    {
      Graph g;
      std::vector<Var> vars;
      for (const auto& t : inputs) vars.push_back(g.constant(t));
      weights = gaussian(op(g, vars).shape(), rng);
    }
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (!differentiable[k]) continue;
      ScalarFunction f = [&](const Tensor& x, Tensor* grad) {
        Graph g;
        std::vector<Var> vars;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          vars.push_back(j == k ? g.leaf(x, true) : g.constant(inputs[j]));
        }
        const Var out = op(g, vars);
        const Var s = ops::dot(ops::reshape(out, {out.value().numel()}),
                               g.constant(weights.reshaped({weights.numel()})));
        const double value = s.value().item();
        if (grad) {
          const Var wrt = vars[k];
          *grad = g.grad(s, std::span<const Var>(&wrt, 1))[0].value();
        }
        return value;
      };
      const auto coords = pick_coordinates(inputs[k].numel(), kCoordinateCap, rng);
      merge(entry, finite_diff_check(f, inputs[k], options.step, coords));
    }
    ++entry.points;
  }
  finish(entry, options.tolerance);
  return entry;
}

/// Scalar function of a single tensor, checked at random points.
GradcheckEntry check_function(const std::string& name, const Sampler& sampler, const ScalarFunction& f,
                              const GradcheckOptions& options) {
  GradcheckEntry entry;
  entry.name = name;
  Rng rng = Rng::stream(options.seed, "gradcheck", {hash_name(name)});
  for (std::size_t p = 0; p < options.points; ++p) {
    const Tensor x = sampler(rng);
    const auto coords = pick_coordinates(x.numel(), kCoordinateCap, rng);
    merge(entry, finite_diff_check(f, x, options.step, coords));
    ++entry.points;
  }
  finish(entry, options.tolerance);
  return entry;
}

ops::SparseMap random_sparse_map(Rng& rng) {
  ops::SparseMap m;
  m.in_shape = {2, 5};
  m.out_shape = {3, 3};
  m.row_start.push_back(0);
  for (std::size_t r = 0; r < 9; ++r) {
    for (std::uint32_t c = 0; c < 10; ++c) {
      if (rng.bernoulli(0.3)) {
        m.cols.push_back(c);
        m.weights.push_back(rng.normal());
      }
    }
    m.row_start.push_back(static_cast<std::uint32_t>(m.cols.size()));
  }
  return m;
}

/// Loss of a model on a fixed batch; optionally through a fixed fractional
/// augmentation of the input.
struct DoubleBackpropCase {
  ModelParams params;
  Tensor batch;
  std::vector<int> labels;
  Tensor direction;  // fixed vector the parameter gradient is compared with
  std::vector<AugmentParams> augment;
  std::size_t padding = 0;
};

/// t(x) = cosine(grad_theta CE(model(aug(x))), direction) + 0.1 * |grad_theta|^2,
/// differentiated with respect to the input batch x.
ScalarFunction double_backprop_function(const DoubleBackpropCase& c) {
  return [&c](const Tensor& x, Tensor* grad) {
    Graph g;
    const auto theta = bind_params(g, c.params, true);
    const Var input = g.leaf(x, true);
    const Var fed = c.augment.empty() ? input : augment_differentiable(input, c.augment, c.padding);
    const auto out = forward(c.params.spec, theta, fed);
    const Var loss = ops::cross_entropy(out.logits, c.labels, ops::Reduction::kMean);
    const auto inner = g.grad(loss, theta, {.create_graph = true});
    std::vector<Var> dir;
    std::size_t offset = 0;
    for (const auto& v : inner) {
      const std::size_t n = v.value().numel();
      std::vector<double> part(c.direction.data().begin() + static_cast<long>(offset),
                               c.direction.data().begin() + static_cast<long>(offset + n));
      dir.push_back(g.constant(Tensor(v.shape(), std::move(part))));
      offset += n;
    }
    const Var t = ops::add(ops::cosine_similarity(inner, dir), ops::scale(ops::squared_norm(inner), 0.1));
    const double value = t.value().item();
    if (grad) *grad = g.grad(t, std::span<const Var>(&input, 1))[0].value();
    return value;
  };
}

DoubleBackpropCase make_double_backprop_case(const ModelSpec& spec, const Shape& batch_shape, bool augment,
                                             Rng& rng) {
  DoubleBackpropCase c;
  c.params = build(spec, rng.next_u64());
  c.batch = uniform(batch_shape, rng, 0.0, 1.0);
  for (std::size_t b = 0; b < batch_shape[0]; ++b) c.labels.push_back(static_cast<int>(rng.below(spec.classes)));
  c.direction = gaussian({c.params.count()}, rng);
  if (augment) {
    c.padding = 2;
    for (std::size_t b = 0; b < batch_shape[0]; ++b) {
      AugmentParams a = draw_continuous(rng, c.padding);
      // Keep shifts fractional so every output pixel mixes four inputs.
      if (a.dx == std::floor(a.dx)) a.dx += 0.5;
      if (a.dy == std::floor(a.dy)) a.dy += 0.5;
      a.dx = std::clamp(a.dx, -1.5, 1.5);
      a.dy = std::clamp(a.dy, -1.5, 1.5);
      c.augment.push_back(a);
    }
  }
  return c;
}

GradcheckEntry check_double_backprop(const std::string& name, const ModelSpec& spec, const Shape& batch_shape,
                                     bool augment, const GradcheckOptions& options) {
  GradcheckEntry entry;
  entry.name = name;
  Rng rng = Rng::stream(options.seed, "gradcheck", {hash_name(name)});
  for (std::size_t p = 0; p < options.points; ++p) {
    const DoubleBackpropCase c = make_double_backprop_case(spec, batch_shape, augment, rng);
    const auto coords = pick_coordinates(c.batch.numel(), kCoordinateCap, rng);
    merge(entry, finite_diff_check(double_backprop_function(c), c.batch, options.step, coords));
    ++entry.points;
  }
  finish(entry, options.tolerance);
  return entry;
}

/// B with respect to the perturbation of the poisons, for one objective.
GradcheckEntry check_matching(Objective objective, const GradcheckOptions& options) {
  GradcheckEntry entry;
  entry.name = "matching/" + to_string(objective);
  Rng rng = Rng::stream(options.seed, "gradcheck", {static_cast<std::uint64_t>(objective) + 1000});
  SynthParams sp;
  sp.classes = 3;
  sp.per_class = 4;
  sp.height = sp.width = 9;
  sp.seed = options.seed;
  const Dataset train = synth_dataset(sp, Split::kTrain);
  SynthParams vp = sp;
  vp.per_class = 2;
  const Dataset validation = synth_dataset(vp, Split::kValidation);
  ModelSpec spec = ModelSpec::convnet(train.image_shape, 3);
  spec.widths = {3, 3, 3, 3, 3};
  BrewConfig config;
  config.objective = objective;
  config.padding = 2;
  for (std::size_t p = 0; p < options.points; ++p) {
    const ModelParams model = build(spec, rng.next_u64());
    const PoisonCase c = sample_case(train, validation, 0.25, 1, rng.next_u64());
    const MatchingObjective obj({model}, train, validation, c, config);
    std::vector<std::size_t> batch(c.poison_count());
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = i;
    std::vector<AugmentParams> augment;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      AugmentParams a = draw_continuous(rng, 2);
      a.dx = std::clamp(a.dx, -1.5, 1.5) + (a.dx == std::floor(a.dx) ? 0.25 : 0.0);
      a.dy = std::clamp(a.dy, -1.5, 1.5) + (a.dy == std::floor(a.dy) ? 0.25 : 0.0);
      augment.push_back(a);
    }
    const Tensor delta = uniform({batch.size() * train.image_size()}, rng, -0.03, 0.03);
    ScalarFunction f = [&](const Tensor& d, Tensor* grad) {
      const auto e = obj.evaluate(batch, d.data(), augment, grad != nullptr);
      if (grad) *grad = Tensor(d.shape(), e.gradient);
      return e.loss;
    };
    const auto coords = pick_coordinates(delta.numel(), kCoordinateCap, rng);
    merge(entry, finite_diff_check(f, delta, options.step, coords));
    ++entry.points;
  }
  finish(entry, options.tolerance);
  return entry;
}

}  // namespace

std::vector<GradcheckEntry> run_gradcheck_suite(const GradcheckOptions& options) {
  std::vector<GradcheckEntry> out;
  const auto& o = options;
  auto add = [&](GradcheckEntry e) { out.push_back(std::move(e)); };
  const Shape v{6}, m{3, 4};

  add(check_op("add", {normal_of(m), normal_of(m)}, [](Graph&, auto in) { return ops::add(in[0], in[1]); }, o));
  add(check_op("sub", {normal_of(m), normal_of(m)}, [](Graph&, auto in) { return ops::sub(in[0], in[1]); }, o));
  add(check_op("mul", {normal_of(m), normal_of(m)}, [](Graph&, auto in) { return ops::mul(in[0], in[1]); }, o));
  add(check_op("div", {normal_of(m), uniform_of(m, 0.5, 2.0)},
               [](Graph&, auto in) { return ops::div(in[0], in[1]); }, o));
  add(check_op("neg", {normal_of(m)}, [](Graph&, auto in) { return ops::neg(in[0]); }, o));
  add(check_op("sqrt", {uniform_of(m, 0.5, 2.0)}, [](Graph&, auto in) { return ops::sqrt(in[0]); }, o));
  add(check_op("scale", {normal_of(m)}, [](Graph&, auto in) { return ops::scale(in[0], -1.7); }, o));
  add(check_op("mul_scalar", {normal_of(m), normal_of({})},
               [](Graph&, auto in) { return ops::mul_scalar(in[0], in[1]); }, o));
  add(check_op("sum", {normal_of(m)}, [](Graph&, auto in) { return ops::sum(in[0]); }, o));
  add(check_op("broadcast_scalar", {normal_of({})},
               [](Graph&, auto in) { return ops::broadcast_scalar(in[0], {2, 3}); }, o));
  add(check_op("dot", {normal_of(v), normal_of(v)}, [](Graph&, auto in) { return ops::dot(in[0], in[1]); }, o));
  add(check_op("reshape", {normal_of(m)}, [](Graph&, auto in) { return ops::reshape(in[0], {2, 6}); }, o));
  for (int t = 0; t < 4; ++t) {
    const bool ta = t & 1, tb = t & 2;
    add(check_op(std::string("matmul") + (ta ? "_ta" : "") + (tb ? "_tb" : ""),
                 {normal_of(ta ? Shape{4, 3} : Shape{3, 4}), normal_of(tb ? Shape{5, 4} : Shape{4, 5})},
                 [ta, tb](Graph&, auto in) { return ops::matmul(in[0], in[1], ta, tb); }, o));
  }
  add(check_op("linear", {normal_of({3, 4}), normal_of({5, 4}), normal_of({5})},
               [](Graph&, auto in) { return ops::linear(in[0], in[1], in[2]); }, o));
  add(check_op("add_row_bias", {normal_of(m), normal_of({4})},
               [](Graph&, auto in) { return ops::add_row_bias(in[0], in[1]); }, o));
  add(check_op("sum_rows", {normal_of(m)}, [](Graph&, auto in) { return ops::sum_rows(in[0]); }, o));
  add(check_op("broadcast_rows", {normal_of({4})},
               [](Graph&, auto in) { return ops::broadcast_rows(in[0], 3); }, o));
  const Shape img{2, 3, 5, 5};
  add(check_op("add_channel_bias", {normal_of(img), normal_of({3})},
               [](Graph&, auto in) { return ops::add_channel_bias(in[0], in[1]); }, o));
  add(check_op("sum_channels", {normal_of(img)}, [](Graph&, auto in) { return ops::sum_channels(in[0]); }, o));
  add(check_op("broadcast_channels", {normal_of({3})},
               [img](Graph&, auto in) { return ops::broadcast_channels(in[0], img); }, o));
  add(check_op("conv2d", {normal_of(img), normal_of({4, 3, 3, 3})},
               [](Graph&, auto in) { return ops::conv2d(in[0], in[1], 1); }, o));
  add(check_op("conv2d_nopad", {normal_of(img), normal_of({2, 3, 3, 3})},
               [](Graph&, auto in) { return ops::conv2d(in[0], in[1], 0); }, o));
  add(check_op("conv2d_input_grad", {normal_of({2, 4, 5, 5}), normal_of({4, 3, 3, 3})},
               [](Graph&, auto in) { return ops::conv2d_input_grad(in[0], in[1], 1, 5, 5); }, o));
  add(check_op("conv2d_weight_grad", {normal_of(img), normal_of({2, 4, 5, 5})},
               [](Graph&, auto in) { return ops::conv2d_weight_grad(in[0], in[1], 1, 3); }, o));
  add(check_op("relu", {normal_of(m)}, [](Graph&, auto in) { return ops::relu(in[0]); }, o));
  add(check_op("max_pool2d", {normal_of({2, 2, 6, 6})},
               [](Graph&, auto in) { return ops::max_pool2d(in[0], 3); }, o));
  {
    auto index = std::make_shared<const ops::IndexMap>(ops::IndexMap{3, 0, 0, 5, 2, 3, 1});
    add(check_op("index_gather", {normal_of(v)},
                 [index](Graph&, auto in) { return ops::index_gather(in[0], index, {7}); }, o));
    add(check_op("index_scatter", {normal_of({7})},
                 [index](Graph&, auto in) { return ops::index_scatter(in[0], index, {6}); }, o));
  }
  add(check_op("softmax", {normal_of(m)}, [](Graph&, auto in) { return ops::softmax(in[0]); }, o));
  add(check_op("row_sum_broadcast", {normal_of(m)},
               [](Graph&, auto in) { return ops::row_sum_broadcast(in[0]); }, o));
  add(check_op("cross_entropy_mean", {normal_of({4, 5}, 2.0)},
               [](Graph&, auto in) { return ops::cross_entropy(in[0], {0, 3, 4, 3}); }, o));
  add(check_op("cross_entropy_sum", {normal_of({4, 5}, 2.0)},
               [](Graph&, auto in) { return ops::cross_entropy(in[0], {1, 1, 2, 0}, ops::Reduction::kSum); }, o));
  {
    Rng mr = Rng::stream(o.seed, "gradcheck-sparse");
    auto map = std::make_shared<const ops::SparseMap>(random_sparse_map(mr));
    add(check_op("sparse_linear", {normal_of({2, 5})},
                 [map](Graph&, auto in) { return ops::sparse_linear(in[0], map); }, o));
    add(check_op("sparse_linear_adjoint", {normal_of({3, 3})},
                 [map](Graph&, auto in) { return ops::sparse_linear_adjoint(in[0], map); }, o));
  }
  add(check_op("bilinear_augment", {uniform_of({2, 3, 6, 6}, 0.0, 1.0)},
               [](Graph&, auto in) {
                 const std::vector<AugmentParams> p{{false, 0.3, -1.6}, {true, -0.45, 0.8}};
                 return augment_differentiable(in[0], p, 2);
               },
               o));
  add(check_op("l2_norm", {normal_of(v)}, [](Graph&, auto in) { return ops::l2_norm(in[0]); }, o));
  add(check_op("cosine_similarity", {normal_of(v), normal_of(v)},
               [](Graph&, auto in) { return ops::cosine_similarity(in[0], in[1]); }, o));
  add(check_op("dot_list", {normal_of(m), normal_of({5}), normal_of(m), normal_of({5})},
               [](Graph&, auto in) {
                 const std::vector<Var> a{in[0], in[1]}, b{in[2], in[3]};
                 return ops::dot(a, b);
               },
               o));
  add(check_op("squared_norm_list", {normal_of(m), normal_of({5})},
               [](Graph&, auto in) {
                 const std::vector<Var> a{in[0], in[1]};
                 return ops::squared_norm(a);
               },
               o));
  add(check_op("cosine_list", {normal_of(m), normal_of({5}), normal_of(m), normal_of({5})},
               [](Graph&, auto in) {
                 const std::vector<Var> a{in[0], in[1]}, b{in[2], in[3]};
                 return ops::cosine_similarity(a, b);
               },
               o));

  // Composites: full model losses with respect to the parameters.
  const ModelSpec mlp = ModelSpec::mlp({6, 5, 4, 3});
  ModelSpec conv = ModelSpec::convnet({3, 9, 9}, 4);
  conv.widths = {3, 4, 4, 5, 5};
  conv.input_mean = {0.4, 0.5, 0.6};
  conv.input_std = {0.3, 0.2, 0.25};
  for (const auto& [name, spec, shape] :
       {std::tuple<std::string, ModelSpec, Shape>{"mlp_loss", mlp, {4, 6}}, {"convnet_loss", conv, {2, 3, 9, 9}}}) {
    Rng rng = Rng::stream(o.seed, "gradcheck-model", {spec.arch == Architecture::kMlp ? 0u : 1u});
    const Tensor batch = uniform(shape, rng, 0.0, 1.0);
    std::vector<int> labels;
    for (std::size_t b = 0; b < shape[0]; ++b) labels.push_back(static_cast<int>(b % spec.classes));
    const auto s = spec;
    add(check_function(
        name, [s](Rng& r) { return Tensor({parameter_count(s)}, build(s, r.next_u64()).theta); },
        [s, batch, labels](const Tensor& x, Tensor* grad) {
          ModelParams p = build(s, 0);
          p.theta = x.vector();
          double loss = 0.0;
          const GradientVector g = loss_gradient(p, batch, labels, false, &loss);
          if (grad) *grad = Tensor(x.shape(), g.values);
          return loss;
        },
        o));
  }

  add(check_double_backprop("double_backprop/mlp", mlp, {4, 6}, false, o));
  add(check_double_backprop("double_backprop/convnet", conv, {2, 3, 9, 9}, false, o));
  add(check_double_backprop("double_backprop/convnet_augmented", conv, {2, 3, 9, 9}, true, o));

  for (Objective obj : {Objective::kCosine, Objective::kEuclidean, Objective::kFeatureCollision,
                        Objective::kBullseye}) {
    add(check_matching(obj, o));
  }
  return out;
}

}  // namespace brewlab
