#include "brewlab/nn.hpp"

#include <algorithm>
#include <cmath>

#include "brewlab/errors.hpp"
#include "brewlab/ops.hpp"
#include "brewlab/rng.hpp"

namespace brewlab {

// ---- GradientVector / ParamLayout ------------------------------------------------

void ParamLayout::add(std::string name, Shape shape) {
  ParamSlot slot{std::move(name), std::move(shape), total_};
  total_ += slot.size();
  slots_.push_back(std::move(slot));
}

bool ParamLayout::is_bijective() const {
  std::size_t expected = 0;
  for (const auto& s : slots_) {
    if (s.offset != expected || s.size() == 0) return false;
    expected += s.size();
  }
  return expected == total_;
}

std::span<const double> GradientVector::slice(std::size_t slot) const {
  const auto& s = layout->slots()[slot];
  return std::span<const double>(values).subspan(s.offset, s.size());
}

Tensor GradientVector::tensor(std::size_t slot) const {
  auto sl = slice(slot);
  return Tensor(layout->slots()[slot].shape, std::vector<double>(sl.begin(), sl.end()));
}

namespace {
template <typename Get>
GradientVector flatten_impl(std::size_t n, Get get, std::shared_ptr<const ParamLayout> layout) {
  if (n != layout->slots().size()) throw ShapeError("flatten: tensor count does not match layout");
  GradientVector out{std::vector<double>(layout->total()), std::move(layout)};
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor& t = get(i);
    const auto& slot = out.layout->slots()[i];
    require_same_shape(t.shape(), slot.shape, "flatten " + slot.name);
    std::copy(t.data().begin(), t.data().end(), out.values.begin() + static_cast<long>(slot.offset));
  }
  return out;
}
}  // namespace

GradientVector flatten(std::span<const Var> grads, std::shared_ptr<const ParamLayout> layout) {
  return flatten_impl(grads.size(), [&](std::size_t i) -> const Tensor& { return grads[i].value(); },
                      std::move(layout));
}

GradientVector flatten(std::span<const Tensor> grads, std::shared_ptr<const ParamLayout> layout) {
  return flatten_impl(grads.size(), [&](std::size_t i) -> const Tensor& { return grads[i]; },
                      std::move(layout));
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

std::optional<double> cosine(std::span<const double> a, std::span<const double> b) {
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

// ---- ModelSpec -------------------------------------------------------------------

std::string to_string(Architecture a) { return a == Architecture::kMlp ? "mlp" : "convnet"; }

Architecture parse_architecture(const std::string& s) {
  if (s == "mlp") return Architecture::kMlp;
  if (s == "convnet") return Architecture::kConvNet;
  throw ConfigError("unknown architecture '" + s + "' (expected mlp or convnet)");
}

std::size_t WidthScale::apply(std::size_t width) const {
  const auto w = static_cast<std::int64_t>(width);
  const std::int64_t scaled = (w * num + den - 1) / den;
  return static_cast<std::size_t>(std::max<std::int64_t>(1, scaled));
}

std::string WidthScale::str() const { return std::to_string(num) + "/" + std::to_string(den); }

WidthScale WidthScale::parse(const std::string& s) {
  WidthScale r;
  try {
    const auto slash = s.find('/');
    if (slash == std::string::npos) {
      r.num = std::stoll(s);
      r.den = 1;
    } else {
      r.num = std::stoll(s.substr(0, slash));
      r.den = std::stoll(s.substr(slash + 1));
    }
  } catch (const std::exception&) {
    throw ConfigError("width scale '" + s + "' is not a rational number like 1/8");
  }
  if (r.num <= 0 || r.den <= 0) throw ConfigError("width scale must be positive, got " + s);
  return r;
}

ModelSpec ModelSpec::convnet(Shape input_shape, std::size_t classes, WidthScale scale) {
  ModelSpec s;
  s.input_shape = std::move(input_shape);
  s.classes = classes;
  s.width_scale = scale;
  return s;
}

ModelSpec ModelSpec::mlp(std::vector<std::size_t> widths) {
  ModelSpec s;
  s.arch = Architecture::kMlp;
  s.widths = std::move(widths);
  s.input_shape = {s.widths.empty() ? 0 : s.widths.front()};
  s.classes = s.widths.empty() ? 0 : s.widths.back();
  return s;
}

std::vector<std::size_t> ModelSpec::effective_widths() const {
  if (arch == Architecture::kMlp) return widths;
  std::vector<std::size_t> out;
  for (auto w : widths) out.push_back(width_scale.apply(w));
  return out;
}

void ModelSpec::validate() const {
  if (arch == Architecture::kMlp) {
    if (widths.size() < 2) throw ConfigError("model.widths: an mlp needs at least input and output widths");
    for (auto w : widths)
      if (w == 0) throw ConfigError("model.widths: widths must be positive");
    if (input_shape != Shape{widths.front()}) throw ConfigError("model.input_shape: must equal {widths[0]} for an mlp");
    if (classes != widths.back()) throw ConfigError("model.classes: must equal the last mlp width");
    return;
  }
  if (widths.size() != 5) throw ConfigError("model.widths: the convnet has exactly five conv widths");
  for (auto w : widths)
    if (w == 0) throw ConfigError("model.widths: widths must be positive");
  if (input_shape.size() != 3) throw ConfigError("model.input_shape: expected {channels, height, width}");
  for (auto d : input_shape)
    if (d == 0) throw ConfigError("model.input_shape: dimensions must be positive");
  if (kernel % 2 == 0 || kernel == 0) throw ConfigError("model.kernel: must be odd");
  if (pool == 0) throw ConfigError("model.pool: must be positive");
  if (classes < 2) throw ConfigError("model.classes: need at least two classes");
  if (input_mean.size() != input_std.size() || (!input_mean.empty() && input_mean.size() != input_shape[0])) {
    throw ConfigError("model.input_mean: need one mean and one std per input channel");
  }
  for (double s : input_std)
    if (!(s > 0.0)) throw ConfigError("model.input_std: must be positive");
  const std::size_t h = input_shape[1] / pool / pool;
  const std::size_t w = input_shape[2] / pool / pool;
  if (h == 0 || w == 0) {
    throw ShapeError("convnet: pooled spatial size reaches zero for input " + brewlab::to_string(input_shape) +
                     " with pool " + std::to_string(pool));
  }
}

std::size_t ModelSpec::feature_width() const {
  validate();
  if (arch == Architecture::kMlp) return widths.size() >= 3 ? widths[widths.size() - 2] : widths.front();
  const std::size_t h = input_shape[1] / pool / pool;
  const std::size_t w = input_shape[2] / pool / pool;
  return effective_widths().back() * h * w;
}

std::shared_ptr<const ParamLayout> make_layout(const ModelSpec& spec) {
  spec.validate();
  auto layout = std::make_shared<ParamLayout>();
  if (spec.arch == Architecture::kMlp) {
    for (std::size_t i = 0; i + 1 < spec.widths.size(); ++i) {
      const std::string p = "fc" + std::to_string(i + 1);
      layout->add(p + ".weight", {spec.widths[i + 1], spec.widths[i]});
      layout->add(p + ".bias", {spec.widths[i + 1]});
    }
    return layout;
  }
  const auto widths = spec.effective_widths();
  std::size_t in_c = spec.input_shape[0];
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::string p = "conv" + std::to_string(i + 1);
    layout->add(p + ".weight", {widths[i], in_c, spec.kernel, spec.kernel});
    layout->add(p + ".bias", {widths[i]});
    in_c = widths[i];
  }
  layout->add("linear.weight", {spec.classes, spec.feature_width()});
  layout->add("linear.bias", {spec.classes});
  return layout;
}

std::size_t parameter_count(const ModelSpec& spec) {
  spec.validate();
  std::size_t n = 0;
  if (spec.arch == Architecture::kMlp) {
    for (std::size_t i = 0; i + 1 < spec.widths.size(); ++i) n += (spec.widths[i] + 1) * spec.widths[i + 1];
    return n;
  }
  std::size_t in_c = spec.input_shape[0];
  for (auto w : spec.effective_widths()) {
    n += (in_c * spec.kernel * spec.kernel + 1) * w;
    in_c = w;
  }
  return n + (spec.feature_width() + 1) * spec.classes;
}

// ---- parameters ------------------------------------------------------------------

Tensor ModelParams::tensor(std::size_t slot) const {
  const auto& s = layout->slots()[slot];
  auto first = theta.begin() + static_cast<long>(s.offset);
  return Tensor(s.shape, std::vector<double>(first, first + static_cast<long>(s.size())));
}

ModelParams build(const ModelSpec& spec, std::uint64_t seed) {
  ModelParams p{spec, seed, {}, make_layout(spec)};
  p.theta.resize(p.layout->total());
  Rng rng = Rng::stream(seed, "init");
  const auto slots = p.layout->slots();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    // Weight and bias of a layer share the weight's fan-in.
    const auto& weight = slots[i % 2 == 0 ? i : i - 1];
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < weight.shape.size(); ++d) fan_in *= weight.shape[d];
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (std::size_t k = 0; k < slots[i].size(); ++k) p.theta[slots[i].offset + k] = rng.uniform(-bound, bound);
  }
  return p;
}

std::vector<Var> bind_params(Graph& graph, const ModelParams& params, bool requires_grad) {
  std::vector<Var> vars;
  for (std::size_t i = 0; i < params.layout->slots().size(); ++i) {
    vars.push_back(graph.leaf(params.tensor(i), requires_grad));
  }
  return vars;
}

ForwardResult forward(const ModelSpec& spec, std::span<const Var> params, const Var& input) {
  const Shape& xs = input.shape();
  Shape expected{xs.empty() ? 0 : xs[0]};
  expected.insert(expected.end(), spec.input_shape.begin(), spec.input_shape.end());
  if (xs != expected) {
    throw ShapeError("model input " + to_string(xs) + " does not match spec input " +
                     to_string(spec.input_shape));
  }
  const std::size_t batch = xs[0];

  if (spec.arch == Architecture::kMlp) {
    const std::size_t layers = spec.widths.size() - 1;
    if (params.size() != 2 * layers) throw ShapeError("mlp: parameter count mismatch");
    Var h = input;
    for (std::size_t l = 0; l + 1 < layers; ++l) h = ops::relu(ops::linear(h, params[2 * l], params[2 * l + 1]));
    Var out = ops::linear(h, params[2 * layers - 2], params[2 * layers - 1]);
    return {h, out};
  }

  if (params.size() != 12) throw ShapeError("convnet: parameter count mismatch");
  const std::size_t pad = spec.kernel / 2;
  Var h = input;
  if (!spec.input_mean.empty()) {
    Tensor gain(xs), shift(xs);
    const std::size_t plane = xs[2] * xs[3];
    for (std::size_t i = 0; i < gain.numel(); ++i) {
      const std::size_t c = (i / plane) % xs[1];
      gain[i] = 1.0 / spec.input_std[c];
      shift[i] = -spec.input_mean[c] / spec.input_std[c];
    }
    Graph& g = input.graph();
    h = ops::add(ops::mul(h, g.constant(std::move(gain))), g.constant(std::move(shift)));
  }
  for (std::size_t l = 0; l < 5; ++l) {
    h = ops::relu(ops::add_channel_bias(ops::conv2d(h, params[2 * l], pad), params[2 * l + 1]));
    if (l >= 3) h = ops::max_pool2d(h, spec.pool);
  }
  Var features = ops::reshape(h, {batch, numel(h.shape()) / batch});
  return {features, ops::linear(features, params[10], params[11])};
}

namespace {
ForwardResult eval_forward(Graph& g, const ModelParams& params, const Tensor& batch) {
  Graph::NoRecord guard(g);
  auto vars = bind_params(g, params, false);
  return forward(params.spec, vars, g.constant(batch));
}
}  // namespace

Tensor logits(const ModelParams& params, const Tensor& batch) {
  Graph g;
  return eval_forward(g, params, batch).logits.value();
}

Tensor penultimate_features(const ModelParams& params, const Tensor& batch) {
  Graph g;
  return eval_forward(g, params, batch).features.value();
}

std::vector<int> predict(const ModelParams& params, const Tensor& batch) {
  const Tensor z = logits(params, batch);
  const std::size_t n = z.dim(1);
  std::vector<int> out(z.dim(0));
  for (std::size_t b = 0; b < z.dim(0); ++b) {
    const double* row = z.data().data() + b * n;
    out[b] = static_cast<int>(std::max_element(row, row + n) - row);
  }
  return out;
}

GradientVector loss_gradient(const ModelParams& params, const Tensor& batch,
                             const std::vector<int>& labels, bool sum_reduction, double* loss) {
  Graph g;
  auto vars = bind_params(g, params, true);
  auto fwd = forward(params.spec, vars, g.constant(batch));
  Var l = ops::cross_entropy(fwd.logits, labels, sum_reduction ? ops::Reduction::kSum : ops::Reduction::kMean);
  if (loss) *loss = l.value().item();
  auto grads = g.grad(l, vars);
  return flatten(grads, params.layout);
}

}  // namespace brewlab
