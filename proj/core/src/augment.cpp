#include "brewlab/augment.hpp"

#include <cmath>

#include "brewlab/errors.hpp"

namespace brewlab {

void check_augment(const AugmentParams& params, std::size_t padding) {
  const double limit = static_cast<double>(padding);
  if (!(std::abs(params.dx) <= limit && std::abs(params.dy) <= limit)) {
    throw ConfigError("augment: shift (" + std::to_string(params.dx) + ", " + std::to_string(params.dy) +
                      ") exceeds padding " + std::to_string(padding));
  }
}

AugmentParams draw_continuous(Rng& rng, std::size_t padding) {
  const double p = static_cast<double>(padding);
  AugmentParams a;
  a.flip = rng.bernoulli(0.5);
  a.dx = rng.uniform(-p, p);
  a.dy = rng.uniform(-p, p);
  return a;
}

AugmentParams draw_integer(Rng& rng, std::size_t padding) {
  const auto span = 2 * padding + 1;
  AugmentParams a;
  a.flip = rng.bernoulli(0.5);
  a.dx = static_cast<double>(rng.below(span)) - static_cast<double>(padding);
  a.dy = static_cast<double>(rng.below(span)) - static_cast<double>(padding);
  return a;
}

namespace {

void append_rows(ops::SparseMap& m, std::size_t base, std::size_t channels, std::size_t h, std::size_t w,
                 const AugmentParams& a) {
  const double fy = std::floor(a.dy), fx = std::floor(a.dx);
  const double wy = a.dy - fy, wx = a.dx - fx;
  const auto oy = static_cast<long>(fy), ox = static_cast<long>(fx);
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    for (long i = 0; i < H; ++i) {
      for (long j = 0; j < W; ++j) {
        const long jj = a.flip ? W - 1 - j : j;
        const long y0 = i + oy, x0 = jj + ox;
        const double wts[4] = {(1.0 - wy) * (1.0 - wx), (1.0 - wy) * wx, wy * (1.0 - wx), wy * wx};
        const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
        const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
        for (int k = 0; k < 4; ++k) {
          if (wts[k] == 0.0 || ys[k] < 0 || ys[k] >= H || xs[k] < 0 || xs[k] >= W) continue;
          m.cols.push_back(static_cast<std::uint32_t>(base + (c * h + static_cast<std::size_t>(ys[k])) * w +
                                                      static_cast<std::size_t>(xs[k])));
          m.weights.push_back(wts[k]);
        }
        m.row_start.push_back(static_cast<std::uint32_t>(m.cols.size()));
      }
    }
  }
}

}  // namespace

std::shared_ptr<const ops::SparseMap> augment_map(const Shape& batch_shape, std::span<const AugmentParams> params) {
  if (batch_shape.size() != 4) throw ShapeError("augment: expected a [B, C, H, W] batch, got " + to_string(batch_shape));
  if (params.size() != batch_shape[0]) throw ShapeError("augment: one parameter set per image is required");
  auto m = std::make_shared<ops::SparseMap>();
  m->in_shape = batch_shape;
  m->out_shape = batch_shape;
  m->row_start.reserve(numel(batch_shape) + 1);
  m->row_start.push_back(0);
  const std::size_t per = batch_shape[1] * batch_shape[2] * batch_shape[3];
  for (std::size_t b = 0; b < batch_shape[0]; ++b) {
    append_rows(*m, b * per, batch_shape[1], batch_shape[2], batch_shape[3], params[b]);
  }
  return m;
}

std::shared_ptr<const ops::SparseMap> augment_map(const Shape& image_shape, const AugmentParams& params) {
  if (image_shape.size() != 3) throw ShapeError("augment: expected a {C, H, W} image, got " + to_string(image_shape));
  Shape batch{1};
  batch.insert(batch.end(), image_shape.begin(), image_shape.end());
  auto m = std::make_shared<ops::SparseMap>(*augment_map(batch, std::span<const AugmentParams>(&params, 1)));
  m->in_shape = image_shape;
  m->out_shape = image_shape;
  return m;
}

Var augment_differentiable(const Var& batch, std::span<const AugmentParams> params, std::size_t padding) {
  for (const auto& p : params) check_augment(p, padding);
  return ops::sparse_linear(batch, augment_map(batch.shape(), params));
}

Tensor augment_differentiable(const Tensor& image, const AugmentParams& params, std::size_t padding) {
  check_augment(params, padding);
  Graph g;
  Graph::NoRecord guard(g);
  return ops::sparse_linear(g.constant(image), augment_map(image.shape(), params)).value();
}

void augment_standard(std::span<const double> image, std::span<double> out, const Shape& shape,
                      const AugmentParams& a, std::size_t padding) {
  check_augment(a, padding);
  if (a.dx != std::floor(a.dx) || a.dy != std::floor(a.dy)) {
    throw ConfigError("augment: the standard path takes integer shifts only");
  }
  if (shape.size() != 3 || image.size() != numel(shape) || out.size() != image.size()) {
    throw ShapeError("augment: image buffer does not match shape " + to_string(shape));
  }
  const long H = static_cast<long>(shape[1]), W = static_cast<long>(shape[2]);
  const long oy = static_cast<long>(a.dy), ox = static_cast<long>(a.dx);
  for (std::size_t c = 0; c < shape[0]; ++c) {
    const double* src = image.data() + c * shape[1] * shape[2];
    double* dst = out.data() + c * shape[1] * shape[2];
    for (long i = 0; i < H; ++i) {
      for (long j = 0; j < W; ++j) {
        const long y = i + oy, x = (a.flip ? W - 1 - j : j) + ox;
        dst[i * W + j] = (y >= 0 && y < H && x >= 0 && x < W) ? src[y * W + x] : 0.0;
      }
    }
  }
}

Tensor augment_standard(const Tensor& image, const AugmentParams& params, std::size_t padding) {
  Tensor out(image.shape());
  augment_standard(image.data(), out.data(), image.shape(), params, padding);
  return out;
}

}  // namespace brewlab
