#include "brewlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "brewlab/errors.hpp"
#include "conv_kernels.hpp"

namespace brewlab::ops {
namespace {

template <typename OpT, typename... Args>
Var record(std::vector<Var> inputs, Args&&... args) {
  Graph& g = inputs.front().graph();
  return g.apply(std::make_shared<const OpT>(std::forward<Args>(args)...), std::move(inputs));
}

const Tensor& in(std::span<const Tensor* const> v, std::size_t i) { return *v[i]; }

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* name, F f) {
  require_same_shape(a.shape(), b.shape(), name);
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i], y[i]);
  return out;
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i]);
  return out;
}

void require_rank(const Tensor& t, std::size_t rank, const char* name) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(name) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(t.shape()));
  }
}

// ---- elementwise ---------------------------------------------------------

class AddOp final : public Op {
 public:
  const char* name() const override { return "add"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    return zip(in(v, 0), in(v, 1), "add", [](double a, double b) { return a + b; });
  }
  std::vector<Var> backward(std::span<const Var>, const Var&, const Var& g,
                            std::span<const bool>) const override {
    return {g, g};
  }
};

class SubOp final : public Op {
 public:
  const char* name() const override { return "sub"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    return zip(in(v, 0), in(v, 1), "sub", [](double a, double b) { return a - b; });
  }
  std::vector<Var> backward(std::span<const Var>, const Var&, const Var& g,
                            std::span<const bool> need) const override {
    return {g, need[1] ? neg(g) : Var{}};
  }
};

class MulOp final : public Op {
 public:
  const char* name() const override { return "mul"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    return zip(in(v, 0), in(v, 1), "mul", [](double a, double b) { return a * b; });
  }
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& g,
                            std::span<const bool> need) const override {
    return {need[0] ? mul(g, x[1]) : Var{}, need[1] ? mul(g, x[0]) : Var{}};
  }
};

class DivOp final : public Op {
 public:
  const char* name() const override { return "div"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    return zip(in(v, 0), in(v, 1), "div", [](double a, double b) { return a / b; });
  }
  std::vector<Var> backward(std::span<const Var> x, const Var& out, const Var& g,
                            std::span<const bool> need) const override {
    return {need[0] ? div(g, x[1]) : Var{},
            need[1] ? neg(div(mul(g, out), x[1])) : Var{}};
  }
};

class NegOp final : public Op {
 public:
  const char* name() const override { return "neg"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    return map(in(v, 0), [](double a) { return -a; });
  }
  std::vector<Var> backward(std::span<const Var>, const Var&, const Var& g,
                            std::span<const bool>) const override {
    return {neg(g)};
  }
};

class SqrtOp final : public Op {
 public:
  const char* name() const override { return "sqrt"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    return map(in(v, 0), [](double a) { return std::sqrt(a); });
  }
  std::vector<Var> backward(std::span<const Var>, const Var& out, const Var& g,
                            std::span<const bool>) const override {
    return {div(g, scale(out, 2.0))};
  }
};

class ScaleOp final : public Op {
 public:
  explicit ScaleOp(double f) : factor_(f) {}
  const char* name() const override { return "scale"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const double f = factor_;
    return map(in(v, 0), [f](double a) { return a * f; });
  }
  std::vector<Var> backward(std::span<const Var>, const Var&, const Var& g,
                            std::span<const bool>) const override {
    return {scale(g, factor_)};
  }

 private:
  double factor_;
};

class MulScalarOp final : public Op {
 public:
  const char* name() const override { return "mul_scalar"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    if (in(v, 1).numel() != 1) throw ShapeError("mul_scalar: second operand must be a scalar");
    const double s = in(v, 1)[0];
    return map(in(v, 0), [s](double a) { return a * s; });
  }
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& g,
                            std::span<const bool> need) const override {
    Var gs;
    if (need[1]) {
      gs = sum(mul(g, x[0]));
      if (x[1].shape() != gs.shape()) gs = reshape(gs, x[1].shape());
    }
    return {need[0] ? mul_scalar(g, x[1]) : Var{}, gs};
  }
};

// ---- reductions & shape ----------------------------------------------------

class SumOp final : public Op {
 public:
  const char* name() const override { return "sum"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    double s = 0.0;
    for (double a : in(v, 0).data()) s += a;
    return Tensor::scalar(s);
  }
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& g,
                            std::span<const bool>) const override {
    return {broadcast_scalar(g, x[0].shape())};
  }
};

class BroadcastScalarOp final : public Op {
 public:
  explicit BroadcastScalarOp(Shape s) : shape_(std::move(s)) {}
  const char* name() const override { return "broadcast_scalar"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    if (in(v, 0).numel() != 1) throw ShapeError("broadcast_scalar: operand must be a scalar");
    return Tensor(shape_, in(v, 0)[0]);
  }
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& g,
                            std::span<const bool>) const override {
    Var s = sum(g);
    return {x[0].shape() == s.shape() ? s : reshape(s, x[0].shape())};
  }

 private:
  Shape shape_;
};

class DotOp final : public Op {
 public:
  const char* name() const override { return "dot"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    require_same_shape(in(v, 0).shape(), in(v, 1).shape(), "dot");
    auto a = in(v, 0).data();
    auto b = in(v, 1).data();
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return Tensor::scalar(s);
  }
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& g,
                            std::span<const bool> need) const override {
    return {need[0] ? mul_scalar(x[1], g) : Var{}, need[1] ? mul_scalar(x[0], g) : Var{}};
  }
};

class ReshapeOp final : public Op {
 public:
  explicit ReshapeOp(Shape s) : shape_(std::move(s)) {}
  const char* name() const override { return "reshape"; }
  Tensor forward(std::span<const Tensor* const> v) const override { return in(v, 0).reshaped(shape_); }
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& g,
                            std::span<const bool>) const override {
    return {reshape(g, x[0].shape())};
  }

 private:
  Shape shape_;
};

// ---- dense linear algebra ---------------------------------------------------

class MatMulOp final : public Op {
 public:
  MatMulOp(bool ta, bool tb) : ta_(ta), tb_(tb) {}
  const char* name() const override { return "matmul"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const Tensor& a = in(v, 0);
    const Tensor& b = in(v, 1);
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = ta_ ? a.dim(1) : a.dim(0);
    const std::size_t k = ta_ ? a.dim(0) : a.dim(1);
    const std::size_t kb = tb_ ? b.dim(1) : b.dim(0);
    const std::size_t n = tb_ ? b.dim(0) : b.dim(1);
    if (k != kb) {
      throw ShapeError("matmul: inner dimensions differ for " + to_string(a.shape()) + " and " +
                       to_string(b.shape()));
    }
    const std::size_t lda = a.dim(1), ldb = b.dim(1);
    const double* A = a.data().data();
    const double* B = b.data().data();
    Tensor c({m, n});
    double* C = c.data().data();
    // Each output row is accumulated independently in a fixed order, so a row
    // never depends on how many other rows are computed alongside it.
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = ta_ ? A[p * lda + i] : A[i * lda + p];
        if (tb_) {
          for (std::size_t j = 0; j < n; ++j) crow[j] += aip * B[j * ldb + p];
        } else {
          const double* brow = B + p * ldb;
          for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
      }
    }
    return c;
  }
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& g,
                            std::span<const bool> need) const override {
    const Var& a = x[0];
    const Var& b = x[1];
    Var ga, gb;
    if (!ta_ && !tb_) {
      if (need[0]) ga = matmul(g, b, false, true);
      if (need[1]) gb = matmul(a, g, true, false);
    } else if (!ta_ && tb_) {
      if (need[0]) ga = matmul(g, b, false, false);
      if (need[1]) gb = matmul(g, a, true, false);
    } else if (ta_ && !tb_) {
      if (need[0]) ga = matmul(b, g, false, true);
      if (need[1]) gb = matmul(a, g, false, false);
    } else {
      if (need[0]) ga = matmul(b, g, true, true);
      if (need[1]) gb = matmul(g, a, true, true);
    }
    return {ga, gb};
  }

 private:
  bool ta_, tb_;
};

class AddRowBiasOp final : public Op {
 public:
  const char* name() const override { return "add_row_bias"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const Tensor& x = in(v, 0);
    const Tensor& b = in(v, 1);
    require_rank(x, 2, "add_row_bias");
    if (b.rank() != 1 || b.dim(0) != x.dim(1)) {
      throw ShapeError("add_row_bias: bias " + to_string(b.shape()) + " vs input " + to_string(x.shape()));
    }
    Tensor y = x;
    const std::size_t n = x.dim(1);
    for (std::size_t i = 0; i < x.dim(0); ++i)
      for (std::size_t j = 0; j < n; ++j) y[i * n + j] += b[j];
    return y;
  }
  std::vector<Var> backward(std::span<const Var>, const Var&, const Var& g,
                            std::span<const bool> need) const override {
    return {g, need[1] ? sum_rows(g) : Var{}};
  }
};

class SumRowsOp final : public Op {
 public:
  const char* name() const override { return "sum_rows"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const Tensor& x = in(v, 0);
    require_rank(x, 2, "sum_rows");
    const std::size_t n = x.dim(1);
    Tensor y({n});
    for (std::size_t i = 0; i < x.dim(0); ++i)
      for (std::size_t j = 0; j < n; ++j) y[j] += x[i * n + j];
    return y;
  }
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& g,
                            std::span<const bool>) const override {
    return {broadcast_rows(g, x[0].shape()[0])};
  }
};

class BroadcastRowsOp final : public Op {
 public:
  explicit BroadcastRowsOp(std::size_t rows) : rows_(rows) {}
  const char* name() const override { return "broadcast_rows"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const Tensor& x = in(v, 0);
    require_rank(x, 1, "broadcast_rows");
    const std::size_t n = x.dim(0);
    Tensor y({rows_, n});
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < n; ++j) y[i * n + j] = x[j];
    return y;
  }
  std::vector<Var> backward(std::span<const Var>, const Var&, const Var& g,
                            std::span<const bool>) const override {
    return {sum_rows(g)};
  }

 private:
  std::size_t rows_;
};

class AddChannelBiasOp final : public Op {
 public:
  const char* name() const override { return "add_channel_bias"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const Tensor& x = in(v, 0);
    const Tensor& b = in(v, 1);
    require_rank(x, 4, "add_channel_bias");
    if (b.rank() != 1 || b.dim(0) != x.dim(1)) {
      throw ShapeError("add_channel_bias: bias " + to_string(b.shape()) + " vs input " +
                       to_string(x.shape()));
    }
    Tensor y = x;
    const std::size_t plane = x.dim(2) * x.dim(3), channels = x.dim(1);
    for (std::size_t n = 0; n < x.dim(0); ++n)
      for (std::size_t c = 0; c < channels; ++c) {
        double* p = y.data().data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += b[c];
      }
    return y;
  }
  std::vector<Var> backward(std::span<const Var>, const Var&, const Var& g,
                            std::span<const bool> need) const override {
    return {g, need[1] ? sum_channels(g) : Var{}};
  }
};

class SumChannelsOp final : public Op {
 public:
  const char* name() const override { return "sum_channels"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const Tensor& x = in(v, 0);
    require_rank(x, 4, "sum_channels");
    const std::size_t plane = x.dim(2) * x.dim(3), channels = x.dim(1);
    Tensor y({channels});
    for (std::size_t n = 0; n < x.dim(0); ++n)
      for (std::size_t c = 0; c < channels; ++c) {
        const double* p = x.data().data() + (n * channels + c) * plane;
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
        y[c] += s;
      }
    return y;
  }
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& g,
                            std::span<const bool>) const override {
    return {broadcast_channels(g, x[0].shape())};
  }
};

class BroadcastChannelsOp final : public Op {
 public:
  explicit BroadcastChannelsOp(Shape s) : shape_(std::move(s)) {}
  const char* name() const override { return "broadcast_channels"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const Tensor& b = in(v, 0);
    if (shape_.size() != 4 || b.rank() != 1 || b.dim(0) != shape_[1]) {
      throw ShapeError("broadcast_channels: bias " + to_string(b.shape()) + " vs " + to_string(shape_));
    }
    Tensor y(shape_);
    const std::size_t plane = shape_[2] * shape_[3], channels = shape_[1];
    for (std::size_t n = 0; n < shape_[0]; ++n)
      for (std::size_t c = 0; c < channels; ++c) {
        double* p = y.data().data() + (n * channels + c) * plane;
        std::fill(p, p + plane, b[c]);
      }
    return y;
  }
  std::vector<Var> backward(std::span<const Var>, const Var&, const Var& g,
                            std::span<const bool>) const override {
    return {sum_channels(g)};
  }

 private:
  Shape shape_;
};

// ---- convolution ------------------------------------------------------------
//
// conv2d, its input adjoint and its weight adjoint are the three faces of one
// bilinear form <conv(x, w), g>; each one's derivative is expressed through the
// other two, which closes the set under repeated differentiation.

class Conv2dOp final : public Op {
 public:
  explicit Conv2dOp(std::size_t pad) : pad_(pad) {}
  const char* name() const override { return "conv2d"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    return kernels::conv2d(in(v, 0), in(v, 1), pad_);
  }
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& g,
                            std::span<const bool> need) const override {
    const Shape& xs = x[0].shape();
    return {need[0] ? conv2d_input_grad(g, x[1], pad_, xs[2], xs[3]) : Var{},
            need[1] ? conv2d_weight_grad(x[0], g, pad_, x[1].shape()[2]) : Var{}};
  }

 private:
  std::size_t pad_;
};

class Conv2dInputGradOp final : public Op {
 public:
  Conv2dInputGradOp(std::size_t pad, std::size_t h, std::size_t w) : pad_(pad), h_(h), w_(w) {}
  const char* name() const override { return "conv2d_input_grad"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    return kernels::conv2d_input_grad(in(v, 0), in(v, 1), pad_, h_, w_);
  }
  // inputs: (g, w); output z has the shape of the convolution input.
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& gz,
                            std::span<const bool> need) const override {
    return {need[0] ? conv2d(gz, x[1], pad_) : Var{},
            need[1] ? conv2d_weight_grad(gz, x[0], pad_, x[1].shape()[2]) : Var{}};
  }

 private:
  std::size_t pad_, h_, w_;
};

class Conv2dWeightGradOp final : public Op {
 public:
  Conv2dWeightGradOp(std::size_t pad, std::size_t k) : pad_(pad), k_(k) {}
  const char* name() const override { return "conv2d_weight_grad"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    return kernels::conv2d_weight_grad(in(v, 0), in(v, 1), pad_, k_);
  }
  // inputs: (x, g); output has the shape of the weight.
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& gw,
                            std::span<const bool> need) const override {
    const Shape& xs = x[0].shape();
    return {need[0] ? conv2d_input_grad(x[1], gw, pad_, xs[2], xs[3]) : Var{},
            need[1] ? conv2d(x[0], gw, pad_) : Var{}};
  }

 private:
  std::size_t pad_, k_;
};

// ---- nonlinearities ---------------------------------------------------------

class ReluOp final : public Op {
 public:
  const char* name() const override { return "relu"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    return map(in(v, 0), [](double a) { return a > 0.0 ? a : 0.0; });
  }
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& g,
                            std::span<const bool>) const override {
    Tensor mask = map(x[0].value(), [](double a) { return a > 0.0 ? 1.0 : 0.0; });
    return {mul(g, g.graph().constant(std::move(mask)))};
  }
};

class IndexGatherOp final : public Op {
 public:
  IndexGatherOp(std::shared_ptr<const IndexMap> idx, Shape out) : idx_(std::move(idx)), out_(std::move(out)) {}
  const char* name() const override { return "index_gather"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const Tensor& x = in(v, 0);
    if (idx_->size() != brewlab::numel(out_)) throw ShapeError("index_gather: index size mismatch");
    Tensor y(out_);
    for (std::size_t i = 0; i < idx_->size(); ++i) y[i] = x.data()[(*idx_)[i]];
    return y;
  }
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& g,
                            std::span<const bool>) const override {
    return {index_scatter(g, idx_, x[0].shape())};
  }

 private:
  std::shared_ptr<const IndexMap> idx_;
  Shape out_;
};

class IndexScatterOp final : public Op {
 public:
  IndexScatterOp(std::shared_ptr<const IndexMap> idx, Shape out) : idx_(std::move(idx)), out_(std::move(out)) {}
  const char* name() const override { return "index_scatter"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const Tensor& g = in(v, 0);
    if (idx_->size() != g.numel()) throw ShapeError("index_scatter: index size mismatch");
    Tensor y(out_);
    for (std::size_t i = 0; i < idx_->size(); ++i) y[(*idx_)[i]] += g[i];
    return y;
  }
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& g,
                            std::span<const bool>) const override {
    return {index_gather(g, idx_, x[0].shape())};
  }

 private:
  std::shared_ptr<const IndexMap> idx_;
  Shape out_;
};

class SoftmaxOp final : public Op {
 public:
  const char* name() const override { return "softmax"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const Tensor& z = in(v, 0);
    require_rank(z, 2, "softmax");
    Tensor s(z.shape());
    const std::size_t n = z.dim(1);
    for (std::size_t b = 0; b < z.dim(0); ++b) {
      const double* zr = z.data().data() + b * n;
      double* sr = s.data().data() + b * n;
      const double mx = *std::max_element(zr, zr + n);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += (sr[j] = std::exp(zr[j] - mx));
      for (std::size_t j = 0; j < n; ++j) sr[j] /= total;
    }
    return s;
  }
  std::vector<Var> backward(std::span<const Var>, const Var& s, const Var& g,
                            std::span<const bool>) const override {
    // ds = s * (g - sum_k g_k s_k)
    return {mul(s, sub(g, row_sum_broadcast(mul(g, s))))};
  }
};

class RowSumBroadcastOp final : public Op {
 public:
  const char* name() const override { return "row_sum_broadcast"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const Tensor& x = in(v, 0);
    require_rank(x, 2, "row_sum_broadcast");
    Tensor y(x.shape());
    const std::size_t n = x.dim(1);
    for (std::size_t b = 0; b < x.dim(0); ++b) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += x[b * n + j];
      for (std::size_t j = 0; j < n; ++j) y[b * n + j] = s;
    }
    return y;
  }
  std::vector<Var> backward(std::span<const Var>, const Var&, const Var& g,
                            std::span<const bool>) const override {
    return {row_sum_broadcast(g)};
  }
};

class CrossEntropyOp final : public Op {
 public:
  CrossEntropyOp(std::vector<int> labels, Reduction r) : labels_(std::move(labels)), reduction_(r) {}
  const char* name() const override { return "cross_entropy"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const Tensor& z = in(v, 0);
    require_rank(z, 2, "cross_entropy");
    if (labels_.size() != z.dim(0)) throw ShapeError("cross_entropy: label count does not match batch");
    const std::size_t n = z.dim(1);
    double total = 0.0;
    for (std::size_t b = 0; b < z.dim(0); ++b) {
      const int y = labels_[b];
      if (y < 0 || static_cast<std::size_t>(y) >= n) throw ShapeError("cross_entropy: label out of range");
      const double* zr = z.data().data() + b * n;
      const double mx = *std::max_element(zr, zr + n);
      double se = 0.0;
      for (std::size_t j = 0; j < n; ++j) se += std::exp(zr[j] - mx);
      total += mx + std::log(se) - zr[y];
    }
    if (reduction_ == Reduction::kMean) total /= static_cast<double>(z.dim(0));
    return Tensor::scalar(total);
  }
  std::vector<Var> backward(std::span<const Var> x, const Var&, const Var& g,
                            std::span<const bool>) const override {
    const Var& z = x[0];
    const std::size_t n = z.shape()[1];
    Tensor onehot(z.shape());
    for (std::size_t b = 0; b < labels_.size(); ++b) onehot[b * n + static_cast<std::size_t>(labels_[b])] = 1.0;
    Var diff = sub(softmax(z), z.graph().constant(std::move(onehot)));
    if (reduction_ == Reduction::kMean) diff = scale(diff, 1.0 / static_cast<double>(labels_.size()));
    return {mul_scalar(diff, g)};
  }

 private:
  std::vector<int> labels_;
  Reduction reduction_;
};

// ---- sparse resampling -------------------------------------------------------

void check_map(const SparseMap& m) {
  if (m.row_start.size() != brewlab::numel(m.out_shape) + 1 || m.cols.size() != m.weights.size() ||
      m.row_start.back() != m.cols.size()) {
    throw ShapeError("sparse map is malformed");
  }
}

class SparseLinearOp final : public Op {
 public:
  explicit SparseLinearOp(std::shared_ptr<const SparseMap> m) : map_(std::move(m)) {}
  const char* name() const override { return "sparse_linear"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const Tensor& x = in(v, 0);
    require_same_shape(x.shape(), map_->in_shape, "sparse_linear");
    check_map(*map_);
    Tensor y(map_->out_shape);
    for (std::size_t o = 0; o + 1 < map_->row_start.size(); ++o) {
      double s = 0.0;
      for (auto e = map_->row_start[o]; e < map_->row_start[o + 1]; ++e) s += map_->weights[e] * x[map_->cols[e]];
      y[o] = s;
    }
    return y;
  }
  std::vector<Var> backward(std::span<const Var>, const Var&, const Var& g,
                            std::span<const bool>) const override {
    return {sparse_linear_adjoint(g, map_)};
  }

 private:
  std::shared_ptr<const SparseMap> map_;
};

class SparseLinearAdjointOp final : public Op {
 public:
  explicit SparseLinearAdjointOp(std::shared_ptr<const SparseMap> m) : map_(std::move(m)) {}
  const char* name() const override { return "sparse_linear_adjoint"; }
  Tensor forward(std::span<const Tensor* const> v) const override {
    const Tensor& g = in(v, 0);
    require_same_shape(g.shape(), map_->out_shape, "sparse_linear_adjoint");
    check_map(*map_);
    Tensor y(map_->in_shape);
    for (std::size_t o = 0; o + 1 < map_->row_start.size(); ++o) {
      for (auto e = map_->row_start[o]; e < map_->row_start[o + 1]; ++e) y[map_->cols[e]] += map_->weights[e] * g[o];
    }
    return y;
  }
  std::vector<Var> backward(std::span<const Var>, const Var&, const Var& g,
                            std::span<const bool>) const override {
    return {sparse_linear(g, map_)};
  }

 private:
  std::shared_ptr<const SparseMap> map_;
};

}  // namespace

Var add(const Var& a, const Var& b) { return record<AddOp>({a, b}); }
Var sub(const Var& a, const Var& b) { return record<SubOp>({a, b}); }
Var mul(const Var& a, const Var& b) { return record<MulOp>({a, b}); }
Var div(const Var& a, const Var& b) { return record<DivOp>({a, b}); }
Var neg(const Var& a) { return record<NegOp>({a}); }
Var sqrt(const Var& a) { return record<SqrtOp>({a}); }
Var scale(const Var& a, double factor) { return record<ScaleOp>({a}, factor); }
Var mul_scalar(const Var& x, const Var& s) { return record<MulScalarOp>({x, s}); }
Var sum(const Var& x) { return record<SumOp>({x}); }
Var broadcast_scalar(const Var& s, const Shape& shape) { return record<BroadcastScalarOp>({s}, shape); }
Var dot(const Var& a, const Var& b) { return record<DotOp>({a, b}); }
Var reshape(const Var& x, const Shape& shape) { return record<ReshapeOp>({x}, shape); }

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  return record<MatMulOp>({a, b}, trans_a, trans_b);
}
Var linear(const Var& x, const Var& w, const Var& bias) {
  return add_row_bias(matmul(x, w, false, true), bias);
}
Var add_row_bias(const Var& x, const Var& bias) { return record<AddRowBiasOp>({x, bias}); }
Var sum_rows(const Var& x) { return record<SumRowsOp>({x}); }
Var broadcast_rows(const Var& v, std::size_t rows) { return record<BroadcastRowsOp>({v}, rows); }

Var add_channel_bias(const Var& x, const Var& bias) { return record<AddChannelBiasOp>({x, bias}); }
Var sum_channels(const Var& x) { return record<SumChannelsOp>({x}); }
Var broadcast_channels(const Var& bias, const Shape& shape) {
  return record<BroadcastChannelsOp>({bias}, shape);
}

Var conv2d(const Var& x, const Var& w, std::size_t pad) { return record<Conv2dOp>({x, w}, pad); }
Var conv2d_input_grad(const Var& grad, const Var& w, std::size_t pad, std::size_t height,
                      std::size_t width) {
  return record<Conv2dInputGradOp>({grad, w}, pad, height, width);
}
Var conv2d_weight_grad(const Var& x, const Var& grad, std::size_t pad, std::size_t kernel) {
  return record<Conv2dWeightGradOp>({x, grad}, pad, kernel);
}

Var relu(const Var& x) { return record<ReluOp>({x}); }

Var max_pool2d(const Var& x, std::size_t size) {
  const Tensor& t = x.value();
  if (t.rank() != 4) throw ShapeError("max_pool2d: expected rank 4, got " + to_string(t.shape()));
  if (size == 0) throw ShapeError("max_pool2d: window must be positive");
  const std::size_t B = t.dim(0), C = t.dim(1), H = t.dim(2), W = t.dim(3);
  const std::size_t Ho = H / size, Wo = W / size;
  if (Ho == 0 || Wo == 0) {
    throw ShapeError("max_pool2d: window " + std::to_string(size) + " exceeds spatial size " +
                     to_string(t.shape()));
  }
  auto idx = std::make_shared<IndexMap>(B * C * Ho * Wo);
  std::size_t o = 0;
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * H * W;
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          std::size_t best = base + oy * size * W + ox * size;
          for (std::size_t ky = 0; ky < size; ++ky)
            for (std::size_t kx = 0; kx < size; ++kx) {
              const std::size_t i = base + (oy * size + ky) * W + ox * size + kx;
              // Strict comparison keeps the lowest index on ties.
              if (t[i] > t[best]) best = i;
            }
          (*idx)[o++] = static_cast<std::uint32_t>(best);
        }
    }
  return index_gather(x, std::move(idx), Shape{B, C, Ho, Wo});
}

Var index_gather(const Var& x, std::shared_ptr<const IndexMap> index, const Shape& out_shape) {
  return record<IndexGatherOp>({x}, std::move(index), out_shape);
}
Var index_scatter(const Var& g, std::shared_ptr<const IndexMap> index, const Shape& out_shape) {
  return record<IndexScatterOp>({g}, std::move(index), out_shape);
}

Var softmax(const Var& logits) { return record<SoftmaxOp>({logits}); }
Var row_sum_broadcast(const Var& x) { return record<RowSumBroadcastOp>({x}); }

Var cross_entropy(const Var& logits, std::vector<int> labels, Reduction reduction) {
  return record<CrossEntropyOp>({logits}, std::move(labels), reduction);
}

Var sparse_linear(const Var& x, std::shared_ptr<const SparseMap> map) {
  return record<SparseLinearOp>({x}, std::move(map));
}
Var sparse_linear_adjoint(const Var& g, std::shared_ptr<const SparseMap> map) {
  return record<SparseLinearAdjointOp>({g}, std::move(map));
}

Var l2_norm(const Var& x) {
  Var sq = dot(x, x);
  if (sq.value().item() <= 0.0) throw DegenerateGradientError("l2_norm of a zero vector");
  return sqrt(sq);
}

Var cosine_similarity(const Var& a, const Var& b) {
  const Var list_a[] = {a};
  const Var list_b[] = {b};
  return cosine_similarity(std::span<const Var>(list_a), std::span<const Var>(list_b));
}

Var dot(std::span<const Var> a, std::span<const Var> b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("dot: tensor lists differ in length");
  Var total = dot(a[0], b[0]);
  for (std::size_t i = 1; i < a.size(); ++i) total = add(total, dot(a[i], b[i]));
  return total;
}

Var squared_norm(std::span<const Var> a) { return dot(a, a); }

Var cosine_similarity(std::span<const Var> a, std::span<const Var> b) {
  Var na = squared_norm(a);
  Var nb = squared_norm(b);
  if (na.value().item() <= 0.0) throw DegenerateGradientError("cosine similarity: first operand has zero norm");
  if (nb.value().item() <= 0.0) throw DegenerateGradientError("cosine similarity: second operand has zero norm");
  return div(dot(a, b), sqrt(mul(na, nb)));
}

}  // namespace brewlab::ops
