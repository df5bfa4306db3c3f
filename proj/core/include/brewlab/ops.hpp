#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "brewlab/autograd.hpp"

/// Differentiable primitives. All binary elementwise ops require identical
/// shapes; broadcasting is always explicit.
namespace brewlab::ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var sqrt(const Var& a);
Var scale(const Var& a, double factor);
/// x * s for a scalar (rank-0) variable s.
Var mul_scalar(const Var& x, const Var& s);

/// Sum of all elements, as a scalar.
Var sum(const Var& x);
Var broadcast_scalar(const Var& s, const Shape& shape);
Var dot(const Var& a, const Var& b);
Var reshape(const Var& x, const Shape& shape);

/// Rank-2 product op(a) * op(b) where op transposes when requested.
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
/// x[B,in] * w[out,in]^T + bias[out].
Var linear(const Var& x, const Var& w, const Var& bias);
Var add_row_bias(const Var& x, const Var& bias);
/// Column sums of a rank-2 tensor.
Var sum_rows(const Var& x);
Var broadcast_rows(const Var& v, std::size_t rows);

/// Adds bias[C] to every [b, C, :, :] plane.
Var add_channel_bias(const Var& x, const Var& bias);
Var sum_channels(const Var& x);
Var broadcast_channels(const Var& bias, const Shape& shape);

/// Stride-1 convolution with zero padding `pad`; x: [B,Ci,H,W], w: [Co,Ci,K,K].
Var conv2d(const Var& x, const Var& w, std::size_t pad);
Var conv2d_input_grad(const Var& grad, const Var& w, std::size_t pad, std::size_t height,
                      std::size_t width);
Var conv2d_weight_grad(const Var& x, const Var& grad, std::size_t pad, std::size_t kernel);

/// max(x, 0); the derivative at exactly 0 is 0.
Var relu(const Var& x);
/// Max pooling with window `size` and equal stride over [B,C,H,W]; output
/// size is floor(H / size). Ties resolve to the lowest flat index.
Var max_pool2d(const Var& x, std::size_t size);

using IndexMap = std::vector<std::uint32_t>;
/// y[i] = x[index[i]].
Var index_gather(const Var& x, std::shared_ptr<const IndexMap> index, const Shape& out_shape);
/// Adjoint of index_gather: y[index[i]] += g[i].
Var index_scatter(const Var& g, std::shared_ptr<const IndexMap> index, const Shape& out_shape);

/// Row-wise softmax of a rank-2 tensor.
Var softmax(const Var& logits);
/// y[b, j] = sum_k x[b, k].
Var row_sum_broadcast(const Var& x);

enum class Reduction { kMean, kSum };
/// Fused log-softmax + negative log-likelihood over rows of logits[B, classes].
Var cross_entropy(const Var& logits, std::vector<int> labels, Reduction reduction = Reduction::kMean);

/// Fixed sparse linear map y = A x, e.g. a bilinear resampling grid.
struct SparseMap {
  Shape in_shape;
  Shape out_shape;
  std::vector<std::uint32_t> row_start;  // out_numel + 1 offsets
  std::vector<std::uint32_t> cols;
  std::vector<double> weights;
};
Var sparse_linear(const Var& x, std::shared_ptr<const SparseMap> map);
Var sparse_linear_adjoint(const Var& g, std::shared_ptr<const SparseMap> map);

/// Euclidean norm; throws DegenerateGradientError for a zero vector since the
/// derivative is undefined there.
Var l2_norm(const Var& x);
Var cosine_similarity(const Var& a, const Var& b);

/// Inner product / cosine of two vectors stored as matching lists of tensors
/// (for example per-layer parameter gradients).
Var dot(std::span<const Var> a, std::span<const Var> b);
Var squared_norm(std::span<const Var> a);
Var cosine_similarity(std::span<const Var> a, std::span<const Var> b);

}  // namespace brewlab::ops
