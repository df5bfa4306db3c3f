#pragma once

#include <cstddef>

#include "brewlab/tensor.hpp"

namespace brewlab::kernels {

// Stride-1 2-D convolution (cross-correlation) with symmetric zero padding.
// x: [B, Ci, H, W], w: [Co, Ci, K, K], y: [B, Co, H + 2p - K + 1, W + 2p - K + 1].
// Every example is processed independently so results never depend on batch size.

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t pad);

/// Adjoint of conv2d in its first argument: returns dL/dx given g = dL/dy.
Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, std::size_t pad, std::size_t height,
                         std::size_t width);

/// Adjoint of conv2d in its second argument: returns dL/dw given x and g = dL/dy.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, std::size_t pad, std::size_t kernel);

}  // namespace brewlab::kernels
