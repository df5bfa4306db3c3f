#include "conv_kernels.hpp"

#include <Eigen/Core>
#include <vector>

#include "brewlab/errors.hpp"

namespace brewlab::kernels {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

struct Geometry {
  std::size_t channels, height, width, kernel, pad, out_h, out_w;
  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t out_pixels() const { return out_h * out_w; }
};

Geometry make_geometry(std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t pad) {
  if (h + 2 * pad < k || w + 2 * pad < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input");
  }
  return {c, h, w, k, pad, h + 2 * pad - k + 1, w + 2 * pad - k + 1};
}

// cols[(c*K + ky)*K + kx, oy*Wo + ox] = x[c, oy + ky - p, ox + kx - p]
void im2col(const double* x, const Geometry& g, double* cols) {
  const auto p = static_cast<long>(g.pad);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * g.out_pixels();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy + ky) - p;
          double* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox + kx) - p;
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const Geometry& g, double* x) {
  const auto p = static_cast<long>(g.pad);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * g.out_pixels();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy + ky) - p;
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          double* dst = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const double* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox + kx) - p;
            if (ix >= 0 && ix < static_cast<long>(g.width)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void require_rank4(const Tensor& t, const char* what) {
  if (t.rank() != 4) throw ShapeError(std::string("conv2d: ") + what + " must be rank 4, got " + to_string(t.shape()));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t pad) {
  require_rank4(x, "input");
  require_rank4(w, "weight");
  if (x.dim(1) != w.dim(1) || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(w.shape()));
  }
  const std::size_t batch = x.dim(0), out_c = w.dim(0);
  const auto g = make_geometry(x.dim(1), x.dim(2), x.dim(3), w.dim(2), pad);
  Tensor y({batch, out_c, g.out_h, g.out_w});
  std::vector<double> cols(g.patch() * g.out_pixels());
  ConstMapMat wm(w.data().data(), out_c, g.patch());
  ConstMapMat cm(cols.data(), g.patch(), g.out_pixels());
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = out_c * g.out_pixels();
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(x.data().data() + b * in_stride, g, cols.data());
    MapMat ym(y.data().data() + b * out_stride, out_c, g.out_pixels());
    ym.noalias() = wm * cm;
  }
  return y;
}

Tensor conv2d_input_grad(const Tensor& grad, const Tensor& w, std::size_t pad, std::size_t height,
                         std::size_t width) {
  require_rank4(grad, "gradient");
  require_rank4(w, "weight");
  const std::size_t batch = grad.dim(0), out_c = w.dim(0), in_c = w.dim(1);
  const auto g = make_geometry(in_c, height, width, w.dim(2), pad);
  if (grad.dim(1) != out_c || grad.dim(2) != g.out_h || grad.dim(3) != g.out_w) {
    throw ShapeError("conv2d_input_grad: gradient " + to_string(grad.shape()) +
                     " incompatible with weight " + to_string(w.shape()));
  }
  Tensor x({batch, in_c, height, width});
  std::vector<double> cols(g.patch() * g.out_pixels());
  ConstMapMat wm(w.data().data(), out_c, g.patch());
  MapMat cm(cols.data(), g.patch(), g.out_pixels());
  const std::size_t in_stride = in_c * height * width;
  const std::size_t out_stride = out_c * g.out_pixels();
  for (std::size_t b = 0; b < batch; ++b) {
    ConstMapMat gm(grad.data().data() + b * out_stride, out_c, g.out_pixels());
    cm.noalias() = wm.transpose() * gm;
    col2im(cols.data(), g, x.data().data() + b * in_stride);
  }
  return x;
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad, std::size_t pad, std::size_t kernel) {
  require_rank4(x, "input");
  require_rank4(grad, "gradient");
  const std::size_t batch = x.dim(0), out_c = grad.dim(1);
  const auto g = make_geometry(x.dim(1), x.dim(2), x.dim(3), kernel, pad);
  if (grad.dim(0) != batch || grad.dim(2) != g.out_h || grad.dim(3) != g.out_w) {
    throw ShapeError("conv2d_weight_grad: input " + to_string(x.shape()) +
                     " incompatible with gradient " + to_string(grad.shape()));
  }
  Tensor w({out_c, g.channels, kernel, kernel});
  MapMat wm(w.data().data(), out_c, g.patch());
  std::vector<double> cols(g.patch() * g.out_pixels());
  ConstMapMat cm(cols.data(), g.patch(), g.out_pixels());
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = out_c * g.out_pixels();
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(x.data().data() + b * in_stride, g, cols.data());
    ConstMapMat gm(grad.data().data() + b * out_stride, out_c, g.out_pixels());
    wm.noalias() += gm * cm.transpose();
  }
  return w;
}

}  // namespace brewlab::kernels
