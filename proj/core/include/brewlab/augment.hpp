#pragma once

#include <memory>
#include <span>

#include "brewlab/autograd.hpp"
#include "brewlab/ops.hpp"
#include "brewlab/rng.hpp"
#include "brewlab/tensor.hpp"

namespace brewlab {

/// Translation-and-flip augmentation.
///
/// Output pixel (i, j) samples the zero-padded input at
/// (i + dy, j' + dx) with j' = W-1-j when `flip` is set and j otherwise,
/// i.e. a crop of the padded image followed by an optional mirror. Fractional
/// shifts resample bilinearly.
struct AugmentParams {
  bool flip = false;
  double dx = 0.0;
  double dy = 0.0;

  bool is_identity() const { return !flip && dx == 0.0 && dy == 0.0; }
  friend bool operator==(const AugmentParams&, const AugmentParams&) = default;
};

/// Throws ConfigError when a shift exceeds the padding radius.
void check_augment(const AugmentParams& params, std::size_t padding);

/// Brewer-side draw: continuous shifts in [-padding, padding], fair flip.
AugmentParams draw_continuous(Rng& rng, std::size_t padding);
/// Victim-side draw: integer shifts in [-padding, padding], fair flip.
AugmentParams draw_integer(Rng& rng, std::size_t padding);

/// Resampling matrix of one image of shape {C, H, W}.
std::shared_ptr<const ops::SparseMap> augment_map(const Shape& image_shape, const AugmentParams& params);
/// Block-diagonal resampling matrix for a batch [B, C, H, W], one parameter set per image.
std::shared_ptr<const ops::SparseMap> augment_map(const Shape& batch_shape,
                                                  std::span<const AugmentParams> params);

/// Differentiable augmentation of a batch [B, C, H, W].
Var augment_differentiable(const Var& batch, std::span<const AugmentParams> params, std::size_t padding);
/// Single image {C, H, W}, evaluated through the same resampling matrix.
Tensor augment_differentiable(const Tensor& image, const AugmentParams& params, std::size_t padding);

/// Victim-side augmentation with integer shifts by direct indexing.
Tensor augment_standard(const Tensor& image, const AugmentParams& params, std::size_t padding);
void augment_standard(std::span<const double> image, std::span<double> out, const Shape& image_shape,
                      const AugmentParams& params, std::size_t padding);

}  // namespace brewlab
