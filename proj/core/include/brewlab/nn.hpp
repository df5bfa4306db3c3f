#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "brewlab/autograd.hpp"
#include "brewlab/gradient_vector.hpp"
#include "brewlab/tensor.hpp"

namespace brewlab {

enum class Architecture { kMlp, kConvNet };

std::string to_string(Architecture a);
Architecture parse_architecture(const std::string& s);

struct WidthScale {
  std::int64_t num = 1;
  std::int64_t den = 1;
  /// ceil(width * num / den), at least 1.
  std::size_t apply(std::size_t width) const;
  std::string str() const;
  static WidthScale parse(const std::string& s);
  friend bool operator==(const WidthScale&, const WidthScale&) = default;
};

/// Architecture description.
///
/// For kConvNet, `widths` lists the five convolution widths before scaling;
/// every conv (kernel `kernel`, stride 1, zero padding kernel/2) is followed
/// by ReLU, the last two additionally by max pooling of size `pool`, then a
/// linear map to `classes`. `input_shape` is {channels, height, width}.
///
/// When `input_mean`/`input_std` are set (one entry per channel) the
/// network first standardizes its input, (x - mean) / std; the map is part
/// of the model, so gradients with respect to the input include it.
///
/// For kMlp, `widths` is the full list of layer widths including the input
/// and the class count; hidden layers use ReLU.
struct ModelSpec {
  Architecture arch = Architecture::kConvNet;
  std::vector<std::size_t> widths{64, 128, 128, 256, 256};
  std::size_t kernel = 3;
  std::size_t pool = 3;
  Shape input_shape{3, 32, 32};
  std::size_t classes = 10;
  WidthScale width_scale;
  std::vector<double> input_mean;
  std::vector<double> input_std;

  static ModelSpec convnet(Shape input_shape = {3, 32, 32}, std::size_t classes = 10,
                           WidthScale scale = {});
  static ModelSpec mlp(std::vector<std::size_t> widths);

  std::vector<std::size_t> effective_widths() const;
  /// Width of the penultimate (pre-classifier) representation.
  std::size_t feature_width() const;
  /// Throws ShapeError/ConfigError on inconsistent specs.
  void validate() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

std::shared_ptr<const ParamLayout> make_layout(const ModelSpec& spec);
/// Closed-form parameter count.
std::size_t parameter_count(const ModelSpec& spec);

struct ModelParams {
  ModelSpec spec;
  std::uint64_t seed = 0;
  std::vector<double> theta;
  std::shared_ptr<const ParamLayout> layout;

  std::size_t count() const { return theta.size(); }
  Tensor tensor(std::size_t slot) const;
};

/// Fan-in scaled uniform initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
ModelParams build(const ModelSpec& spec, std::uint64_t seed);

/// Parameter tensors as graph leaves.
std::vector<Var> bind_params(Graph& graph, const ModelParams& params, bool requires_grad);

struct ForwardResult {
  Var features;
  Var logits;
};

/// Records the model on `graph`. `input` is [B, input_shape...].
ForwardResult forward(const ModelSpec& spec, std::span<const Var> params, const Var& input);

/// One row of class scores per example; evaluated without recording gradients.
Tensor logits(const ModelParams& params, const Tensor& batch);
Tensor penultimate_features(const ModelParams& params, const Tensor& batch);
/// Index of the largest logit per row (lowest index on ties).
std::vector<int> predict(const ModelParams& params, const Tensor& batch);

/// Gradient of the cross-entropy of (batch, labels) w.r.t. all parameters.
GradientVector loss_gradient(const ModelParams& params, const Tensor& batch,
                             const std::vector<int>& labels, bool sum_reduction = false,
                             double* loss = nullptr);

}  // namespace brewlab
