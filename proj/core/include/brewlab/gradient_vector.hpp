#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "brewlab/autograd.hpp"
#include "brewlab/tensor.hpp"

namespace brewlab {

struct ParamSlot {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size() const { return numel(shape); }
};

/// Maps each parameter tensor onto a contiguous slice of a flat vector.
class ParamLayout {
 public:
  ParamLayout() = default;
  void add(std::string name, Shape shape);

  std::span<const ParamSlot> slots() const { return slots_; }
  std::size_t total() const { return total_; }
  /// Slots tile [0, total) in order without gaps or overlap.
  bool is_bijective() const;

 private:
  std::vector<ParamSlot> slots_;
  std::size_t total_ = 0;
};

/// Flat parameter-space vector (a gradient or a parameter snapshot).
struct GradientVector {
  std::vector<double> values;
  std::shared_ptr<const ParamLayout> layout;

  std::size_t size() const { return values.size(); }
  std::span<const double> slice(std::size_t slot) const;
  Tensor tensor(std::size_t slot) const;
};

/// Concatenates per-parameter gradient tensors in layout order.
GradientVector flatten(std::span<const Var> grads, std::shared_ptr<const ParamLayout> layout);
GradientVector flatten(std::span<const Tensor> grads, std::shared_ptr<const ParamLayout> layout);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);
/// Cosine similarity, or nullopt when either side has zero norm.
std::optional<double> cosine(std::span<const double> a, std::span<const double> b);

}  // namespace brewlab
