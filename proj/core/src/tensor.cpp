#include "brewlab/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "brewlab/errors.hpp"

namespace brewlab {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape_));
  }
  data_.assign(brewlab::numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape_));
  }
  if (data_.size() != brewlab::numel(shape_)) {
    throw ShapeError("element count " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape_));
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (brewlab::numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void require_finite(const Tensor& t, std::string_view where) {
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw NonFiniteError("non-finite value " + std::to_string(d[i]) + " at element " +
                           std::to_string(i) + " of " + std::string(where));
    }
  }
}

void require_same_shape(const Shape& a, const Shape& b, std::string_view where) {
  if (a != b) {
    throw ShapeError(std::string(where) + ": shape mismatch " + to_string(a) + " vs " +
                     to_string(b));
  }
}

}  // namespace brewlab
