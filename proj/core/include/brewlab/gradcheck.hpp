#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "brewlab/tensor.hpp"

namespace brewlab {

/// Scalar function of a tensor. When `grad` is non-null it receives the
/// analytic gradient (same shape as the argument).
using ScalarFunction = std::function<double(const Tensor& x, Tensor* grad)>;

struct CoordinateCheck {
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  /// One-sided differences disagree by more than 0.1% (plus 1e-8) and the
  /// gap does not shrink with a quarter step: the function is not
  /// differentiable within a step of the point, so the coordinate is excluded.
  bool kink = false;
};

struct FiniteDiffReport {
  std::vector<CoordinateCheck> coordinates;
  double max_rel_error = 0.0;
  std::size_t kinks = 0;
  bool passed(double tolerance) const { return max_rel_error < tolerance && kinks * 10 <= coordinates.size(); }
};

/// |a - n| / max(|a|, |n|, 1e-6).
double relative_error(double analytic, double numeric);

/// Central differences f(x +- h e_i) against the analytic gradient at the
/// given coordinates (all coordinates when `coords` is empty). Where the
/// one-sided differences disagree because of curvature, the central
/// difference is retaken with step h / 4.
FiniteDiffReport finite_diff_check(const ScalarFunction& f, const Tensor& point, double step = 1e-5,
                                   std::span<const std::size_t> coords = {});

struct GradcheckEntry {
  std::string name;
  std::size_t points = 0;
  std::size_t coordinates = 0;
  std::size_t kinks = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t points = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
};

/// Finite-difference suite over every differentiable primitive, model
/// composites, the double-backprop path, and the matching losses.
std::vector<GradcheckEntry> run_gradcheck_suite(const GradcheckOptions& options = {});

}  // namespace brewlab
