#pragma once

#include "ags/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace ags {

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t components = 0;
};

/// Compares reverse-mode gradients of `f` against central differences
///   (f(p + h) - f(p - h)) / 2h
/// for every component of every parameter. The relative error of one
/// component is |a - n| / max(|a|, |n|, 1e-8).
///
/// `f` must rebuild its graph from `params` on each call. Parameter
/// gradients are zeroed first and left holding the analytic gradient.
/// `analytic_bias` scales the analytic gradient before comparison; it exists
/// so negative controls can confirm the harness catches a wrong gradient.
inline GradCheckResult finite_diff_check(const std::function<Var<double>()>& f, std::vector<Var<double>> params,
                                         double step = 1e-5, double analytic_bias = 1.0) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  GradCheckResult result;
  if (params.empty()) return result;

  for (auto& p : params) p.zero_grad();
  backward(f());

  for (auto& p : params) {
    const Matrix<double> analytic = p.grad() * analytic_bias;
    for (Index i = 0; i < p.size(); ++i) {
      double& slot = p.mutable_value().data()[i];
      const double saved = slot;
      slot = saved + step;
      const double plus = f().item();
      slot = saved - step;
      const double minus = f().item();
      slot = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus))
        throw NumericError("finite_diff_check: non-finite evaluation");
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = analytic.data()[i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      result.max_relative_error = std::max(result.max_relative_error, abs_err / denom);
      result.max_absolute_error = std::max(result.max_absolute_error, abs_err);
      ++result.components;
    }
  }
  return result;
}

}  // namespace ags
