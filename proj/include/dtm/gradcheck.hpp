#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dtm/tensor.hpp"

namespace dtm {

struct GradCheckReport {
  bool ok = false;
  double max_rel_error = 0.0;
  std::vector<double> per_input;  // max relative error per input tensor
  std::string message;
};

/// Central-difference check of reverse-mode gradients. `fn` must build a fresh
/// scalar graph from `inputs` on every call and be deterministic. The error
/// measure is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|): relative for O(1)
/// gradients, absolute near zero.
template <typename T>
GradCheckReport grad_check(const std::function<TensorPtr<T>(const std::vector<TensorPtr<T>>&)>& fn,
                           const std::vector<TensorPtr<T>>& inputs, double eps = 1e-5, double tol = 1e-4) {
  GradCheckReport report;
  report.per_input.assign(inputs.size(), 0.0);

  for (const auto& in : inputs) in->ensure_grad();
  for (const auto& in : inputs) in->zero_grad();

  auto out = fn(inputs);
  if (out->numel() != 1) {
    report.message = "grad_check: fn must return a scalar";
    return report;
  }
  if (!std::isfinite(static_cast<double>(out->data[0]))) {
    report.message = "grad_check: non-finite forward value, check aborted";
    return report;
  }
  out->backward();

  std::vector<std::vector<double>> analytic(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i)
    analytic[i].assign(inputs[i]->grad.begin(), inputs[i]->grad.end());

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& x = inputs[i]->data;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const T saved = x[j];
      x[j] = saved + static_cast<T>(eps);
      const double fp = static_cast<double>(fn(inputs)->item());
      x[j] = saved - static_cast<T>(eps);
      const double fm = static_cast<double>(fn(inputs)->item());
      x[j] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.message = "grad_check: non-finite perturbed value, check aborted";
        return report;
      }
      const double fd = (fp - fm) / (2.0 * eps);
      const double ad = analytic[i][j];
      if (!std::isfinite(ad)) {
        report.message = "grad_check: non-finite analytic gradient, check aborted";
        return report;
      }
      const double denom = std::max({1.0, std::fabs(ad), std::fabs(fd)});
      const double rel = std::fabs(ad - fd) / denom;
      report.per_input[i] = std::max(report.per_input[i], rel);
      report.max_rel_error = std::max(report.max_rel_error, rel);
    }
  }
  report.ok = report.max_rel_error < tol;
  return report;
}

}  // namespace dtm
