#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "kairos/numerics/tensor.hpp"

namespace kairos {

struct GradCheckEntry {
  std::size_t param = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;

  /// Largest relative error restricted to the given parameter indices.
  double max_rel_error_over(std::span<const std::size_t> params) const {
    double worst = 0.0;
    for (const auto& e : entries)
      for (auto p : params)
        if (e.param == p) worst = std::max(worst, e.rel_error);
    return worst;
  }
};

/// Compares reverse-mode gradients of `f` against central differences.
///
/// An element whose absolute discrepancy is at most `abs_floor` counts as exact
/// agreement (relative error 0); otherwise the error is |a - n| / max(|a|, |n|).
/// `f` must be deterministic: rebuild any Rng inside it from a fixed seed.
inline GradCheckReport finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                                         double h = 1e-5, double tol = 1e-4, double abs_floor = 1e-8) {
  if (h <= 0.0) throw ContractError("finite_diff_check: step must be positive");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor loss = f();
  if (loss.requires_grad()) backward(loss);

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    std::vector<double> analytic(p.size(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      double up = 0.0, down = 0.0;
      {
        NoGradGuard guard;
        values[i] = saved + h;
        up = f().item();
        values[i] = saved - h;
        down = f().item();
      }
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double diff = std::abs(analytic[i] - numeric);
      double rel = 0.0;
      if (diff > abs_floor) rel = diff / std::max(std::abs(analytic[i]), std::abs(numeric));
      report.entries.push_back({pi, i, analytic[i], numeric, rel});
      report.max_rel_error = std::max(report.max_rel_error, rel);
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace kairos
