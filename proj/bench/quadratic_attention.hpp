#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "kairos/numerics/tensor.hpp"

namespace kairos::bench {

/// Reference full self-attention softmax(X X^T / sqrt(D)) X per series, with
/// no projections. Used only as a cost baseline.
inline Tensor quadratic_attention(const Tensor& x) {
  const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));
  const auto& xv = x.values();
  std::vector<double> out(B * T * D, 0.0), w(T);
  for (std::size_t b = 0; b < B; ++b) {
    const double* X = xv.data() + b * T * D;
    double* Y = out.data() + b * T * D;
    for (std::size_t i = 0; i < T; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < T; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < D; ++d) s += X[i * D + d] * X[j * D + d];
        w[j] = s * scale;
        mx = std::max(mx, w[j]);
      }
      double z = 0.0;
      for (auto& v : w) z += (v = std::exp(v - mx));
      for (std::size_t j = 0; j < T; ++j)
        for (std::size_t d = 0; d < D; ++d) Y[i * D + d] += w[j] / z * X[j * D + d];
    }
  }
  detail::add_flops(4ULL * B * T * T * D);
  return Tensor({B, T, D}, std::move(out));
}

}  // namespace kairos::bench
