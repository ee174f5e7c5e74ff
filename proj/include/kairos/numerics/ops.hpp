#pragma once

#include <cmath>
#include <limits>
#include <numbers>

#include "kairos/numerics/rng.hpp"
#include "kairos/numerics/tensor.hpp"

namespace kairos {

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline void require_suffix(const char* op, const Tensor& a, const Tensor& b) {
  if (!is_suffix(b.shape(), a.shape()))
    throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(b.shape()) + " onto " +
                         to_string(a.shape()));
}

template <class Fwd, class Dfx>
Tensor unary(const Tensor& x, Fwd fwd, Dfx dfdx) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  add_flops(xv.size());
  return make_result(x.shape(), std::move(out), {x}, [x, dfdx](Node& self) {
    double* gx = grad_of(x);
    if (!gx) return;
    const auto& xv = x.values();
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * dfdx(xv[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The right operand broadcasts over leading axes of
// the left one (its shape must be a suffix of the left shape).

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_suffix("add", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  const std::size_t nb = bv.size();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % nb];
  detail::add_flops(av.size());
  return detail::make_result(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
    const std::size_t nb = b.size();
    if (double* ga = detail::grad_of(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    if (double* gb = detail::grad_of(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % nb] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_suffix("sub", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  const std::size_t nb = bv.size();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i % nb];
  detail::add_flops(av.size());
  return detail::make_result(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
    const std::size_t nb = b.size();
    if (double* ga = detail::grad_of(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    if (double* gb = detail::grad_of(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % nb] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_suffix("mul", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  const std::size_t nb = bv.size();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % nb];
  detail::add_flops(av.size());
  return detail::make_result(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
    const auto& av = a.values();
    const auto& bv = b.values();
    const std::size_t nb = bv.size();
    if (double* ga = detail::grad_of(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * bv[i % nb];
    if (double* gb = detail::grad_of(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % nb] += self.grad[i] * av[i];
  });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary(
      x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * (std::numbers::sqrt2 / 2.0))); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * (std::numbers::sqrt2 / 2.0)));
        const double pdf = std::exp(-0.5 * v * v) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        return cdf + v * pdf;
      });
}

/// Inverted dropout. Identity when not training or p == 0.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout probability must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const double keep = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = rng.uniform() >= p ? keep : 0.0;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// x[..., k] . w[k, n] -> [..., n]; leading axes of x are batch axes.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.rank() != 2 || a.shape().back() != b.dim(0))
    throw DimensionError("matmul: inner dimensions disagree for " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  const std::size_t k = b.dim(0), n = b.dim(1), m = a.size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<double> out(m * n, 0.0);
  const double* A = a.values().data();
  const double* B = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* c = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += aip * brow[j];
    }
  }
  detail::add_flops(2ULL * m * k * n);
  return detail::make_result(std::move(out_shape), std::move(out), {a, b}, [a, b, m, k, n](detail::Node& self) {
    const double* G = self.grad.data();
    const double* A = a.values().data();
    const double* B = b.values().data();
    if (double* ga = detail::grad_of(a)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (double* gb = detail::grad_of(b)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          double* grow = gb + p * n;
          for (std::size_t j = 0; j < n; ++j) grow[j] += aip * G[i * n + j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose expects a matrix, got " + to_string(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return detail::make_result({c, r}, std::move(out), {x}, [x, r, c](detail::Node& self) {
    if (double* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: " + to_string(x.shape()) + " cannot become " + to_string(shape));
  return detail::make_result(std::move(shape), x.values(), {x}, [x](detail::Node& self) {
    if (double* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

/// Slice [start, start+len) along `axis`.
inline Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= x.rank() || start + len > x.dim(axis) || len == 0)
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") invalid on axis " + std::to_string(axis) + " of " + to_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t full = x.dim(axis);
  Shape shape = x.shape();
  shape[axis] = len;
  std::vector<double> out(outer * len * inner);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * full + start) * inner), len * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  return detail::make_result(std::move(shape), std::move(out), {x},
                             [x, outer, inner, full, start, len](detail::Node& self) {
                               double* gx = detail::grad_of(x);
                               if (!gx) return;
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t i = 0; i < len * inner; ++i)
                                   gx[(o * full + start) * inner + i] += self.grad[o * len * inner + i];
                             });
}

/// Index `index` along `axis`, dropping that axis.
inline Tensor select(const Tensor& x, std::size_t axis, std::size_t index) {
  Tensor slab = narrow(x, axis, index, 1);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  return reshape(slab, std::move(shape));
}

/// Concatenate along the last axis; leading axes must agree.
inline Tensor concat_last(const Tensor& a, const Tensor& b) {
  Shape la(a.shape().begin(), a.shape().end() - 1), lb(b.shape().begin(), b.shape().end() - 1);
  if (la != lb)
    throw DimensionError("concat_last: leading axes differ for " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  const std::size_t na = a.shape().back(), nb = b.shape().back(), rows = a.size() / na;
  Shape shape = a.shape();
  shape.back() = na + nb;
  std::vector<double> out(rows * (na + nb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(r * na), na,
                out.begin() + static_cast<std::ptrdiff_t>(r * (na + nb)));
    std::copy_n(b.values().begin() + static_cast<std::ptrdiff_t>(r * nb), nb,
                out.begin() + static_cast<std::ptrdiff_t>(r * (na + nb) + na));
  }
  return detail::make_result(std::move(shape), std::move(out), {a, b}, [a, b, na, nb, rows](detail::Node& self) {
    double* ga = detail::grad_of(a);
    double* gb = detail::grad_of(b);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * (na + nb);
      if (ga)
        for (std::size_t j = 0; j < na; ++j) ga[r * na + j] += g[j];
      if (gb)
        for (std::size_t j = 0; j < nb; ++j) gb[r * nb + j] += g[na + j];
    }
  });
}

/// Stacks along the leading axis.
inline Tensor concat_first(const Tensor& a, const Tensor& b) {
  if (a.rank() == 0 || a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1))
    throw DimensionError("concat_first: trailing axes differ for " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<double> out(a.values());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const std::size_t na = a.size();
  return detail::make_result(std::move(shape), std::move(out), {a, b}, [a, b, na](detail::Node& self) {
    if (double* ga = detail::grad_of(a))
      for (std::size_t i = 0; i < na; ++i) ga[i] += self.grad[i];
    if (double* gb = detail::grad_of(b))
      for (std::size_t i = 0; i < b.size(); ++i) gb[i] += self.grad[na + i];
  });
}

/// out[i] = x[i, index[i]] for a matrix x.
inline Tensor pick(const Tensor& x, std::span<const std::size_t> index) {
  if (x.rank() != 2 || index.size() != x.dim(0))
    throw DimensionError("pick: need one index per row of " + to_string(x.shape()));
  const std::size_t n = x.dim(1);
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) throw DimensionError("pick: column index out of range");
    out[i] = x.values()[i * n + idx[i]];
  }
  return detail::make_result({idx.size()}, std::move(out), {x}, [x, idx, n](detail::Node& self) {
    if (double* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < idx.size(); ++i) gx[i * n + idx[i]] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  detail::add_flops(x.size());
  return detail::make_result({1}, {s}, {x}, [x](detail::Node& self) {
    if (double* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Sum over one axis, which is removed from the result.
inline Tensor sum_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("sum_axis: axis out of range for " + to_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  std::vector<double> out(outer * inner, 0.0);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * len + l) * inner + i];
  detail::add_flops(x.size());
  return detail::make_result(std::move(shape), std::move(out), {x}, [x, outer, inner, len](detail::Node& self) {
    if (double* gx = detail::grad_of(x))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t i = 0; i < inner; ++i) gx[(o * len + l) * inner + i] += self.grad[o * inner + i];
  });
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
  const double len = static_cast<double>(x.dim(axis));
  return scale(sum_axis(x, axis), 1.0 / len);
}

// ---------------------------------------------------------------------------
// Row-wise normalizations (over the last axis)

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d)
    throw DimensionError("layer_norm: affine parameters " + to_string(gamma.shape()) + "/" +
                         to_string(beta.shape()) + " do not match " + to_string(x.shape()));
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / d;
  const auto& xv = x.values();
  const auto& g = gamma.values();
  const auto& bt = beta.values();
  std::vector<double> out(x.size()), xhat(x.size()), inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    inv[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * inv[r];
      out[r * d + j] = g[j] * xhat[r * d + j] + bt[j];
    }
  }
  detail::add_flops(8ULL * x.size());
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, d, rows, xhat = std::move(xhat), inv = std::move(inv)](detail::Node& self) {
        const auto& g = gamma.values();
        double* gx = detail::grad_of(x);
        double* gg = detail::grad_of(gamma);
        double* gb = detail::grad_of(beta);
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * d;
          const double* xh = xhat.data() + r * d;
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = dy[j] * g[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xh[j];
            if (gg) gg[j] += dy[j] * xh[j];
            if (gb) gb[j] += dy[j];
          }
          if (gx) {
            const double dd = static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j)
              gx[r * d + j] += inv[r] / dd * (dd * dxhat[j] - s1 - xh[j] * s2);
          }
        }
      });
}

/// Softmax over the last axis, stabilized by subtracting the row max.
inline Tensor softmax_row(const Tensor& x) {
  const std::size_t n = x.shape().back(), rows = x.size() / n;
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[r * n + j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= z;
  }
  detail::add_flops(4ULL * x.size());
  return detail::make_result(x.shape(), std::move(out), {x}, [x, n, rows](detail::Node& self) {
    double* gx = detail::grad_of(x);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* s = self.data.data() + r * n;
      const double* dy = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * s[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += s[j] * (dy[j] - dot);
    }
  });
}

inline Tensor log_softmax_row(const Tensor& x) {
  const std::size_t n = x.shape().back(), rows = x.size() / n;
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xr[j] - lse;
  }
  detail::add_flops(4ULL * x.size());
  return detail::make_result(x.shape(), std::move(out), {x}, [x, n, rows](detail::Node& self) {
    double* gx = detail::grad_of(x);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* ls = self.data.data() + r * n;
      const double* dy = self.grad.data() + r * n;
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += dy[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += dy[j] - std::exp(ls[j]) * total;
    }
  });
}

/// x / sqrt(|x|^2 + eps) along the last axis.
inline Tensor l2_normalize(const Tensor& x, double eps = 1e-12) {
  const std::size_t n = x.shape().back(), rows = x.size() / n;
  std::vector<double> out(x.size()), norms(rows);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = eps;
    for (std::size_t j = 0; j < n; ++j) ss += xv[r * n + j] * xv[r * n + j];
    norms[r] = std::sqrt(ss);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xv[r * n + j] / norms[r];
  }
  detail::add_flops(3ULL * x.size());
  return detail::make_result(x.shape(), std::move(out), {x}, [x, n, rows, norms = std::move(norms)](detail::Node& self) {
    double* gx = detail::grad_of(x);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* dy = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += (dy[j] - y[j] * dot) / norms[r];
    }
  });
}

// ---------------------------------------------------------------------------
// Sampling

inline Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

}  // namespace kairos
