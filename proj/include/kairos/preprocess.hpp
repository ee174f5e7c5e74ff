#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "kairos/errors.hpp"
#include "kairos/numerics/ops.hpp"

namespace kairos {

/// Batch of right-padded univariate series.
struct SeriesBatch {
  Tensor values;                     // [B x L], zero past each series' valid prefix
  std::vector<std::uint8_t> valid;   // [B x L], 1 = observed timestep
  std::optional<std::vector<int>> labels;

  std::size_t batch_size() const { return values.dim(0); }
  std::size_t length() const { return values.dim(1); }

  std::size_t valid_count(std::size_t b) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < length(); ++t) n += valid[b * length() + t];
    return n;
  }

  /// Row b's valid prefix.
  std::span<const double> row(std::size_t b) const {
    return values.data().subspan(b * length(), valid_count(b));
  }

  void validate() const {
    if (!values.defined() || values.rank() != 2) throw DataError("series batch must be a [B x L] tensor");
    if (valid.size() != values.size()) throw DataError("valid mask size does not match values");
    if (labels && labels->size() != batch_size()) throw DataError("one label per series required");
    for (std::size_t b = 0; b < batch_size(); ++b) {
      bool seen_pad = false;
      std::size_t n = 0;
      for (std::size_t t = 0; t < length(); ++t) {
        const bool v = valid[b * length() + t] != 0;
        if (v && seen_pad) throw DataError("valid mask of series " + std::to_string(b) + " is not a prefix");
        seen_pad = seen_pad || !v;
        n += v;
      }
      if (n < 2) throw DataError("series " + std::to_string(b) + " has fewer than 2 valid timesteps");
    }
  }

  /// Sub-batch made of the given rows, in order.
  SeriesBatch gather(std::span<const std::size_t> rows) const {
    const std::size_t L = length();
    std::vector<double> v(rows.size() * L);
    std::vector<std::uint8_t> m(rows.size() * L);
    std::optional<std::vector<int>> lab;
    if (labels) lab.emplace();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(values.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * L), L,
                  v.begin() + static_cast<std::ptrdiff_t>(i * L));
      std::copy_n(valid.begin() + static_cast<std::ptrdiff_t>(rows[i] * L), L,
                  m.begin() + static_cast<std::ptrdiff_t>(i * L));
      if (labels) lab->push_back((*labels)[rows[i]]);
    }
    return {Tensor({rows.size(), L}, std::move(v)), std::move(m), std::move(lab)};
  }
};

/// Per-series statistics stashed by RevIN plus the shared affine scalars.
struct RevinStats {
  std::vector<double> mean;    // [B]
  std::vector<double> stddev;  // [B], population std floored at eps
  Tensor gamma;                // [1]
  Tensor beta;                 // [1]
  double eps = 1e-5;
};

struct RevinResult {
  SeriesBatch normalized;  // gamma * z + beta on the valid region, 0 on padding
  Tensor standardized;     // z itself: zero mean / unit std on the valid region, constant
  RevinStats stats;
};

/// Reversible instance normalization over each series' valid region.
inline RevinResult revin_normalize(const SeriesBatch& batch, const Tensor& gamma, const Tensor& beta,
                                   double eps = 1e-5) {
  if (eps <= 0.0) throw ContractError("revin_normalize: eps must be positive");
  if (gamma.size() != 1 || beta.size() != 1)
    throw DimensionError("revin_normalize: affine parameters must be scalars (one channel)");
  const std::size_t B = batch.batch_size(), L = batch.length();
  RevinStats stats{std::vector<double>(B), std::vector<double>(B), gamma, beta, eps};
  std::vector<double> z(B * L, 0.0);
  const auto& x = batch.values.values();
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t n = batch.valid_count(b);
    double mu = 0.0;
    for (std::size_t t = 0; t < n; ++t) mu += x[b * L + t];
    mu /= static_cast<double>(n);
    double resid = 0.0;  // corrected two-pass mean
    for (std::size_t t = 0; t < n; ++t) resid += x[b * L + t] - mu;
    mu += resid / static_cast<double>(n);
    double var = 0.0;
    for (std::size_t t = 0; t < n; ++t) var += (x[b * L + t] - mu) * (x[b * L + t] - mu);
    var /= static_cast<double>(n);
    const double sd = std::max(std::sqrt(var), eps);
    stats.mean[b] = mu;
    stats.stddev[b] = sd;
    for (std::size_t t = 0; t < n; ++t) z[b * L + t] = (x[b * L + t] - mu) / sd;
  }
  Tensor standardized({B, L}, z);

  // Affine part, applied on valid positions only so padding stays exactly 0.
  const double g = gamma.item(), bt = beta.item();
  std::vector<double> out(B * L, 0.0);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (batch.valid[i]) out[i] = g * z[i] + bt;
  detail::add_flops(2ULL * out.size());
  auto valid = batch.valid;
  Tensor normalized = detail::make_result(
      {B, L}, std::move(out), {gamma, beta}, [gamma, beta, z = std::move(z), valid](detail::Node& self) {
        double* gg = detail::grad_of(gamma);
        double* gb = detail::grad_of(beta);
        for (std::size_t i = 0; i < z.size(); ++i) {
          if (!valid[i]) continue;
          if (gg) gg[0] += self.grad[i] * z[i];
          if (gb) gb[0] += self.grad[i];
        }
      });
  return {SeriesBatch{normalized, batch.valid, batch.labels}, standardized, std::move(stats)};
}

/// Inverse of revin_normalize for any tensor whose leading axis is the batch.
inline Tensor revin_denormalize(const Tensor& y, const RevinStats& stats) {
  if (y.dim(0) != stats.mean.size())
    throw DimensionError("revin_denormalize: tensor " + to_string(y.shape()) + " does not match " +
                         std::to_string(stats.mean.size()) + " stashed series");
  const double g = stats.gamma.item(), bt = stats.beta.item();
  if (std::abs(g) < stats.eps) throw ContractError("revin_denormalize: gamma must be invertible (|gamma| >= eps)");
  const std::size_t per = y.size() / y.dim(0);
  std::vector<double> out(y.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t b = i / per;
    out[i] = (y[i] - bt) / g * stats.stddev[b] + stats.mean[b];
  }
  return Tensor(y.shape(), std::move(out));
}

struct Patches {
  Tensor patches;                          // [B x N x P]
  std::vector<std::uint8_t> padding_mask;  // [B x N], 1 = patch overlaps an observed timestep
  std::size_t num_patches = 0;
};

/// Cuts each series into N = floor(L/P) non-overlapping patches; the
/// L mod P trailing timesteps are dropped.
inline Patches patchify(const SeriesBatch& normalized, std::size_t patch_len) {
  const std::size_t B = normalized.batch_size(), L = normalized.length();
  if (patch_len == 0 || L < patch_len)
    throw ConfigError("patchify: series length " + std::to_string(L) + " is shorter than patch length " +
                      std::to_string(patch_len));
  const std::size_t N = L / patch_len;
  Tensor kept = N * patch_len == L ? normalized.values : narrow(normalized.values, 1, 0, N * patch_len);
  Patches out{reshape(kept, {B, N, patch_len}), std::vector<std::uint8_t>(B * N, 0), N};
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t p = 0; p < patch_len; ++p)
        if (normalized.valid[b * L + i * patch_len + p]) {
          out.padding_mask[b * N + i] = 1;
          break;
        }
  return out;
}

/// Round half away from zero.
inline std::size_t masked_count(std::size_t valid_patches, double ratio) {
  return static_cast<std::size_t>(std::round(ratio * static_cast<double>(valid_patches)));
}

/// Selects round(ratio * #valid) valid patches per series, uniformly without
/// replacement. Series b draws from `rng.split(b)`.
inline std::vector<std::uint8_t> sample_train_mask(std::span<const std::uint8_t> padding_mask,
                                                   std::size_t num_patches, double ratio, const Rng& rng) {
  if (ratio < 0.0 || ratio >= 1.0) throw ContractError("sample_train_mask: ratio must lie in [0, 1)");
  if (num_patches == 0 || padding_mask.size() % num_patches != 0)
    throw DimensionError("sample_train_mask: padding mask is not [B x N]");
  const std::size_t B = padding_mask.size() / num_patches;
  std::vector<std::uint8_t> mask(padding_mask.size(), 0);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < num_patches; ++i)
      if (padding_mask[b * num_patches + i]) candidates.push_back(i);
    const std::size_t k = masked_count(candidates.size(), ratio);
    Rng stream = rng.split(b);
    for (std::size_t j = 0; j < k; ++j) {  // partial Fisher-Yates
      const std::size_t pick = j + stream.below(candidates.size() - j);
      std::swap(candidates[j], candidates[pick]);
      mask[b * num_patches + candidates[j]] = 1;
    }
  }
  return mask;
}

/// Builds the token sequence [CLS, patch_1 .. patch_N] with positions added.
/// Patches flagged in `train_mask` have their projection replaced by
/// `mask_token` (positions are still added).
inline Tensor embed_and_position(const Tensor& patches, const Tensor& w_embed, const Tensor& pos, const Tensor& cls,
                                 const Tensor& mask_token = {}, std::span<const std::uint8_t> train_mask = {}) {
  if (patches.rank() != 3) throw DimensionError("embed_and_position: patches must be [B x N x P]");
  const std::size_t B = patches.dim(0), N = patches.dim(1);
  Tensor proj = matmul(patches, w_embed);  // [B x N x D]
  const std::size_t D = w_embed.dim(1);
  if (pos.rank() != 2 || pos.dim(0) != N + 1 || pos.dim(1) != D || cls.size() != D)
    throw DimensionError("embed_and_position: positions " + to_string(pos.shape()) + " / cls " +
                         to_string(cls.shape()) + " do not fit " + std::to_string(N) + " patches of width " +
                         std::to_string(D));
  const bool masking = !train_mask.empty();
  if (masking && (train_mask.size() != B * N || !mask_token.defined() || mask_token.size() != D))
    throw DimensionError("embed_and_position: train mask or mask token has the wrong shape");
  std::vector<std::uint8_t> tm(train_mask.begin(), train_mask.end());

  const auto& pv = proj.values();
  const auto& posv = pos.values();
  std::vector<double> out(B * (N + 1) * D);
  for (std::size_t b = 0; b < B; ++b) {
    double* row = out.data() + b * (N + 1) * D;
    for (std::size_t j = 0; j < D; ++j) row[j] = cls[j] + posv[j];
    for (std::size_t i = 0; i < N; ++i) {
      const bool m = masking && tm[b * N + i];
      for (std::size_t j = 0; j < D; ++j)
        row[(i + 1) * D + j] = (m ? mask_token[j] : pv[(b * N + i) * D + j]) + posv[(i + 1) * D + j];
    }
  }
  detail::add_flops(out.size());
  return detail::make_result(
      {B, N + 1, D}, std::move(out), {proj, pos, cls, mask_token},
      [proj, pos, cls, mask_token, tm, B, N, D](detail::Node& self) {
        double* gp = detail::grad_of(proj);
        double* gpos = detail::grad_of(pos);
        double* gcls = detail::grad_of(cls);
        double* gmask = tm.empty() ? nullptr : detail::grad_of(mask_token);
        for (std::size_t b = 0; b < B; ++b) {
          const double* g = self.grad.data() + b * (N + 1) * D;
          for (std::size_t j = 0; j < D; ++j) {
            if (gcls) gcls[j] += g[j];
            if (gpos) gpos[j] += g[j];
          }
          for (std::size_t i = 0; i < N; ++i) {
            const bool m = !tm.empty() && tm[b * N + i];
            for (std::size_t j = 0; j < D; ++j) {
              const double gi = g[(i + 1) * D + j];
              if (gpos) gpos[(i + 1) * D + j] += gi;
              if (m) {
                if (gmask) gmask[j] += gi;
              } else if (gp) {
                gp[(b * N + i) * D + j] += gi;
              }
            }
          }
        }
      });
}

/// Tokenized batch ready for the encoder.
struct PatchedBatch {
  Tensor tokens;                           // [B x (N+1) x D], slot 0 = CLS
  std::vector<std::uint8_t> padding_mask;  // [B x N]
  std::vector<std::uint8_t> train_mask;    // [B x N], empty when nothing is masked
  RevinStats revin;
  Tensor raw_patches;                      // [B x N x P] affine-normalized values fed to the embedding
  Tensor targets;                          // [B x N x P] standardized values, reconstruction targets
  std::size_t num_patches = 0;
};

}  // namespace kairos
