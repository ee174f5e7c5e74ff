#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "kairos/numerics/ops.hpp"
#include "kairos/preprocess.hpp"

namespace kairos {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Maps encoder patch states back to patch values.
struct ReconHead {
  Tensor w, b;  // [D x P], [P]

  static ReconHead init(std::size_t d, std::size_t patch_len, Rng& rng) {
    return {randn({d, patch_len}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true),
            Tensor::zeros({patch_len}, true)};
  }
  NamedTensors named(const std::string& prefix) const { return {{prefix + "w", w}, {prefix + "b", b}}; }
};

/// Two-layer GELU projection used only by the contrastive objective.
struct ProjHead {
  Tensor w1, b1, w2, b2;  // D -> D -> D_proj

  static ProjHead init(std::size_t d, std::size_t proj_dim, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    return {randn({d, d}, rng, s, true), Tensor::zeros({d}, true), randn({d, proj_dim}, rng, s, true),
            Tensor::zeros({proj_dim}, true)};
  }
  NamedTensors named(const std::string& prefix) const {
    return {{prefix + "w1", w1}, {prefix + "b1", b1}, {prefix + "w2", w2}, {prefix + "b2", b2}};
  }

  /// Unit-norm projections, [B x D_proj].
  Tensor operator()(const Tensor& h) const {
    return l2_normalize(add(matmul(gelu(add(matmul(h, w1), b1)), w2), b2));
  }
};

/// Layer norm -> dropout -> linear over z = [h_cls || f_ts].
struct HybridHead {
  Tensor ln_g, ln_b;  // [D + K]
  Tensor w, b;        // [(D + K) x C], [C]
  double dropout = 0.4;
  std::size_t feature_width = 0;

  /// W_out ~ N(0, init_std^2).
  static HybridHead init(std::size_t d, std::size_t k, std::size_t num_classes, double dropout, Rng& rng,
                         double init_std = 0.02) {
    const std::size_t in = d + k;
    return {Tensor::full({in}, 1.0, true), Tensor::zeros({in}, true), randn({in, num_classes}, rng, init_std, true),
            Tensor::zeros({num_classes}, true), dropout, k};
  }
  std::size_t num_classes() const { return w.dim(1); }
  NamedTensors named(const std::string& prefix) const {
    return {{prefix + "ln.gamma", ln_g}, {prefix + "ln.beta", ln_b}, {prefix + "w", w}, {prefix + "b", b}};
  }
};

// ---------------------------------------------------------------------------
// Masked reconstruction

struct MtsmLoss {
  Tensor loss;
  bool empty_mask = false;  // no patch was masked; loss is the constant 0
};

/// Mean squared error over every element of the masked patches.
/// `predicted` is [B x N x P]; unmasked and padding patches contribute nothing.
inline MtsmLoss masked_mse(const Tensor& predicted, const Tensor& targets, std::span<const std::uint8_t> train_mask) {
  if (predicted.shape() != targets.shape() || predicted.rank() != 3)
    throw DimensionError("mtsm: prediction " + to_string(predicted.shape()) + " vs target " +
                         to_string(targets.shape()));
  const std::size_t B = predicted.dim(0), N = predicted.dim(1), P = predicted.dim(2);
  if (train_mask.size() != B * N) throw DimensionError("mtsm: train mask is not [B x N]");
  std::vector<std::uint8_t> mask(train_mask.begin(), train_mask.end());
  std::size_t masked = 0;
  for (auto m : mask) masked += m != 0;
  if (masked == 0) return {Tensor::scalar(0.0), true};
  const double denom = static_cast<double>(masked * P);
  double acc = 0.0;
  for (std::size_t i = 0; i < B * N; ++i) {
    if (!mask[i]) continue;
    for (std::size_t p = 0; p < P; ++p) {
      const double d = predicted[i * P + p] - targets[i * P + p];
      acc += d * d;
    }
  }
  Tensor loss = detail::make_result({1}, {acc / denom}, {predicted, targets},
                                    [predicted, targets, mask, P, denom](detail::Node& self) {
                                      double* gp = detail::grad_of(predicted);
                                      double* gt = detail::grad_of(targets);
                                      for (std::size_t i = 0; i < mask.size(); ++i) {
                                        if (!mask[i]) continue;
                                        for (std::size_t p = 0; p < P; ++p) {
                                          const double d = 2.0 * (predicted[i * P + p] - targets[i * P + p]) /
                                                           denom * self.grad[0];
                                          if (gp) gp[i * P + p] += d;
                                          if (gt) gt[i * P + p] -= d;
                                        }
                                      }
                                    });
  return {loss, false};
}

/// Reconstructs patches from encoder states (CLS excluded) and scores them.
inline MtsmLoss mtsm_loss(const Tensor& H, const ReconHead& head, const Tensor& targets,
                          std::span<const std::uint8_t> train_mask) {
  const std::size_t N = H.dim(1) - 1;
  Tensor patches_hat = add(matmul(narrow(H, 1, 1, N), head.w), head.b);
  return masked_mse(patches_hat, targets, train_mask);
}

// ---------------------------------------------------------------------------
// Contrastive objective

/// Symmetric NT-Xent over 2B unit-norm rows where rows i and i+B are views of
/// instance i. Each anchor's denominator spans every other row.
inline Tensor info_nce(const Tensor& z, double tau) {
  if (z.rank() != 2 || z.dim(0) % 2 != 0) throw DimensionError("info_nce: expected [2B x D] embeddings");
  const std::size_t n = z.dim(0), B = n / 2;
  if (B < 2) throw ContractError("info_nce: need at least two instances so every anchor has negatives");
  if (!(tau > 0.0)) throw ContractError("info_nce: temperature must be positive");
  Tensor logits = scale(matmul(z, transpose(z)), 1.0 / tau);
  std::vector<double> self_mask(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) self_mask[i * n + i] = -std::numeric_limits<double>::infinity();
  Tensor log_probs = log_softmax_row(add(logits, Tensor({n, n}, std::move(self_mask))));
  std::vector<std::size_t> positive(n);
  for (std::size_t i = 0; i < n; ++i) positive[i] = (i + B) % n;
  return scale(mean(pick(log_probs, positive)), -1.0);
}

/// x' = s (x + eps), eps ~ N(0, (0.02 sigma)^2) per valid timestep with sigma
/// the series' population std, s ~ U(0.8, 1.2) per series. Padding untouched.
struct AugmentOptions {
  double noise_fraction = 0.02;
  double scale_lo = 0.8;
  double scale_hi = 1.2;
};

inline SeriesBatch augment(const SeriesBatch& batch, const Rng& rng, const AugmentOptions& opt = {}) {
  const std::size_t B = batch.batch_size(), L = batch.length();
  std::vector<double> out(batch.values.values());
  for (std::size_t b = 0; b < B; ++b) {
    Rng stream = rng.split(b);
    const auto row = batch.row(b);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(row.size());
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    const double sigma = std::sqrt(var / static_cast<double>(row.size()));
    const double s = stream.uniform(opt.scale_lo, opt.scale_hi);
    for (std::size_t t = 0; t < row.size(); ++t) {
      const double eps = opt.noise_fraction * sigma * stream.normal();
      out[b * L + t] = s * (row[t] + eps);
    }
  }
  return {Tensor({B, L}, std::move(out)), batch.valid, batch.labels};
}

struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
};

/// lambda1 * mtsm + lambda2 * nce; zero-weighted terms are left out of the graph.
inline Tensor total_pretrain_loss(const Tensor& mtsm, const Tensor& nce, const LossWeights& w) {
  if (w.lambda1 < 0.0 || w.lambda2 < 0.0 || (w.lambda1 == 0.0 && w.lambda2 == 0.0))
    throw ConfigError("loss weights must be non-negative and not both zero");
  if (w.lambda2 == 0.0) return scale(mtsm, w.lambda1);
  if (w.lambda1 == 0.0) return scale(nce, w.lambda2);
  return add(scale(mtsm, w.lambda1), scale(nce, w.lambda2));
}

// ---------------------------------------------------------------------------
// Classification

/// Logits [B x C]. `features` holds standardized statistical priors [B x K];
/// pass an undefined tensor when the head was built with K = 0.
inline Tensor classify(const Tensor& h_cls, const Tensor& features, const HybridHead& head, bool training,
                       Rng* rng = nullptr) {
  const std::size_t D = h_cls.dim(1);
  const std::size_t K = features.defined() ? features.dim(1) : 0;
  if (K != head.feature_width || D + K != head.w.dim(0))
    throw ConfigError("classify: head expects width " + std::to_string(head.w.dim(0)) + " (K=" +
                      std::to_string(head.feature_width) + ") but got D=" + std::to_string(D) +
                      ", K=" + std::to_string(K));
  Tensor z = K ? concat_last(h_cls, features) : h_cls;
  Tensor normed = layer_norm(z, head.ln_g, head.ln_b);
  if (training && head.dropout > 0.0) {
    if (!rng) throw ContractError("classify: training mode needs an Rng");
    normed = dropout(normed, head.dropout, *rng, true);
  }
  return add(matmul(normed, head.w), head.b);
}

/// Mean cross entropy against (1 - s) onehot + s / C.
inline Tensor ce_label_smooth(const Tensor& logits, std::span<const int> labels, double smoothing) {
  if (logits.rank() != 2 || labels.size() != logits.dim(0))
    throw DimensionError("ce_label_smooth: need one label per logit row");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  std::vector<double> target(B * C, smoothing / static_cast<double>(C));
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= C)
      throw ContractError("ce_label_smooth: label " + std::to_string(labels[b]) + " outside [0, " +
                          std::to_string(C) + ")");
    target[b * C + static_cast<std::size_t>(labels[b])] += 1.0 - smoothing;
  }
  Tensor weighted = mul(log_softmax_row(logits), Tensor({B, C}, std::move(target)));
  return scale(sum(weighted), -1.0 / static_cast<double>(B));
}

struct ClassReport {
  int cls = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct Metrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<ClassReport> per_class;
};

inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (logits[b * C + c] > logits[b * C + best]) best = c;
    out[b] = static_cast<int>(best);
  }
  return out;
}

/// Accuracy and macro-F1. Classes absent from both predictions and labels are
/// skipped; any other class with no true positives scores F1 = 0.
inline Metrics metrics_from_predictions(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.empty() || predicted.size() != labels.size())
    throw ContractError("metrics: need equally many, and at least one, predictions and labels");
  std::set<int> classes(labels.begin(), labels.end());
  classes.insert(predicted.begin(), predicted.end());
  Metrics m;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
  m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  double f1_sum = 0.0;
  for (int c : classes) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      tp += predicted[i] == c && labels[i] == c;
      fp += predicted[i] == c && labels[i] != c;
      fn += predicted[i] != c && labels[i] == c;
    }
    ClassReport r{c, 0.0, 0.0, 0.0, tp + fn};
    if (tp + fp) r.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (tp + fn) r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (tp) r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
    f1_sum += r.f1;
    m.per_class.push_back(r);
  }
  m.macro_f1 = f1_sum / static_cast<double>(classes.size());
  return m;
}

inline Metrics metrics(const Tensor& logits, std::span<const int> labels) {
  const auto predicted = argmax_rows(logits);
  return metrics_from_predictions(predicted, labels);
}

}  // namespace kairos
