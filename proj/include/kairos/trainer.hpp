#pragma once

#include <cmath>
#include <cstdio>
#include <numbers>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "kairos/data.hpp"
#include "kairos/model.hpp"

namespace kairos {

// ---------------------------------------------------------------------------
// Optimization

/// AdamW with decoupled weight decay:
/// p <- p - lr (m_hat / (sqrt(v_hat) + eps)) - lr wd p.
class AdamW {
 public:
  struct Group {
    std::vector<Tensor> params;
    double lr = 1e-3;
    double weight_decay = 0.0;
  };

  explicit AdamW(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    std::set<const detail::Node*> seen;
    for (const auto& g : groups_) {
      if (!(g.lr > 0.0) || g.weight_decay < 0.0) throw ConfigError("AdamW: lr must be positive, decay non-negative");
      auto& m = m_.emplace_back();
      auto& v = v_.emplace_back();
      for (const auto& p : g.params) {
        if (!p.defined() || !p.requires_grad()) throw ContractError("AdamW: parameters must require grad");
        if (!seen.insert(p.node().get()).second) throw ContractError("AdamW: parameter listed twice");
        m.emplace_back(p.size(), 0.0);
        v.emplace_back(p.size(), 0.0);
      }
    }
  }

  std::vector<Group>& groups() { return groups_; }
  const std::vector<Group>& groups() const { return groups_; }
  std::size_t steps() const { return t_; }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& g : groups_) out.insert(out.end(), g.params.begin(), g.params.end());
    return out;
  }

  void step() {
    for (const auto& g : groups_)
      for (const auto& p : g.params)
        if (!p.has_grad()) throw ContractError("AdamW: trainable parameter has no gradient");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      auto& g = groups_[gi];
      for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
        Tensor p = g.params[pi];
        auto w = p.mutable_data();
        const auto grad = p.grad();
        auto& m = m_[gi][pi];
        auto& v = v_[gi][pi];
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
          v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
          const double mhat = m[i] / c1, vhat = v[i] / c2;
          w[i] = w[i] - g.lr * (mhat / (std::sqrt(vhat) + eps_)) - g.lr * g.weight_decay * w[i];
        }
      }
    }
  }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.zero_grad();
  }

 private:
  std::vector<Group> groups_;
  std::vector<std::vector<std::vector<double>>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Rescales gradients so their global l2 norm is at most max_norm. Returns
/// the norm before clipping. max_norm = 0 only measures.
inline double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto& p : params)
      for (double& g : p.mutable_grad()) g *= s;
  }
  return norm;
}

inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double eta_min) {
  if (total_steps == 0 || step > total_steps) throw ContractError("cosine_lr: need 0 <= step <= total_steps");
  if (step == 0) return lr_max;
  if (step == total_steps) return eta_min;
  return eta_min + 0.5 * (lr_max - eta_min) *
                       (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

// ---------------------------------------------------------------------------
// Metrics log

struct LogRow {
  std::string phase;
  std::size_t epoch = 0;
  std::optional<double> mtsm, nce;
  double total = 0.0;
  std::optional<double> accuracy, macro_f1;
};

using MetricsLog = std::vector<LogRow>;

inline constexpr std::string_view kLogHeader = "phase,epoch,mtsm,nce,total,accuracy,macro_f1";

inline std::string to_csv(const LogRow& r) {
  auto num = [](std::optional<double> v) {
    if (!v) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return std::string(buf);
  };
  return r.phase + ',' + std::to_string(r.epoch) + ',' + num(r.mtsm) + ',' + num(r.nce) + ',' + num(r.total) + ',' +
         num(r.accuracy) + ',' + num(r.macro_f1);
}

inline void write_log(std::ostream& os, const MetricsLog& log) {
  os << kLogHeader << '\n';
  for (const auto& r : log) os << to_csv(r) << '\n';
}

namespace detail {

inline void guard_finite(double v, const std::string& where) {
  if (!std::isfinite(v)) throw DivergenceError("non-finite loss (" + std::to_string(v) + ") at " + where);
}

inline void progress(std::ostream* os, const LogRow& r) {
  if (os) *os << to_csv(r) << '\n';
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pretraining

/// One pretraining step's losses; `mtsm` / `nce` are undefined when their
/// weight is zero (or, for nce, when the batch has a single series).
struct PretrainLosses {
  Tensor mtsm, nce, total;
};

/// Builds the dual-objective loss for one batch. Streams: view k is augmented
/// with rng.split("view<k>") and dropped out with rng.split("dropout<k>");
/// view 1 is masked with rng.split("mask").
inline PretrainLosses pretrain_losses(const Model& m, const SeriesBatch& batch, const TrainConfig& tc, const Rng& rng) {
  PretrainLosses out;
  const bool use_mtsm = tc.lambda1 > 0.0;
  const bool use_nce = tc.lambda2 > 0.0 && batch.batch_size() >= 2;
  const Rng mask_rng = rng.split("mask");
  Rng d1 = rng.split("dropout1"), d2 = rng.split("dropout2");

  const SeriesBatch v1 = augment(batch, rng.split("view1"));
  const PatchedBatch p1 = tokenize(m, v1, use_mtsm ? &mask_rng : nullptr, tc.mask_ratio);
  const EncoderOutput e1 = encode(p1, m.backbone.blocks, {true, &d1});
  if (use_mtsm) out.mtsm = mtsm_loss(e1.H, m.recon, p1.targets, p1.train_mask).loss;
  if (use_nce) {
    const SeriesBatch v2 = augment(batch, rng.split("view2"));
    const PatchedBatch p2 = tokenize(m, v2);
    const EncoderOutput e2 = encode(p2, m.backbone.blocks, {true, &d2});
    out.nce = info_nce(concat_first(m.proj(e1.h_cls), m.proj(e2.h_cls)), tc.tau);
  }
  if (out.mtsm.defined() && out.nce.defined()) {
    out.total = total_pretrain_loss(out.mtsm, out.nce, {tc.lambda1, tc.lambda2});
  } else if (out.mtsm.defined()) {
    out.total = scale(out.mtsm, tc.lambda1);
  } else if (out.nce.defined()) {
    out.total = scale(out.nce, tc.lambda2);
  }
  return out;
}

/// Parameters updated during pretraining. Heads of zero-weighted losses and
/// the mask token (when nothing is masked) stay out.
inline std::vector<Tensor> pretrain_parameters(const Model& m, const TrainConfig& tc) {
  NamedTensors named;
  for (auto& e : m.backbone.named())
    if (tc.lambda1 > 0.0 || e.first != "embed.mask_token") named.push_back(e);
  if (tc.lambda1 > 0.0)
    for (auto& e : m.recon.named("recon.")) named.push_back(e);
  if (tc.lambda2 > 0.0)
    for (auto& e : m.proj.named("proj.")) named.push_back(e);
  return tensors_of(named);
}

/// Self-supervised pretraining at constant lr. Batch i of epoch e draws from
/// rng.split("step").split(e).split(i); shuffling from rng.split("shuffle").
inline MetricsLog pretrain(Model& m, const SeriesBatch& corpus, const TrainConfig& tc, const Rng& rng,
                           std::ostream* progress = nullptr) {
  if (corpus.batch_size() == 0) throw DataError("pretraining corpus is empty");
  corpus.validate();
  AdamW opt({{pretrain_parameters(m, tc), tc.pretrain.lr, tc.pretrain.weight_decay}});
  auto params = opt.parameters();
  const Rng shuffle = rng.split("shuffle"), steps = rng.split("step");
  MetricsLog log;
  for (std::size_t epoch = 1; epoch <= tc.pretrain.epochs; ++epoch) {
    const auto batches = data::make_batches(corpus.batch_size(), tc.pretrain.batch, shuffle, epoch, true);
    double sum_mtsm = 0.0, sum_nce = 0.0, sum_total = 0.0;
    std::size_t n_mtsm = 0, n_nce = 0, n_total = 0;
    for (std::size_t i = 0; i < batches.size(); ++i) {
      const SeriesBatch batch = corpus.gather(batches[i]);
      auto losses = pretrain_losses(m, batch, tc, steps.split(epoch).split(i));
      if (!losses.total.defined() || !losses.total.requires_grad()) continue;
      const std::string where = "pretrain epoch " + std::to_string(epoch) + " batch " + std::to_string(i);
      detail::guard_finite(losses.total.item(), where);
      opt.zero_grad();
      backward(losses.total);
      if (tc.lambda1 > 0.0 && !m.backbone.mask_token.has_grad()) m.backbone.mask_token.mutable_grad();
      clip_grad_norm(params, tc.grad_clip);
      opt.step();
      if (losses.mtsm.defined()) sum_mtsm += losses.mtsm.item(), ++n_mtsm;
      if (losses.nce.defined()) sum_nce += losses.nce.item(), ++n_nce;
      sum_total += losses.total.item(), ++n_total;
    }
    LogRow row{"pretrain", epoch, std::nullopt, std::nullopt, n_total ? sum_total / static_cast<double>(n_total) : 0.0,
               std::nullopt, std::nullopt};
    if (n_mtsm) row.mtsm = sum_mtsm / static_cast<double>(n_mtsm);
    if (n_nce) row.nce = sum_nce / static_cast<double>(n_nce);
    log.push_back(row);
    detail::progress(progress, row);
  }
  opt.zero_grad();
  return log;
}

// ---------------------------------------------------------------------------
// Classification

/// Eval-mode CLS states, computed without recording gradients.
inline Tensor cls_states(const Model& m, const SeriesBatch& batch, std::size_t chunk = 64) {
  NoGradGuard no_grad;
  std::vector<double> out;
  const std::size_t B = batch.batch_size();
  for (std::size_t s = 0; s < B; s += chunk) {
    std::vector<std::size_t> rows(std::min(chunk, B - s));
    std::iota(rows.begin(), rows.end(), s);
    const auto h = encode(tokenize(m, batch.gather(rows)), m.backbone.blocks).h_cls;
    out.insert(out.end(), h.values().begin(), h.values().end());
  }
  return Tensor({B, m.config.model.d_model}, std::move(out));
}

inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (!x.defined()) return {};
  const std::size_t w = x.size() / x.dim(0);
  std::vector<double> out;
  out.reserve(rows.size() * w);
  for (std::size_t r : rows)
    out.insert(out.end(), x.values().begin() + static_cast<std::ptrdiff_t>(r * w),
               x.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * w));
  return Tensor({rows.size(), w}, std::move(out));
}

inline std::vector<int> gather_labels(const SeriesBatch& batch, std::span<const std::size_t> rows) {
  if (!batch.labels) throw DataError("split has no labels");
  std::vector<int> out;
  for (std::size_t r : rows) out.push_back((*batch.labels)[r]);
  return out;
}

/// Fits the feature scaler on the training split and attaches a fresh head.
inline void prepare_classifier(Model& m, const SeriesBatch& train, std::size_t num_classes, const Rng& rng) {
  if (!train.labels) throw DataError("training split has no labels");
  if (m.config.model.num_features > 0) m.scaler = features::FeatureScaler::fit(features::extract(train));
  m.attach_head(num_classes, rng);
}

/// Linear probing: only the head is optimized; the encoder runs in eval mode
/// once, up front.
inline MetricsLog lp_phase(Model& m, const SeriesBatch& train, const TrainConfig& tc, const Rng& rng,
                           std::ostream* progress = nullptr) {
  const HybridHead& head = m.hybrid();
  const Tensor h = cls_states(m, train);
  const Tensor f = scaled_features(m, raw_features_of(m, train));
  AdamW opt({{tensors_of(head.named("head.")), tc.lp.lr, tc.lp.weight_decay}});
  auto params = opt.parameters();
  const Rng shuffle = rng.split("shuffle"), steps = rng.split("step");
  MetricsLog log;
  for (std::size_t epoch = 1; epoch <= tc.lp.epochs; ++epoch) {
    const auto batches = data::make_batches(train.batch_size(), tc.ft.batch, shuffle, epoch, true);
    std::vector<int> pred, truth;
    double sum = 0.0;
    for (std::size_t i = 0; i < batches.size(); ++i) {
      Rng drop = steps.split(epoch).split(i);
      const auto labels = gather_labels(train, batches[i]);
      const Tensor logits = classify(gather_rows(h, batches[i]), gather_rows(f, batches[i]), head, true, &drop);
      const Tensor loss = ce_label_smooth(logits, labels, tc.label_smoothing);
      detail::guard_finite(loss.item(), "lp epoch " + std::to_string(epoch) + " batch " + std::to_string(i));
      opt.zero_grad();
      backward(loss);
      clip_grad_norm(params, tc.grad_clip);
      opt.step();
      sum += loss.item();
      for (int p : argmax_rows(logits)) pred.push_back(p);
      truth.insert(truth.end(), labels.begin(), labels.end());
    }
    const Metrics mt = metrics_from_predictions(pred, truth);
    LogRow row{"lp", epoch, std::nullopt, std::nullopt, sum / static_cast<double>(batches.size()), mt.accuracy,
               mt.macro_f1};
    log.push_back(row);
    detail::progress(progress, row);
  }
  opt.zero_grad();
  return log;
}

/// Backbone parameters trained during fine-tuning. The mask token is unused
/// without masking and stays out.
inline std::vector<Tensor> finetune_backbone_parameters(const Model& m) {
  NamedTensors named;
  for (auto& e : m.backbone.named())
    if (e.first != "embed.mask_token") named.push_back(e);
  return tensors_of(named);
}

/// Learning rate of every fine-tuning step 0..total (inclusive).
inline std::vector<double> lr_schedule(std::size_t total_steps, double lr_max, double eta_min) {
  std::vector<double> out;
  for (std::size_t s = 0; s <= total_steps; ++s) out.push_back(cosine_lr(s, total_steps, lr_max, eta_min));
  return out;
}

/// Full fine-tuning: backbone and head at their own rates, each decayed by a
/// per-step cosine schedule to eta_min.
inline MetricsLog ft_phase(Model& m, const SeriesBatch& train, const TrainConfig& tc, const Rng& rng,
                           std::ostream* progress = nullptr) {
  const HybridHead& head = m.hybrid();
  const Tensor f = scaled_features(m, raw_features_of(m, train));
  AdamW opt({{finetune_backbone_parameters(m), tc.ft.lr_backbone, tc.ft.weight_decay},
             {tensors_of(head.named("head.")), tc.ft.lr_head, tc.ft.weight_decay}});
  auto params = opt.parameters();
  const Rng shuffle = rng.split("shuffle"), steps = rng.split("step");
  const std::size_t per_epoch = (train.batch_size() + tc.ft.batch - 1) / tc.ft.batch;
  const std::size_t total = std::max<std::size_t>(1, tc.ft.epochs * per_epoch);
  std::size_t step = 0;
  MetricsLog log;
  for (std::size_t epoch = 1; epoch <= tc.ft.epochs; ++epoch) {
    const auto batches = data::make_batches(train.batch_size(), tc.ft.batch, shuffle, epoch, true);
    std::vector<int> pred, truth;
    double sum = 0.0;
    for (std::size_t i = 0; i < batches.size(); ++i, ++step) {
      opt.groups()[0].lr = cosine_lr(step, total, tc.ft.lr_backbone, tc.ft.eta_min);
      opt.groups()[1].lr = cosine_lr(step, total, tc.ft.lr_head, tc.ft.eta_min);
      const Rng stream = steps.split(epoch).split(i);
      Rng enc_drop = stream.split("encoder"), head_drop = stream.split("head");
      const auto labels = gather_labels(train, batches[i]);
      const SeriesBatch batch = train.gather(batches[i]);
      const EncoderOutput enc = encode(tokenize(m, batch), m.backbone.blocks, {true, &enc_drop});
      const Tensor logits = classify(enc.h_cls, gather_rows(f, batches[i]), head, true, &head_drop);
      const Tensor loss = ce_label_smooth(logits, labels, tc.label_smoothing);
      detail::guard_finite(loss.item(), "ft epoch " + std::to_string(epoch) + " batch " + std::to_string(i));
      opt.zero_grad();
      backward(loss);
      clip_grad_norm(params, tc.grad_clip);
      opt.step();
      sum += loss.item();
      for (int p : argmax_rows(logits)) pred.push_back(p);
      truth.insert(truth.end(), labels.begin(), labels.end());
    }
    const Metrics mt = metrics_from_predictions(pred, truth);
    LogRow row{"ft", epoch, std::nullopt, std::nullopt, sum / static_cast<double>(batches.size()), mt.accuracy,
               mt.macro_f1};
    log.push_back(row);
    detail::progress(progress, row);
  }
  opt.zero_grad();
  return log;
}

/// Eval-mode logits for a whole split.
inline Tensor predict_logits(const Model& m, const SeriesBatch& split) {
  NoGradGuard no_grad;
  const Tensor h = cls_states(m, split);
  return classify(h, scaled_features(m, raw_features_of(m, split)), m.hybrid(), false);
}

inline Metrics evaluate(const Model& m, const SeriesBatch& test) {
  if (!test.labels) throw DataError("test split has no labels");
  return metrics(predict_logits(m, test), *test.labels);
}

/// Scaler + head setup, linear probing, then full fine-tuning.
/// Streams: rng.split("head"), rng.split("lp"), rng.split("ft").
inline MetricsLog finetune(Model& m, const SeriesBatch& train, std::size_t num_classes, const TrainConfig& tc,
                           const Rng& rng, std::ostream* progress = nullptr) {
  train.validate();
  prepare_classifier(m, train, num_classes, rng);
  MetricsLog log = lp_phase(m, train, tc, rng.split("lp"), progress);
  for (auto& r : ft_phase(m, train, tc, rng.split("ft"), progress)) log.push_back(r);
  return log;
}

}  // namespace kairos
