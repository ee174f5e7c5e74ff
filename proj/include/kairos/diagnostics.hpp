#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "kairos/model.hpp"
#include "kairos/numerics/gradcheck.hpp"
#include "kairos/trainer.hpp"

namespace kairos::diag {

// ---------------------------------------------------------------------------
// Gradient check

/// Layer groups reported by the gradient check, in display order.
inline const std::vector<std::string>& gradcheck_groups() {
  static const std::vector<std::string> g{"revin", "embedding", "titans", "cms", "ffn+norm",
                                          "recon_head", "proj_head", "hybrid_head"};
  return g;
}

inline std::string group_of(const std::string& name) {
  if (name.rfind("revin.", 0) == 0) return "revin";
  if (name.rfind("embed.", 0) == 0) return "embedding";
  if (name.rfind("recon.", 0) == 0) return "recon_head";
  if (name.rfind("proj.", 0) == 0) return "proj_head";
  if (name.rfind("head.", 0) == 0) return "hybrid_head";
  if (name.find(".titans.") != std::string::npos) return "titans";
  if (name.find(".cms.") != std::string::npos) return "cms";
  return "ffn+norm";
}

struct GroupResult {
  std::string group;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradcheckResult {
  std::vector<GroupResult> groups;
  double max_rel_error = 0.0;
  bool passed = true;
  double seconds = 0.0;
  std::size_t batch = 0, tokens = 0, width = 0;
};

/// Configuration of the gradient-check model: 2 series, 7 patches + CLS,
/// width 16.
inline Config gradcheck_config() {
  Config c = desk_preset();
  c.model.seq_len = 28;
  c.model.patch_len = 4;
  c.model.d_model = 16;
  c.model.depth = 2;
  c.model.chunk_size = 4;
  c.model.proj_dim = 8;
  c.train.grad_clip = 0.0;
  return c;
}

/// Checks every parameter of a small model against central differences on
/// the sum of all training losses (reconstruction, contrastive and
/// classification, with dropout and masking active under fixed streams).
inline GradcheckResult run_gradcheck(const Config& cfg, std::uint64_t seed = 0, double tol = 1e-4, double h = 1e-5) {
  const auto t0 = std::chrono::steady_clock::now();
  validate(cfg);
  const Rng root(seed);
  Model m = Model::init(cfg, root.split("model"));

  const std::size_t B = 2, L = cfg.model.seq_len;
  Rng data_rng = root.split("data");
  std::vector<double> values(B * L, 0.0);
  std::vector<std::uint8_t> valid(B * L, 0);
  const std::size_t short_len = std::max<std::size_t>(2, L - L / 4);
  for (std::size_t t = 0; t < L; ++t) {
    values[t] = std::sin(0.7 * static_cast<double>(t)) + 0.3 * data_rng.normal();
    valid[t] = 1;
  }
  for (std::size_t t = 0; t < short_len; ++t) {
    values[L + t] = 0.05 * static_cast<double>(t) + 0.5 * data_rng.normal();
    valid[L + t] = 1;
  }
  const SeriesBatch batch{Tensor({B, L}, values), valid, std::vector<int>{0, 1}};
  const SeriesBatch view2 = augment(batch, root.split("view2"));
  prepare_classifier(m, batch, 2, root.split("head"));
  const Tensor feats = scaled_features(m, raw_features_of(m, batch));
  const std::vector<int> labels{0, 1};
  const auto& tc = cfg.train;

  auto loss = [&]() {
    const Rng mask_rng(101);
    Rng d1(102), d2(103), dh(104);
    const PatchedBatch p1 = tokenize(m, batch, &mask_rng, tc.mask_ratio);
    const EncoderOutput e1 = encode(p1, m.backbone.blocks, {true, &d1});
    const EncoderOutput e2 = encode(tokenize(m, view2), m.backbone.blocks, {true, &d2});
    Tensor total = mtsm_loss(e1.H, m.recon, p1.targets, p1.train_mask).loss;
    total = add(total, info_nce(concat_first(m.proj(e1.h_cls), m.proj(e2.h_cls)), tc.tau));
    const Tensor logits = classify(e1.h_cls, feats, m.hybrid(), true, &dh);
    return add(total, ce_label_smooth(logits, labels, tc.label_smoothing));
  };

  const NamedTensors named = m.named_parameters();
  std::vector<Tensor> params = tensors_of(named);
  const GradCheckReport report = finite_diff_check(loss, params, h, tol);

  GradcheckResult out;
  std::map<std::string, GroupResult> by_group;
  for (const auto& g : gradcheck_groups()) by_group[g] = {g, 0, 0.0, true};
  for (const auto& e : report.entries) {
    auto& g = by_group[group_of(named[e.param].first)];
    ++g.elements;
    g.max_rel_error = std::max(g.max_rel_error, e.rel_error);
  }
  for (const auto& name : gradcheck_groups()) {
    auto g = by_group[name];
    g.passed = g.elements > 0 && g.max_rel_error <= tol;
    out.passed = out.passed && g.passed;
    out.max_rel_error = std::max(out.max_rel_error, g.max_rel_error);
    out.groups.push_back(g);
  }
  out.batch = B;
  out.tokens = cfg.model.num_patches() + 1;
  out.width = cfg.model.d_model;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---------------------------------------------------------------------------
// Encoder cost

struct BenchRow {
  std::size_t length = 0;
  double median_seconds = 0.0;
  std::uint64_t flops = 0;
};

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Median wall time of each `fns[i]` over `runs` calls, plus the FLOPs of one
/// call. Runs are interleaved round-robin across lengths.
inline std::vector<BenchRow> time_forwards(const std::vector<std::size_t>& lengths, std::size_t runs,
                                           const std::vector<std::function<void()>>& fns) {
  std::vector<BenchRow> rows;
  for (std::size_t i = 0; i < fns.size(); ++i) {
    fns[i]();  // warm-up
    reset_flop_count();
    fns[i]();
    rows.push_back({lengths[i], 0.0, flop_count()});
  }
  std::vector<std::vector<double>> times(fns.size());
  for (std::size_t r = 0; r < runs; ++r)
    for (std::size_t i = 0; i < fns.size(); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      fns[i]();
      times[i].push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
  for (std::size_t i = 0; i < fns.size(); ++i) rows[i].median_seconds = median(std::move(times[i]));
  return rows;
}

/// Forward time of the HOPE block stack (eval mode, no tape) on random
/// [batch x T x D] token sequences where every position writes.
inline std::vector<BenchRow> bench_encoder(const ModelConfig& mc, const std::vector<std::size_t>& lengths,
                                           std::size_t batch = 4, std::size_t runs = 20, std::uint64_t seed = 0) {
  Rng rng(seed);
  std::vector<HopeBlockParams> blocks;
  for (std::size_t l = 0; l < mc.depth; ++l)
    blocks.push_back(HopeBlockParams::init(mc.d_model, mc.cms_levels, mc.chunk_size, mc.ffn_mult, mc.dropout, rng));
  std::vector<Tensor> inputs;
  for (std::size_t T : lengths) inputs.push_back(randn({batch, T, mc.d_model}, rng));
  std::vector<std::function<void()>> fns;
  for (const Tensor& x : inputs)
    fns.emplace_back([&blocks, &x] {
      NoGradGuard no_grad;
      encode_tokens(x, blocks, SequenceLayout{false, {}});
    });
  return time_forwards(lengths, runs, fns);
}

}  // namespace kairos::diag
