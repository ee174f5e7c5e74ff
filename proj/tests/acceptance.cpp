// Acceptance run: one PASS/FAIL/SKIP line per criterion, nonzero exit on any FAIL.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>

#include "kairos/cli.hpp"
#include "kairos/kairos.hpp"

using namespace kairos;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  if (!pass) ++failures;
}

void skip(const std::string& name, const std::string& detail) {
  std::cout << "SKIP " << name << ": " << detail << std::endl;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

SeriesBatch unlabeled(SeriesBatch b) {
  b.labels.reset();
  return b;
}

void gradient_integrity() {
  const auto r = diag::run_gradcheck(diag::gradcheck_config());
  std::string worst;
  for (const auto& g : r.groups) worst += fmt(" %s=%.2e", g.group.c_str(), g.max_rel_error);
  const bool small = r.batch <= 2 && r.tokens <= 8 && r.width <= 16;
  report("gradient integrity", r.passed && small && r.seconds < 120.0,
         fmt("shape %zux%zux%zu, %.1fs,", r.batch, r.tokens, r.width, r.seconds) + worst);
}

void revin_round_trip() {
  Rng rng(11);
  double worst = 0.0;
  std::size_t constant_rows = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t B = 1 + rng.below(6), L = 2 + rng.below(300);
    std::vector<double> v(B * L, 0.0);
    std::vector<std::uint8_t> valid(B * L, 0);
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t n = 1 + rng.below(L);
      const double scale = std::exp(3.0 * rng.normal()), shift = 100.0 * rng.normal();
      const bool constant = rng.below(4) == 0;
      constant_rows += constant;
      for (std::size_t t = 0; t < n; ++t) {
        v[b * L + t] = constant ? shift : shift + scale * rng.normal();
        valid[b * L + t] = 1;
      }
    }
    const SeriesBatch batch{Tensor({B, L}, v), valid, std::nullopt};
    const double gamma = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.1, 3.0);
    const auto r = revin_normalize(batch, Tensor::scalar(gamma), Tensor::scalar(rng.normal()));
    const Tensor back = revin_denormalize(r.normalized.values, r.stats);
    for (std::size_t i = 0; i < v.size(); ++i)
      if (valid[i]) worst = std::max(worst, std::abs(back[i] - v[i]));
  }
  report("revin round trip", worst <= 1e-6 && constant_rows > 0,
         fmt("1000 batches (%zu constant series), max error %.2e", constant_rows, worst));
}

void masking_exactness() {
  Rng meta(12);
  bool exact = true, clean = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t N = 1 + meta.below(64), valid = 1 + meta.below(N);
    std::vector<std::uint8_t> pad(N, 0);
    std::fill_n(pad.begin(), valid, 1);
    const auto m = sample_train_mask(pad, N, 0.4, Rng(meta.next_u64()));
    std::size_t masked = 0;
    for (std::size_t i = 0; i < N; ++i) {
      masked += m[i];
      clean = clean && !(m[i] && !pad[i]);
    }
    exact = exact && masked == static_cast<std::size_t>(std::round(0.4 * static_cast<double>(valid)));
  }
  report("masking exactness", exact && clean,
         fmt("1000 pairs, counts %s, padding %s", exact ? "exact" : "off", clean ? "untouched" : "touched"));
}

void linear_cost() {
  cli::BenchOptions o;
  o.lengths = {32, 64, 128, 256};
  o.runs = 20;
  const auto t = cli::run_bench(o, desk_preset().model);
  bool ok = true;
  std::string detail = "hope";
  for (std::size_t i = 1; i < t.hope.size(); ++i) {
    const double r = t.hope[i].median_seconds / t.hope[i - 1].median_seconds;
    ok = ok && r <= 2.3;
    detail += fmt(" %zu->%zu=%.2f", t.hope[i - 1].length, t.hope[i].length, r);
  }
  const double q = t.quadratic[3].median_seconds / t.quadratic[2].median_seconds;
  ok = ok && q >= 3.5;
  report("linear cost", ok, detail + fmt("; quadratic 128->256=%.2f", q));
}

void lp_freeze() {
  Config cfg = desk_preset();
  cfg.train.lp.epochs = 3;
  cfg.train.ft.epochs = 1;
  const Rng root(13);
  Model m = Model::init(cfg, root.split("model"));
  const auto train = data::synth_corpus({data::SynthKind::Sine, data::SynthKind::Ar1}, 32, 256, root.split("data"));
  prepare_classifier(m, train, 2, root.split("head"));
  const auto h0 = parameter_hash(m.backbone.named());
  const auto hh0 = parameter_hash(m.head_named());
  lp_phase(m, train, cfg.train, root.split("lp"));
  const auto h1 = parameter_hash(m.backbone.named());
  const auto hh1 = parameter_hash(m.head_named());
  ft_phase(m, train, cfg.train, root.split("ft"));
  const auto h2 = parameter_hash(m.backbone.named());
  report("lp freeze", h0 == h1 && hh0 != hh1 && h2 != h1,
         fmt("backbone %s after lp (head %s), %s after ft", h0 == h1 ? "identical" : "changed",
             hh0 == hh1 ? "unchanged" : "trained", h2 == h1 ? "unchanged" : "changed"));
}

void causality() {
  const Config cfg = desk_preset();
  const Rng root(14);
  const Model m = Model::init(cfg, root.split("model"));
  const std::size_t C = cfg.model.chunk_size, D = cfg.model.d_model;
  Rng rng = root.split("trials");
  std::size_t compared = 0;
  bool ok = true;
  for (int trial = 0; trial < 100; ++trial) {
    auto series = data::synth_corpus({data::SynthKind::Sine, data::SynthKind::TrendMix}, 1, cfg.model.seq_len,
                                     rng.split(static_cast<std::uint64_t>(trial)));
    const PatchedBatch p = tokenize(m, series);
    const SequenceLayout layout = layout_for(p);
    const std::size_t T = p.tokens.dim(1);
    const std::size_t t = 1 + rng.below(T - 1);
    std::vector<double> xv = p.tokens.values();
    for (std::size_t j = 0; j < D; ++j) xv[t * D + j] += rng.normal();
    NoGradGuard no_grad;
    const Tensor a = encode_tokens(p.tokens, m.backbone.blocks, layout);
    const Tensor b = encode_tokens(Tensor(p.tokens.shape(), xv), m.backbone.blocks, layout);
    for (std::size_t s = 1; s < (t / C) * C; ++s, ++compared)
      for (std::size_t j = 0; j < D; ++j) ok = ok && a[s * D + j] == b[s * D + j];
  }
  report("causality", ok, fmt("100 trials, %zu earlier-chunk positions compared bitwise", compared));
}

void closed_forms() {
  bool ok = true;
  std::string detail;
  for (std::size_t B : {2u, 4u, 16u}) {
    const Tensor same = Tensor::full({2 * B, 6}, 1.0 / std::sqrt(6.0));
    const double err = std::abs(info_nce(same, 0.1).item() - std::log(2.0 * B - 1.0));
    ok = ok && err <= 1e-9;
    detail += fmt("identical B=%zu err %.1e; ", B, err);
  }
  const Tensor orth({4, 3}, {1, 0, 0, 0, 1, 0, 1, 0, 0, 0, 1, 0});
  const double nce = info_nce(orth, 0.1).item();
  ok = ok && std::abs(nce - 9.1e-5) <= 1e-6;
  detail += fmt("orthogonal %.4e; ", nce);
  for (std::size_t C : {2u, 5u, 37u}) {
    const std::vector<int> labels{0, static_cast<int>(C) - 1, 1};
    const double v = ce_label_smooth(Tensor::full({3, C}, 0.7), labels, 0.1).item();
    ok = ok && std::abs(v - std::log(static_cast<double>(C))) <= 1e-12;
  }
  detail += "uniform CE ln C; ";
  const bool ends = cosine_lr(0, 240, 1e-4, 1e-6) == 1e-4 && cosine_lr(240, 240, 1e-4, 1e-6) == 1e-6 &&
                    cosine_lr(0, 1, 1e-5, 1e-6) == 1e-5 && cosine_lr(1, 1, 1e-5, 1e-6) == 1e-6;
  ok = ok && ends;
  report("closed-form losses", ok, detail + (ends ? "cosine endpoints exact" : "cosine endpoints off"));
}

void feature_oracles() {
  using namespace features;
  Rng rng(15);
  std::vector<double> ar(2048);
  double s = rng.normal() / std::sqrt(1 - 0.81);
  for (auto& v : ar) v = s = 0.9 * s + rng.normal();
  const double a1 = acf(ar, 1);

  std::vector<double> sine(4096), white(4096);
  for (std::size_t i = 0; i < sine.size(); ++i)
    sine[i] = std::sin(2 * std::numbers::pi * 64.0 * static_cast<double>(i) / 4096.0);
  for (auto& v : white) v = rng.normal();
  const double hs = spectral_entropy(sine), hw = spectral_entropy(white);

  std::vector<double> ramp(256);
  for (std::size_t i = 0; i < ramp.size(); ++i) ramp[i] = 0.25 * static_cast<double>(i) + 1.0;
  const double trend = trend_seasonal_strength(ramp, detect_season(ramp)).trend;

  bool finite = true;
  std::vector<double> alt(101);
  for (std::size_t i = 0; i < alt.size(); ++i) alt[i] = i % 2 ? -2.0 : 2.0;
  for (const auto& x : {std::vector<double>(256, 3.5), std::vector<double>{1.0, 4.0}, std::vector<double>{2.0, 2.0}, alt})
    for (double v : feature_vector(x)) finite = finite && std::isfinite(v);

  const bool ok = std::abs(a1 - 0.9) <= 0.05 && hs <= 0.05 && hw >= 0.9 && trend >= 0.99 && finite;
  report("feature oracles", ok,
         fmt("acf1 %.3f, entropy sine %.3f noise %.3f, ramp trend %.4f, edge inputs %s", a1, hs, hw, trend,
             finite ? "finite" : "non-finite"));
}

void end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<data::SynthKind> all{data::SynthKind::Sine, data::SynthKind::Ar1, data::SynthKind::Square,
                                         data::SynthKind::TrendMix};
  const std::vector<data::SynthKind> task{data::SynthKind::Sine, data::SynthKind::Ar1};
  std::string detail;
  int hits = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Config cfg = desk_preset();
    const Rng root(seed);
    const SeriesBatch corpus = unlabeled(data::synth_corpus(all, 256, 256, root.split("corpus")));
    const SeriesBatch train = data::synth_corpus(task, 64, 256, root.split("train"));
    const SeriesBatch test = data::synth_corpus(task, 64, 256, root.split("test"));
    Model m = Model::init(cfg, root.split("model"));
    pretrain(m, corpus, cfg.train, root.split("pretrain"));
    finetune(m, train, 2, cfg.train, root.split("finetune"));
    const double acc = evaluate(m, test).accuracy;
    hits += acc >= 0.95;
    detail += fmt("%s%.3f", seed > 1 ? " " : "", acc);
  }
  const double secs = seconds_since(t0);
  report("end-to-end learning", hits >= 4 && secs < 600.0,
         fmt("%d/5 seeds >= 0.95 (", hits) + detail + fmt("), %.0fs", secs));
}

void write_split(const fs::path& p, const SeriesBatch& b) {
  std::ofstream out(p);
  data::write_table(out, b);
}

void determinism() {
  const fs::path dir = fs::temp_directory_path() / "kairos_acceptance_det";
  fs::create_directories(dir);
  const Rng rng(16);
  const std::vector<data::SynthKind> task{data::SynthKind::Sine, data::SynthKind::Ar1};
  write_split(dir / "train.tsv", data::synth_corpus(task, 32, 128, rng.split("train")));
  write_split(dir / "test.tsv", data::synth_corpus(task, 32, 128, rng.split("test")));
  std::ofstream(dir / "run.cfg") << "model.seq_len = 128\nlp.epochs = 5\nft.epochs = 5\n";
  std::map<std::string, std::string> first;
  bool same = true;
  for (const char* run : {"a", "b"}) {
    cli::FinetuneOptions o;
    o.train = (dir / "train.tsv").string();
    o.test = (dir / "test.tsv").string();
    o.config = (dir / "run.cfg").string();
    o.seed = 7;
    o.out = (dir / run).string();
    cli::run_finetune(o, nullptr);
    for (const char* f : {"metrics.csv", "checkpoint.bin"}) {
      const std::string bytes = slurp(dir / run / f);
      if (first.count(f))
        same = same && first[f] == bytes && !bytes.empty();
      else
        first[f] = bytes;
    }
  }
  fs::remove_all(dir);
  report("determinism", same,
         fmt("metrics.csv %zu bytes, checkpoint.bin %zu bytes, %s", first["metrics.csv"].size(),
             first["checkpoint.bin"].size(), same ? "identical across runs" : "differ"));
}

void real_data() {
  const char* train = std::getenv("KAIROS_REAL_TRAIN");
  const char* test = std::getenv("KAIROS_REAL_TEST");
  if (!train || !test) {
    skip("real-data smoke", "set KAIROS_REAL_TRAIN and KAIROS_REAL_TEST to a local train/test pair");
    return;
  }
  const auto tr = data::load_table(train), te = data::load_table(test);
  const auto ds = data::make_dataset(fs::path(train).stem().string(), tr, te, 256);
  if (ds.meta.train_size > 100 || ds.meta.series_length > 256) {
    report("real-data smoke", false,
           fmt("needs train size <= 100 and length <= 256, got %zu and %zu", ds.meta.train_size, ds.meta.series_length));
    return;
  }
  std::vector<std::size_t> counts(ds.meta.num_classes, 0);
  for (int y : *ds.split.train.labels) ++counts[static_cast<std::size_t>(y)];
  const int majority = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  std::size_t right = 0;
  for (int y : *ds.split.test.labels) right += y == majority;
  const double baseline = static_cast<double>(right) / static_cast<double>(ds.split.test.labels->size());

  const fs::path dir = fs::temp_directory_path() / "kairos_acceptance_real";
  cli::FinetuneOptions o;
  o.train = train;
  o.test = test;
  o.out = dir.string();
  const double acc = cli::run_finetune(o, nullptr).test.accuracy;
  fs::remove_all(dir);
  report("real-data smoke", acc >= baseline + 0.10,
         fmt("%s: accuracy %.3f vs majority baseline %.3f", ds.meta.name.c_str(), acc, baseline));
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, void (*)()>> checks{
      {"gradient integrity", gradient_integrity}, {"revin round trip", revin_round_trip},
      {"masking exactness", masking_exactness},   {"linear cost", linear_cost},
      {"lp freeze", lp_freeze},                   {"causality", causality},
      {"closed-form losses", closed_forms},       {"feature oracles", feature_oracles},
      {"end-to-end learning", end_to_end},        {"determinism", determinism},
      {"real-data smoke", real_data}};
  for (const auto& [name, fn] : checks) {
    try {
      fn();
    } catch (const std::exception& e) {
      report(name, false, std::string("threw: ") + e.what());
    }
  }
  std::cout << (failures ? "FAILED " : "ALL PASSED ") << failures << " failing" << std::endl;
  return failures ? 1 : 0;
}
