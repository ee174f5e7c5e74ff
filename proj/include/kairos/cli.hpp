#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kairos/data.hpp"
#include "kairos/diagnostics.hpp"
#include "kairos/model.hpp"
#include "kairos/trainer.hpp"
#include "quadratic_attention.hpp"

namespace kairos::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum ExitCode : int { kOk = 0, kContract = 1, kConfig = 2, kData = 3, kDivergence = 4 };

inline constexpr std::string_view kToolVersion = "kairos 1.0";

/// FNV-1a 64 of a file's bytes, as 16 hex digits.
inline std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot hash '" + p.string() + "'");
  std::uint64_t h = 1469598103934665603ULL;
  char buf[1 << 14];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// Everything needed to re-run a command: config snapshot, seed, inputs and
/// outputs with their hashes.
struct RunManifest {
  std::string command;
  Config config;
  std::uint64_t seed = 0;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;

  json to_json() const {
    json j;
    j["tool"] = kToolVersion;
    j["command"] = command;
    j["seed"] = seed;
    json cfg = json::object();
    std::istringstream lines(serialize_config(config));
    std::string line;
    while (std::getline(lines, line)) {
      const auto eq = line.find(" = ");
      cfg[line.substr(0, eq)] = line.substr(eq + 3);
    }
    j["config"] = cfg;
    j["inputs"] = json::array();
    for (const auto& p : inputs) j["inputs"].push_back({{"path", p.string()}, {"fnv1a64", file_hash(p)}});
    j["outputs"] = json::array();
    for (const auto& p : outputs) j["outputs"].push_back({{"path", p.string()}, {"fnv1a64", file_hash(p)}});
    return j;
  }

  void write(const fs::path& dir) const {
    std::ofstream out(dir / "manifest.json");
    out << to_json().dump(2) << '\n';
  }
};

/// Config from an optional file, with the seed flag taking precedence.
inline Config resolve_config(const std::optional<std::string>& path, std::optional<std::uint64_t> seed,
                             Config base = desk_preset()) {
  Config c = base;
  if (path) {
    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot open config file '" + *path + "'");
    c = parse_config(in, base);
  }
  if (seed) c.train.seed = *seed;
  validate(c);
  return c;
}

inline fs::path prepare_out(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw ConfigError("cannot create output directory '" + dir + "': " + ec.message());
  return p;
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << text;
}

inline std::string log_text(const MetricsLog& log) {
  std::ostringstream os;
  write_log(os, log);
  return os.str();
}

/// Series of one or more label-first files, aligned to L (labels dropped).
inline SeriesBatch load_corpus(const std::vector<std::string>& paths, std::size_t L) {
  std::vector<double> values;
  std::vector<std::uint8_t> valid;
  std::size_t n = 0;
  for (const auto& p : paths) {
    const auto table = data::load_table(p);
    const auto labels = data::label_values_of(table);
    const auto batch = data::to_batch(table, L, labels);
    values.insert(values.end(), batch.values.values().begin(), batch.values.values().end());
    valid.insert(valid.end(), batch.valid.begin(), batch.valid.end());
    n += batch.batch_size();
  }
  if (n == 0) throw DataError("pretraining corpus is empty");
  return {Tensor({n, L}, std::move(values)), std::move(valid), std::nullopt};
}

inline std::string per_class_report(const Metrics& m, const std::vector<double>& label_values) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "accuracy %.6f\nmacro_f1 %.6f\n", m.accuracy, m.macro_f1);
  os << buf << "class,label,precision,recall,f1,support\n";
  for (const auto& c : m.per_class) {
    const double lab = static_cast<std::size_t>(c.cls) < label_values.size()
                           ? label_values[static_cast<std::size_t>(c.cls)]
                           : static_cast<double>(c.cls);
    std::snprintf(buf, sizeof buf, "%d,%g,%.6f,%.6f,%.6f,%zu\n", c.cls, lab, c.precision, c.recall, c.f1,
                  c.support);
    os << buf;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Commands

struct PretrainOptions {
  std::vector<std::string> corpus;
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

inline int cmd_pretrain(const PretrainOptions& o, std::ostream* progress = &std::cerr) {
  if (o.corpus.empty()) throw ConfigError("--corpus is required");
  const Config cfg = resolve_config(o.config, o.seed);
  const fs::path out = prepare_out(o.out);
  const SeriesBatch corpus = load_corpus(o.corpus, cfg.model.seq_len);
  const Rng root(cfg.train.seed);
  Model m = Model::init(cfg, root.split("model"));
  const MetricsLog log = pretrain(m, corpus, cfg.train, root.split("pretrain"), progress);
  save_checkpoint(m, (out / "checkpoint.bin").string());
  write_text(out / "metrics.csv", log_text(log));
  RunManifest man{"pretrain", cfg, cfg.train.seed, {}, {out / "checkpoint.bin", out / "metrics.csv"}};
  for (const auto& p : o.corpus) man.inputs.emplace_back(p);
  man.write(out);
  return kOk;
}

struct FinetuneOptions {
  std::string train, test;
  std::optional<std::string> checkpoint;
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

struct FinetuneResult {
  Metrics test;
  MetricsLog log;
};

/// LP then FT on the training file, evaluated on the test file. Without a
/// checkpoint the encoder starts from its initialization.
inline FinetuneResult run_finetune(const FinetuneOptions& o, std::ostream* progress = &std::cerr) {
  if (o.train.empty()) throw ConfigError("--train is required");
  if (o.test.empty()) throw ConfigError("--test is required");
  std::optional<Model> loaded;
  Config base = desk_preset();
  if (o.checkpoint) {
    loaded = load_checkpoint(*o.checkpoint);
    base = loaded->config;
  }
  Config cfg = resolve_config(o.config, o.seed, base);
  if (loaded && serialize_config({cfg.model, {}}) != serialize_config({loaded->config.model, {}}))
    throw ConfigError("model settings differ from the checkpoint's");
  const fs::path out = prepare_out(o.out);
  const data::Dataset ds = data::make_dataset(fs::path(o.train).stem().string(), data::load_table(o.train),
                                              data::load_table(o.test), cfg.model.seq_len);
  const Rng root(cfg.train.seed);
  Model m = loaded ? std::move(*loaded) : Model::init(cfg, root.split("model"));
  m.config.train = cfg.train;
  m.head.reset();
  m.label_values = ds.label_values;
  FinetuneResult r;
  r.log = finetune(m, ds.split.train, ds.meta.num_classes, cfg.train, root.split("finetune"), progress);
  r.test = evaluate(m, ds.split.test);
  r.log.push_back({"test", 0, std::nullopt, std::nullopt, 0.0, r.test.accuracy, r.test.macro_f1});
  r.log.back().total = ce_label_smooth(predict_logits(m, ds.split.test), *ds.split.test.labels, 0.0).item();

  save_checkpoint(m, (out / "checkpoint.bin").string());
  write_text(out / "metrics.csv", log_text(r.log));
  write_text(out / "eval.txt", per_class_report(r.test, ds.label_values));
  RunManifest man{"finetune", cfg, cfg.train.seed, {o.train, o.test},
                  {out / "checkpoint.bin", out / "metrics.csv", out / "eval.txt"}};
  if (o.checkpoint) man.inputs.emplace_back(*o.checkpoint);
  man.write(out);
  return r;
}

inline int cmd_finetune(const FinetuneOptions& o, std::ostream& report = std::cout) {
  const auto r = run_finetune(o);
  report << "accuracy " << r.test.accuracy << " macro_f1 " << r.test.macro_f1 << '\n';
  return kOk;
}

struct EvalOptions {
  std::string test, checkpoint;
  std::optional<std::string> out;
};

inline int cmd_eval(const EvalOptions& o, std::ostream& report = std::cout) {
  if (o.test.empty() || o.checkpoint.empty()) throw ConfigError("--test and --checkpoint are required");
  const Model m = load_checkpoint(o.checkpoint);
  if (!m.head || m.label_values.empty()) throw DataError("checkpoint has no classification head");
  const auto table = data::load_table(o.test);
  const SeriesBatch test = data::to_batch(table, m.config.model.seq_len, m.label_values);
  const Metrics mt = evaluate(m, test);
  const std::string text = per_class_report(mt, m.label_values);
  report << text;
  if (o.out) {
    const fs::path out = prepare_out(*o.out);
    write_text(out / "eval.txt", text);
    RunManifest{"eval", m.config, m.config.train.seed, {o.test, o.checkpoint}, {out / "eval.txt"}}.write(out);
  }
  return kOk;
}

struct FeaturesOptions {
  std::string data;
  std::string out;
};

inline int cmd_features(const FeaturesOptions& o) {
  if (o.data.empty() || o.out.empty()) throw ConfigError("--data and --out are required");
  const auto table = data::load_table(o.data);
  std::ofstream out(o.out);
  if (!out) throw DataError("cannot write '" + o.out + "'");
  out << "label";
  for (auto n : features::kNames) out << ',' << n;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto f = features::feature_vector(std::span<const double>(table.rows[i].data(), table.native_length(i)));
    std::snprintf(buf, sizeof buf, "%g", table.labels[i]);
    out << buf;
    for (double v : f) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << ',' << buf;
    }
    out << '\n';
  }
  out.close();
  const fs::path dir = fs::path(o.out).parent_path().empty() ? fs::path(".") : fs::path(o.out).parent_path();
  RunManifest{"features", desk_preset(), 0, {o.data}, {o.out}}.write(dir);
  return kOk;
}

struct GradcheckOptions {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  double tol = 1e-4;
  std::optional<std::string> out;
};

inline int cmd_gradcheck(const GradcheckOptions& o, std::ostream& report = std::cout) {
  const Config cfg = resolve_config(o.config, o.seed, diag::gradcheck_config());
  const auto r = diag::run_gradcheck(cfg, cfg.train.seed, o.tol);
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "gradient check on %zu x %zu x %zu, tol %.1e\n", r.batch, r.tokens, r.width, o.tol);
  os << buf;
  for (const auto& g : r.groups) {
    std::snprintf(buf, sizeof buf, "%-12s %6zu elements  max rel err %.3e  %s\n", g.group.c_str(), g.elements,
                  g.max_rel_error, g.passed ? "PASS" : "FAIL");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "overall %s (max rel err %.3e, %.1f s)\n", r.passed ? "PASS" : "FAIL",
                r.max_rel_error, r.seconds);
  os << buf;
  report << os.str();
  if (o.out) {
    const fs::path out = prepare_out(*o.out);
    write_text(out / "gradcheck.txt", os.str());
    RunManifest{"gradcheck", cfg, cfg.train.seed, {}, {out / "gradcheck.txt"}}.write(out);
  }
  return r.passed ? kOk : kContract;
}

struct BenchOptions {
  std::vector<std::size_t> lengths{32, 64, 128, 256};
  std::size_t runs = 20;
  std::size_t batch = 4;
  std::optional<std::string> config;
  std::optional<std::string> out;
};

struct BenchTable {
  std::vector<diag::BenchRow> hope, quadratic;
};

inline BenchTable run_bench(const BenchOptions& o, const ModelConfig& mc) {
  if (o.lengths.empty()) throw ConfigError("--lengths must name at least one length");
  BenchTable t;
  t.hope = diag::bench_encoder(mc, o.lengths, o.batch, o.runs);
  Rng rng(1);
  std::vector<Tensor> inputs;
  for (std::size_t T : o.lengths) inputs.push_back(randn({o.batch, T, mc.d_model}, rng));
  std::vector<std::function<void()>> fns;
  for (const Tensor& x : inputs) fns.emplace_back([&x] { bench::quadratic_attention(x); });
  t.quadratic = diag::time_forwards(o.lengths, o.runs, fns);
  return t;
}

inline std::string bench_text(const BenchTable& t) {
  std::ostringstream os;
  os << "length,hope_seconds,hope_flops,hope_ratio,quadratic_seconds,quadratic_flops,quadratic_ratio\n";
  char buf[200];
  for (std::size_t i = 0; i < t.hope.size(); ++i) {
    const double hr = i ? t.hope[i].median_seconds / t.hope[i - 1].median_seconds : 0.0;
    const double qr = i ? t.quadratic[i].median_seconds / t.quadratic[i - 1].median_seconds : 0.0;
    std::snprintf(buf, sizeof buf, "%zu,%.6e,%llu,%.3f,%.6e,%llu,%.3f\n", t.hope[i].length, t.hope[i].median_seconds,
                  static_cast<unsigned long long>(t.hope[i].flops), hr, t.quadratic[i].median_seconds,
                  static_cast<unsigned long long>(t.quadratic[i].flops), qr);
    os << buf;
  }
  return os.str();
}

inline int cmd_bench(const BenchOptions& o, std::ostream& report = std::cout) {
  const Config cfg = resolve_config(o.config, std::nullopt);
  const std::string text = bench_text(run_bench(o, cfg.model));
  report << text;
  if (o.out) {
    const fs::path out = prepare_out(*o.out);
    write_text(out / "bench.csv", text);
    RunManifest{"bench", cfg, 0, {}, {out / "bench.csv"}}.write(out);
  }
  return kOk;
}

struct ManifestOptions {
  std::vector<std::string> train_files;
  std::string out;
};

/// Dataset manifest for `<name>_TRAIN.*` files; the matching `_TEST` file is
/// looked up next to each.
inline int cmd_manifest(const ManifestOptions& o) {
  if (o.train_files.empty() || o.out.empty()) throw ConfigError("--data and --out are required");
  std::ostringstream os;
  os << data::kManifestHeader << '\n';
  std::vector<fs::path> inputs;
  for (const auto& f : o.train_files) {
    const fs::path train(f);
    std::string stem = train.stem().string();
    const auto pos = stem.rfind("_TRAIN");
    if (pos == std::string::npos) throw DataError("'" + f + "' is not a *_TRAIN file");
    const std::string name = stem.substr(0, pos);
    const fs::path test = train.parent_path() / (name + "_TEST" + train.extension().string());
    const auto tr = data::load_table(train.string());
    const auto te = data::load_table(test.string());
    const auto ds = data::make_dataset(name, tr, te, 256);
    os << data::manifest_row(ds.meta) << '\n';
    inputs.push_back(train);
    inputs.push_back(test);
  }
  write_text(o.out, os.str());
  const fs::path dir = fs::path(o.out).parent_path().empty() ? fs::path(".") : fs::path(o.out).parent_path();
  RunManifest{"manifest", desk_preset(), 0, inputs, {o.out}}.write(dir);
  return kOk;
}

struct SynthOptions {
  std::vector<std::string> kinds{"sine", "ar1"};
  std::size_t n = 64;
  std::size_t length = 256;
  std::uint64_t seed = 0;
  std::string out;
};

inline int cmd_synth(const SynthOptions& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  std::vector<data::SynthKind> kinds;
  for (const auto& k : o.kinds) kinds.push_back(data::parse_kind(k));
  const SeriesBatch b = data::synth_corpus(kinds, o.n, o.length, Rng(o.seed));
  std::ofstream out(o.out);
  if (!out) throw DataError("cannot write '" + o.out + "'");
  data::write_table(out, b);
  return kOk;
}

/// Runs `fn`, mapping failures to exit codes with a one-line diagnostic.
template <class Fn>
int guarded(Fn&& fn, std::ostream& err = std::cerr) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << '\n';
    return kDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kContract;
  }
}

}  // namespace kairos::cli
