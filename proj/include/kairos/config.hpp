#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <variant>

#include "kairos/errors.hpp"

namespace kairos {

struct ModelConfig {
  std::size_t seq_len = 256;
  std::size_t patch_len = 8;
  std::size_t d_model = 128;
  std::size_t depth = 5;
  std::size_t cms_levels = 4;
  std::size_t chunk_size = 8;
  std::size_t ffn_mult = 4;
  std::size_t proj_dim = 64;
  std::size_t num_features = 8;  // K; 0 turns the head into a CLS-only probe
  double dropout = 0.1;
  double head_dropout = 0.4;
  double revin_eps = 1e-5;
  double init_std = 0.02;

  std::size_t num_patches() const { return seq_len / patch_len; }
};

struct PretrainConfig {
  std::size_t epochs = 50;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  std::size_t batch = 128;
};

struct LinearProbeConfig {
  std::size_t epochs = 15;
  double lr = 1e-3;
  double weight_decay = 1e-3;
};

struct FineTuneConfig {
  std::size_t epochs = 30;
  double lr_backbone = 1e-5;
  double lr_head = 1e-4;
  double eta_min = 1e-6;
  double weight_decay = 1e-4;
  std::size_t batch = 16;
};

struct TrainConfig {
  PretrainConfig pretrain;
  LinearProbeConfig lp;
  FineTuneConfig ft;
  double label_smoothing = 0.1;
  double mask_ratio = 0.4;
  double tau = 0.1;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double grad_clip = 1.0;  // global norm; 0 disables
  std::uint64_t seed = 0;
};

struct Config {
  ModelConfig model;
  TrainConfig train;
};

/// Full-scale network and training setup.
inline Config paper_preset() { return {}; }

/// Desk-scale preset: a narrower, shallower encoder and a short pretraining
/// run; fine-tuning hyperparameters are unchanged.
inline Config desk_preset() {
  Config c;
  c.model.d_model = 32;
  c.model.depth = 2;
  c.train.pretrain.epochs = 5;
  c.train.pretrain.batch = 32;
  return c;
}

namespace detail {

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "seed is stored as a size field");
using FieldRef = std::variant<std::size_t*, double*>;

inline std::map<std::string, FieldRef> config_fields(Config& c) {
  auto& m = c.model;
  auto& t = c.train;
  return {
      {"model.seq_len", &m.seq_len},
      {"model.patch_len", &m.patch_len},
      {"model.d_model", &m.d_model},
      {"model.depth", &m.depth},
      {"model.cms_levels", &m.cms_levels},
      {"model.chunk_size", &m.chunk_size},
      {"model.ffn_mult", &m.ffn_mult},
      {"model.proj_dim", &m.proj_dim},
      {"model.num_features", &m.num_features},
      {"model.dropout", &m.dropout},
      {"model.head_dropout", &m.head_dropout},
      {"model.revin_eps", &m.revin_eps},
      {"model.init_std", &m.init_std},
      {"pretrain.epochs", &t.pretrain.epochs},
      {"pretrain.lr", &t.pretrain.lr},
      {"pretrain.weight_decay", &t.pretrain.weight_decay},
      {"pretrain.batch", &t.pretrain.batch},
      {"lp.epochs", &t.lp.epochs},
      {"lp.lr", &t.lp.lr},
      {"lp.weight_decay", &t.lp.weight_decay},
      {"ft.epochs", &t.ft.epochs},
      {"ft.lr_backbone", &t.ft.lr_backbone},
      {"ft.lr_head", &t.ft.lr_head},
      {"ft.eta_min", &t.ft.eta_min},
      {"ft.weight_decay", &t.ft.weight_decay},
      {"ft.batch", &t.ft.batch},
      {"label_smoothing", &t.label_smoothing},
      {"mask_ratio", &t.mask_ratio},
      {"tau", &t.tau},
      {"lambda1", &t.lambda1},
      {"lambda2", &t.lambda2},
      {"grad_clip", &t.grad_clip},
      {"seed", &t.seed},
  };
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

/// Sets one field by its dotted name.
inline void set_config_value(Config& c, const std::string& key, const std::string& value) {
  auto fields = detail::config_fields(c);
  auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  std::visit(
      [&](auto* field) {
        using T = std::remove_pointer_t<decltype(field)>;
        T parsed{};
        const char* first = value.data();
        const char* last = value.data() + value.size();
        const auto res = std::from_chars(first, last, parsed);
        if (res.ec != std::errc() || res.ptr != last)
          throw ConfigError("config key '" + key + "' has invalid value '" + value + "'");
        *field = parsed;
      },
      it->second);
}

/// Checks the cross-field invariants of a configuration.
inline void validate(const Config& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  if (m.patch_len == 0 || m.seq_len < m.patch_len) throw ConfigError("seq_len must be at least patch_len");
  if (m.d_model == 0 || m.cms_levels == 0 || m.chunk_size == 0 || m.ffn_mult == 0 || m.proj_dim == 0)
    throw ConfigError("model sizes must be positive");
  if (m.dropout < 0.0 || m.dropout >= 1.0 || m.head_dropout < 0.0 || m.head_dropout >= 1.0)
    throw ConfigError("dropout probabilities must lie in [0, 1)");
  if (m.num_features != 0 && m.num_features != 8) throw ConfigError("num_features must be 8 (or 0 to disable)");
  if (!(m.revin_eps > 0.0)) throw ConfigError("revin_eps must be positive");
  for (double lr : {t.pretrain.lr, t.lp.lr, t.ft.lr_backbone, t.ft.lr_head, t.ft.eta_min})
    if (!(lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (t.ft.eta_min > t.ft.lr_backbone || t.ft.eta_min > t.ft.lr_head)
    throw ConfigError("ft.eta_min must not exceed the fine-tuning learning rates");
  if (t.pretrain.batch < 2) throw ConfigError("pretrain.batch must be at least 2 (contrastive negatives)");
  if (t.ft.batch == 0) throw ConfigError("ft.batch must be positive");
  if (t.mask_ratio < 0.0 || t.mask_ratio >= 1.0) throw ConfigError("mask_ratio must lie in [0, 1)");
  if (!(t.tau > 0.0)) throw ConfigError("tau must be positive");
  if (t.lambda1 < 0.0 || t.lambda2 < 0.0 || (t.lambda1 == 0.0 && t.lambda2 == 0.0))
    throw ConfigError("lambda1/lambda2 must be non-negative and not both zero");
  if (t.label_smoothing < 0.0 || t.label_smoothing > 1.0) throw ConfigError("label_smoothing must lie in [0, 1]");
  if (t.grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
}

/// Parses `key = value` lines. `#` starts a comment. A `preset = paper|desk`
/// line resets every field to that preset; later lines override it.
inline Config parse_config(std::istream& in, Config base = desk_preset()) {
  Config c = base;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    if (key == "preset") {
      if (value == "paper") {
        c = paper_preset();
      } else if (value == "desk") {
        c = desk_preset();
      } else {
        throw ConfigError("unknown preset '" + value + "'");
      }
      continue;
    }
    set_config_value(c, key, value);
  }
  validate(c);
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in);
}

/// Every field as `key = value`, one per line, in key order.
inline std::string serialize_config(const Config& c) {
  Config copy = c;
  std::ostringstream os;
  for (auto& [key, ref] : detail::config_fields(copy)) {
    os << key << " = ";
    std::visit(
        [&](auto* field) {
          if constexpr (std::is_same_v<std::remove_pointer_t<decltype(field)>, double>) {
            os << detail::format_double(*field);
          } else {
            os << *field;
          }
        },
        ref);
    os << '\n';
  }
  return os.str();
}

}  // namespace kairos
