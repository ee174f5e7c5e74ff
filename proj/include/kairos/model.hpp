#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kairos/config.hpp"
#include "kairos/heads.hpp"
#include "kairos/hope.hpp"
#include "kairos/preprocess.hpp"
#include "kairos/statfeatures.hpp"

namespace kairos {

/// Everything between a raw series and its CLS / patch states.
struct Backbone {
  Tensor revin_gamma, revin_beta;  // scalars
  Tensor embed;                    // [P x D]
  Tensor pos;                      // [(N+1) x D]
  Tensor cls;                      // [D]
  Tensor mask_token;               // [D]
  std::vector<HopeBlockParams> blocks;

  static Backbone init(const ModelConfig& c, Rng& rng) {
    Backbone bb;
    const std::size_t D = c.d_model;
    bb.revin_gamma = Tensor::full({1}, 1.0, true);
    bb.revin_beta = Tensor::zeros({1}, true);
    bb.embed = randn({c.patch_len, D}, rng, 1.0 / std::sqrt(static_cast<double>(c.patch_len)), true);
    bb.pos = randn({c.num_patches() + 1, D}, rng, c.init_std, true);
    bb.cls = randn({D}, rng, c.init_std, true);
    bb.mask_token = randn({D}, rng, c.init_std, true);
    for (std::size_t l = 0; l < c.depth; ++l)
      bb.blocks.push_back(HopeBlockParams::init(D, c.cms_levels, c.chunk_size, c.ffn_mult, c.dropout, rng));
    return bb;
  }

  NamedTensors named() const {
    NamedTensors out{{"revin.gamma", revin_gamma}, {"revin.beta", revin_beta}, {"embed.w", embed},
                     {"embed.pos", pos},           {"embed.cls", cls},         {"embed.mask_token", mask_token}};
    for (std::size_t l = 0; l < blocks.size(); ++l)
      for (auto& e : blocks[l].named("block" + std::to_string(l) + ".")) out.push_back(e);
    return out;
  }
};

struct Model {
  Config config;
  Backbone backbone;
  ReconHead recon;
  ProjHead proj;
  std::optional<HybridHead> head;
  std::optional<features::FeatureScaler> scaler;
  std::vector<double> label_values;  // class index -> original label

  /// Pretraining parameters are drawn from rng.split("backbone") / ("recon") / ("proj").
  static Model init(const Config& cfg, const Rng& rng) {
    validate(cfg);
    Model m;
    m.config = cfg;
    Rng r1 = rng.split("backbone"), r2 = rng.split("recon"), r3 = rng.split("proj");
    m.backbone = Backbone::init(cfg.model, r1);
    m.recon = ReconHead::init(cfg.model.d_model, cfg.model.patch_len, r2);
    m.proj = ProjHead::init(cfg.model.d_model, cfg.model.proj_dim, r3);
    return m;
  }

  void attach_head(std::size_t num_classes, const Rng& rng) {
    if (num_classes < 2) throw DataError("classification needs at least 2 classes");
    Rng r = rng.split("head");
    head = HybridHead::init(config.model.d_model, config.model.num_features, num_classes, config.model.head_dropout,
                            r, config.model.init_std);
  }

  const HybridHead& hybrid() const {
    if (!head) throw ContractError("model has no classification head");
    return *head;
  }

  NamedTensors head_named() const { return head ? head->named("head.") : NamedTensors{}; }

  NamedTensors named_parameters() const {
    NamedTensors out = backbone.named();
    for (auto& e : recon.named("recon.")) out.push_back(e);
    for (auto& e : proj.named("proj.")) out.push_back(e);
    for (auto& e : head_named()) out.push_back(e);
    return out;
  }
};

inline std::vector<Tensor> tensors_of(const NamedTensors& named) {
  std::vector<Tensor> out;
  out.reserve(named.size());
  for (const auto& [_, t] : named) out.push_back(t);
  return out;
}

/// FNV-1a over the names, shapes and raw bytes of every tensor.
inline std::uint64_t parameter_hash(const NamedTensors& named) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : named) {
    mix(name.data(), name.size());
    for (std::size_t d : t.shape()) mix(&d, sizeof d);
    mix(t.values().data(), t.size() * sizeof(double));
  }
  return h;
}

/// RevIN -> patchify -> (optional masking) -> embedding. When `mask_rng` is
/// given, round(mask_ratio * valid) patches per series are replaced by the
/// mask token.
inline PatchedBatch tokenize(const Model& m, const SeriesBatch& batch, const Rng* mask_rng = nullptr,
                             double mask_ratio = 0.0) {
  const auto& mc = m.config.model;
  if (batch.length() != mc.seq_len)
    throw DimensionError("tokenize: series length " + std::to_string(batch.length()) + " but model expects " +
                         std::to_string(mc.seq_len));
  const auto& bb = m.backbone;
  RevinResult rv = revin_normalize(batch, bb.revin_gamma, bb.revin_beta, mc.revin_eps);
  Patches raw = patchify(rv.normalized, mc.patch_len);
  Patches tgt = patchify(SeriesBatch{rv.standardized, batch.valid, std::nullopt}, mc.patch_len);
  std::vector<std::uint8_t> train_mask;
  if (mask_rng) {
    train_mask = sample_train_mask(raw.padding_mask, raw.num_patches, mask_ratio, *mask_rng);
    if (std::find(train_mask.begin(), train_mask.end(), std::uint8_t{1}) == train_mask.end()) train_mask.clear();
  }
  Tensor tokens = embed_and_position(raw.patches, bb.embed, bb.pos, bb.cls, bb.mask_token, train_mask);
  return {tokens, raw.padding_mask, std::move(train_mask), std::move(rv.stats), raw.patches, tgt.patches,
          raw.num_patches};
}

/// Standardized statistical features, or an undefined tensor when K = 0.
inline Tensor scaled_features(const Model& m, const Tensor& raw_features) {
  if (m.config.model.num_features == 0) return {};
  if (!m.scaler) throw ContractError("feature scaler has not been fitted");
  return m.scaler->apply(raw_features);
}

inline Tensor raw_features_of(const Model& m, const SeriesBatch& batch) {
  if (m.config.model.num_features == 0) return {};
  return features::extract(batch);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers little-endian):
//   8 bytes   magic "KHOPECKP"
//   u32       version (1)
//   u32 n     + n bytes   config text (`key = value` lines)
//   u32       record count
//   records:  u32 name length, name bytes, u32 rank, rank x u64 dims,
//             numel x f64 (IEEE-754 bits, little-endian), row-major
// Besides the parameters, records named "features.mean", "features.std" and
// "labels.values" carry the feature scaler and the label mapping.

inline constexpr char kCheckpointMagic[8] = {'K', 'H', 'O', 'P', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (buf.size() - pos < n) throw DataError("checkpoint is truncated");
  }
  std::uint64_t u(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)])) << (8 * i);
    pos += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

inline void put_record(std::string& out, const std::string& name, const Shape& shape, std::span<const double> data) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) put_u64(out, d);
  for (double v : data) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

}  // namespace detail

inline std::string checkpoint_bytes(const Model& m) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  const std::string cfg = serialize_config(m.config);
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  auto named = m.named_parameters();
  const std::size_t extra = (m.scaler ? 2 : 0) + (m.label_values.empty() ? 0 : 1);
  detail::put_u32(out, static_cast<std::uint32_t>(named.size() + extra));
  for (const auto& [name, t] : named) detail::put_record(out, name, t.shape(), t.data());
  if (m.scaler) {
    detail::put_record(out, "features.mean", {m.scaler->mean.size()}, m.scaler->mean);
    detail::put_record(out, "features.std", {m.scaler->stddev.size()}, m.scaler->stddev);
  }
  if (!m.label_values.empty()) detail::put_record(out, "labels.values", {m.label_values.size()}, m.label_values);
  return out;
}

inline Model model_from_bytes(const std::string& buf) {
  detail::Reader r{buf};
  if (r.str(8) != std::string(kCheckpointMagic, 8)) throw DataError("not a checkpoint (bad magic)");
  if (const auto v = r.u(4); v != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(v));
  std::istringstream cfg_text(r.str(static_cast<std::size_t>(r.u(4))));
  const Config cfg = parse_config(cfg_text);

  std::map<std::string, std::pair<Shape, std::vector<double>>> records;
  const auto count = r.u(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str(static_cast<std::size_t>(r.u(4)));
    Shape shape(static_cast<std::size_t>(r.u(4)));
    for (auto& d : shape) d = static_cast<std::size_t>(r.u(8));
    std::vector<double> data(numel(shape));
    r.need(data.size() * 8);
    for (auto& v : data) v = std::bit_cast<double>(r.u(8));
    if (!records.emplace(name, std::pair{shape, std::move(data)}).second)
      throw DataError("checkpoint repeats record '" + name + "'");
  }
  if (r.pos != buf.size()) throw DataError("checkpoint has trailing bytes");

  Model m = Model::init(cfg, Rng(0));
  if (auto it = records.find("head.w"); it != records.end()) {
    if (it->second.first.size() != 2) throw DataError("checkpoint head.w must be a matrix");
    m.attach_head(it->second.first[1], Rng(0));
  }
  auto take = [&](const std::string& name) {
    auto it = records.find(name);
    if (it == records.end()) throw DataError("checkpoint lacks record '" + name + "'");
    auto rec = std::move(it->second);
    records.erase(it);
    return rec;
  };
  for (auto& [name, t] : m.named_parameters()) {
    auto [shape, data] = take(name);
    if (shape != t.shape())
      throw DataError("checkpoint record '" + name + "' has shape " + to_string(shape) + ", model expects " +
                      to_string(t.shape()));
    std::copy(data.begin(), data.end(), t.mutable_data().begin());
  }
  if (records.count("features.mean")) {
    features::FeatureScaler s;
    s.mean = take("features.mean").second;
    s.stddev = take("features.std").second;
    m.scaler = std::move(s);
  }
  if (records.count("labels.values")) m.label_values = take("labels.values").second;
  if (!records.empty()) throw DataError("checkpoint has unknown record '" + records.begin()->first + "'");
  return m;
}

inline void save_checkpoint(const Model& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  const std::string bytes = checkpoint_bytes(m);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return model_from_bytes(ss.str());
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

}  // namespace kairos
