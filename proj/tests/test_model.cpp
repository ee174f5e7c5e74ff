#include <filesystem>
#include <set>

#include "catch_amalgamated.hpp"
#include "kairos/model.hpp"

using namespace kairos;
using Catch::Matchers::ContainsSubstring;

namespace {

Config small_config() {
  Config c = desk_preset();
  c.model.seq_len = 32;
  c.model.patch_len = 4;
  c.model.d_model = 8;
  c.model.depth = 2;
  c.model.chunk_size = 3;
  c.model.proj_dim = 4;
  return c;
}

SeriesBatch random_batch(std::size_t B, std::size_t L, Rng& rng) {
  std::vector<double> v(B * L);
  for (auto& x : v) x = rng.normal();
  return {Tensor({B, L}, v), std::vector<std::uint8_t>(B * L, 1), std::nullopt};
}

Model trained_looking(std::uint64_t seed) {
  Model m = Model::init(small_config(), Rng(seed));
  m.attach_head(3, Rng(seed + 1));
  m.scaler = features::FeatureScaler{std::vector<double>(8, 0.5), std::vector<double>(8, 2.0)};
  m.label_values = {-1.0, 4.0, 7.0};
  return m;
}

std::string corrupt_error(const std::string& bytes) {
  try {
    model_from_bytes(bytes);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("parameter naming is stable and unique") {
  const Model m = trained_looking(1);
  std::set<std::string> names;
  for (const auto& [n, t] : m.named_parameters()) CHECK(names.insert(n).second);
  CHECK(names.count("revin.gamma"));
  CHECK(names.count("embed.mask_token"));
  CHECK(names.count("block1.cms.level3.gate"));
  CHECK(names.count("block0.titans.theta_raw"));
  CHECK(names.count("recon.w"));
  CHECK(names.count("proj.w2"));
  CHECK(names.count("head.w"));
  CHECK(m.backbone.pos.shape() == Shape{9, 8});
  CHECK(m.hybrid().w.shape() == Shape{16, 3});
}

TEST_CASE("initialization is a function of the seed") {
  CHECK(parameter_hash(Model::init(small_config(), Rng(3)).named_parameters()) ==
        parameter_hash(Model::init(small_config(), Rng(3)).named_parameters()));
  CHECK(parameter_hash(Model::init(small_config(), Rng(3)).named_parameters()) !=
        parameter_hash(Model::init(small_config(), Rng(4)).named_parameters()));
  Model a = Model::init(small_config(), Rng(3));
  const auto h = parameter_hash(a.named_parameters());
  a.backbone.blocks[1].ffn_b2.mutable_data()[0] = 1e-300;
  CHECK(parameter_hash(a.named_parameters()) != h);
  CHECK_THROWS_AS(Model::init(small_config(), Rng(0)).hybrid(), ContractError);
  CHECK_THROWS_AS(a.attach_head(1, Rng(0)), DataError);
}

TEST_CASE("tokenize shapes and masking") {
  Rng rng(5);
  const Model m = trained_looking(5);
  auto batch = random_batch(3, 32, rng);
  std::fill(batch.valid.begin() + 32 + 10, batch.valid.begin() + 64, 0);
  std::fill(batch.values.mutable_data().begin() + 32 + 10, batch.values.mutable_data().begin() + 64, 0.0);
  const auto plain = tokenize(m, batch);
  CHECK(plain.tokens.shape() == Shape{3, 9, 8});
  CHECK(plain.train_mask.empty());
  CHECK(plain.num_patches == 8);
  const Rng mr(9);
  const auto masked = tokenize(m, batch, &mr, 0.4);
  REQUIRE(masked.train_mask.size() == 24);
  std::size_t per_series[3] = {0, 0, 0};
  for (std::size_t i = 0; i < 24; ++i) {
    per_series[i / 8] += masked.train_mask[i];
    if (masked.train_mask[i]) CHECK(masked.padding_mask[i]);
  }
  CHECK(per_series[0] == 3);
  CHECK(per_series[1] == 1);  // 3 valid patches -> round(1.2)
  CHECK(tokenize(m, batch, &mr, 0.4).tokens.values() == masked.tokens.values());
  CHECK_THROWS_AS(tokenize(m, random_batch(1, 16, rng)), DimensionError);
}

TEST_CASE("checkpoint round trip is bitwise") {
  const Model m = trained_looking(7);
  const std::string bytes = checkpoint_bytes(m);
  CHECK(bytes.substr(0, 8) == "KHOPECKP");
  const Model back = model_from_bytes(bytes);
  CHECK(checkpoint_bytes(back) == bytes);
  CHECK(parameter_hash(back.named_parameters()) == parameter_hash(m.named_parameters()));
  CHECK(back.label_values == m.label_values);
  REQUIRE(back.scaler);
  CHECK(back.scaler->stddev == m.scaler->stddev);
  CHECK(serialize_config(back.config) == serialize_config(m.config));

  const Model bare = Model::init(small_config(), Rng(8));
  const Model bare_back = model_from_bytes(checkpoint_bytes(bare));
  CHECK_FALSE(bare_back.head);
  CHECK_FALSE(bare_back.scaler);
  CHECK(checkpoint_bytes(bare_back) == checkpoint_bytes(bare));

  const auto path = std::filesystem::temp_directory_path() / "kairos_model_test.bin";
  save_checkpoint(m, path.string());
  CHECK(checkpoint_bytes(load_checkpoint(path.string())) == bytes);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path.string()), DataError);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const std::string bytes = checkpoint_bytes(trained_looking(9));
  CHECK_THAT(corrupt_error("XXXXXXXX" + bytes.substr(8)), ContainsSubstring("magic"));
  std::string v = bytes;
  v[8] = 2;
  CHECK_THAT(corrupt_error(v), ContainsSubstring("version"));
  CHECK_THAT(corrupt_error(bytes.substr(0, bytes.size() - 3)), ContainsSubstring("truncated"));
  CHECK_THAT(corrupt_error(bytes + "x"), ContainsSubstring("trailing"));
  CHECK_THAT(corrupt_error(bytes.substr(0, 20)), ContainsSubstring("truncated"));

  const Model no_head = Model::init(small_config(), Rng(9));

  // a record whose shape disagrees with the configuration
  Model wide = trained_looking(9);
  wide.config.model.d_model = 12;
  CHECK_THAT(corrupt_error(checkpoint_bytes(wide)), ContainsSubstring("shape"));

  // an extra record the model does not know
  Model extra = trained_looking(9);
  std::string e = checkpoint_bytes(extra);
  const std::size_t count_pos = 8 + 4 + 4 + serialize_config(extra.config).size();
  e[count_pos] = static_cast<char>(e[count_pos] + 1);
  detail::put_record(e, "mystery", {1}, std::vector<double>{1.0});
  CHECK_THAT(corrupt_error(e), ContainsSubstring("mystery"));

  // a repeated record
  std::string r = checkpoint_bytes(extra);
  r[count_pos] = static_cast<char>(r[count_pos] + 1);
  detail::put_record(r, "labels.values", {3}, std::vector<double>{1, 2, 3});
  CHECK_THAT(corrupt_error(r), ContainsSubstring("repeats"));

  // a missing parameter: claim one record fewer and cut the final one
  std::string cut = checkpoint_bytes(no_head);
  const auto last = no_head.named_parameters().back();
  const std::size_t rec = 4 + last.first.size() + 4 + 8 * last.second.rank() + 8 * last.second.size();
  cut.resize(cut.size() - rec);
  cut[count_pos] = static_cast<char>(cut[count_pos] - 1);
  CHECK_THAT(corrupt_error(cut), ContainsSubstring("lacks record '" + last.first + "'"));
}
