#include <sstream>

#include "catch_amalgamated.hpp"
#include "kairos/config.hpp"

using namespace kairos;

namespace {

Config parse(const std::string& s) {
  std::istringstream in(s);
  return parse_config(in);
}

}  // namespace

TEST_CASE("full-scale preset hyperparameters") {
  const Config c = paper_preset();
  CHECK(c.model.seq_len == 256);
  CHECK(c.model.patch_len == 8);
  CHECK(c.model.num_patches() == 32);
  CHECK(c.model.d_model == 128);
  CHECK(c.model.depth == 5);
  CHECK(c.model.cms_levels == 4);
  CHECK(c.model.dropout == 0.1);
  CHECK(c.model.head_dropout == 0.4);
  CHECK(c.train.pretrain.epochs == 50);
  CHECK(c.train.pretrain.lr == 1e-4);
  CHECK(c.train.pretrain.weight_decay == 1e-4);
  CHECK(c.train.pretrain.batch == 128);
  CHECK(c.train.lp.epochs == 15);
  CHECK(c.train.lp.lr == 1e-3);
  CHECK(c.train.lp.weight_decay == 1e-3);
  CHECK(c.train.ft.epochs == 30);
  CHECK(c.train.ft.lr_backbone == 1e-5);
  CHECK(c.train.ft.lr_head == 1e-4);
  CHECK(c.train.ft.eta_min == 1e-6);
  CHECK(c.train.ft.batch == 16);
  CHECK(c.train.label_smoothing == 0.1);
  CHECK(c.train.mask_ratio == 0.4);
  CHECK(c.train.tau == 0.1);
  validate(c);
  validate(desk_preset());
}

TEST_CASE("config lines override the desk preset") {
  const Config c = parse("# comment\nmodel.d_model = 16\n\n  lp.lr=0.5e-2  # trailing\nseed = 12345678901234\n");
  CHECK(c.model.d_model == 16);
  CHECK(c.train.lp.lr == 0.005);
  CHECK(c.train.seed == 12345678901234ULL);
  CHECK(c.model.depth == desk_preset().model.depth);
  const Config p = parse("preset = paper\nft.epochs = 3\n");
  CHECK(p.model.d_model == 128);
  CHECK(p.train.ft.epochs == 3);
}

TEST_CASE("bad config input is a configuration error") {
  CHECK_THROWS_AS(parse("model.width = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse("model.depth = -1\n"), ConfigError);
  CHECK_THROWS_AS(parse("model.depth = 2.5\n"), ConfigError);
  CHECK_THROWS_AS(parse("lp.lr = fast\n"), ConfigError);
  CHECK_THROWS_AS(parse("just words\n"), ConfigError);
  CHECK_THROWS_AS(parse("preset = huge\n"), ConfigError);
  CHECK_THROWS_AS(parse("lambda1 = 0\nlambda2 = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse("ft.eta_min = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse("pretrain.batch = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse("model.dropout = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse("model.num_features = 5\n"), ConfigError);
  CHECK_THROWS_AS(parse("model.seq_len = 4\n"), ConfigError);
  CHECK_THROWS_AS(parse("tau = 0\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/kairos.cfg"), ConfigError);
}

TEST_CASE("serialized config parses back to the same values") {
  Config c = desk_preset();
  c.train.lp.lr = 0.1 + 0.2;
  c.model.num_features = 0;
  c.train.seed = 99;
  std::istringstream in(serialize_config(c));
  const Config back = parse_config(in);
  CHECK(serialize_config(back) == serialize_config(c));
  CHECK(back.train.lp.lr == c.train.lp.lr);
  CHECK(back.model.num_features == 0);
}
