#include "testing.hpp"

#include <string>

#include "tmgf/config.hpp"
#include "tmgf/errors.hpp"

using namespace tmgf;

TEST_CASE("published defaults") {
  const auto c = ExperimentConfig::paper();
  CHECK(c.memory.momentum == 0.2);
  CHECK(c.memory.temperature == 0.07);
  CHECK(c.loss.lambda_p == 0.1);
  CHECK(c.train.batch_size == 32);
  CHECK(c.train.epochs == 50);
  CHECK(c.train.base_lr == 3.5e-4);
  CHECK(c.train.weight_decay == 5e-4);
  CHECK(c.train.momentum == 0.9);
  CHECK(c.train.warmup_epochs == 10);
  CHECK(c.train.step_epochs == std::vector<int64_t>{20, 40});
  CHECK(c.head.k1 == 2);
  CHECK(c.head.k2 == 3);
  CHECK(c.backbone.camera_weight == 3.0);
  CHECK(c.backbone.num_patches() == 192);
  CHECK(c.backbone.grid_rows() == 24);
  CHECK(c.backbone.grid_cols() == 8);
  CHECK_NOTHROW(c.validate());
  CHECK_NOTHROW(ExperimentConfig::toy().validate());
}

TEST_CASE("config text round trip") {
  auto c = ExperimentConfig::toy();
  c.head.fusion_mode = FusionMode::branch2;
  c.head.duplicate_last_layer = false;
  c.train.step_epochs = {3, 7};
  const auto back = parse_config(dump_config(c));
  CHECK(dump_config(back) == dump_config(c));
  CHECK(dump_config(config_from_lines(config_lines(c))) == dump_config(c));
}

TEST_CASE("missing and unknown keys are rejected") {
  auto text = dump_config(ExperimentConfig::toy());

  auto missing = text;
  const auto pos = missing.find("\"dbscan_eps\"");
  REQUIRE(pos != std::string::npos);
  missing.replace(pos, std::string("\"dbscan_eps\"").size(), "\"dbscan_epz\"");
  CHECK_THROWS_AS(parse_config(missing), ConfigError);

  CHECK_THROWS_AS(parse_config("{}"), ConfigError);
  CHECK_THROWS_AS(parse_config("not json"), ConfigError);
}

TEST_CASE("shape relations are validated") {
  BackboneConfig b;
  b.image_height = 60;  // not divisible by 16
  CHECK_THROWS_AS(b.validate(), ConfigError);
  b = BackboneConfig{};
  b.patch_size = 15;
  b.image_height = 60;
  b.image_width = 30;
  CHECK_THROWS_AS(b.validate(), ConfigError);  // odd patch
  b = BackboneConfig{};
  b.num_heads = 3;  // 64 % 3 != 0
  CHECK_THROWS_AS(b.validate(), ConfigError);

  HeadConfig h;
  h.k2 = 5;
  CHECK_THROWS_AS(h.validate(4), ConfigError);

  TrainConfig t;
  t.step_epochs = {40, 20};
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.warmup_epochs = 50;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("fusion mode names") {
  CHECK(parse_fusion_mode("avg") == FusionMode::avg);
  CHECK(parse_fusion_mode("b1") == FusionMode::branch1);
  CHECK(parse_fusion_mode("branch2") == FusionMode::branch2);
  CHECK_THROWS_AS(parse_fusion_mode("max"), ConfigError);
}
