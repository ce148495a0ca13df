#include "testing.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "test_util.hpp"
#include "tmgf/checkpoint.hpp"
#include "tmgf/errors.hpp"
#include "tmgf/synthetic.hpp"
#include "tmgf/trainer.hpp"

using namespace tmgf;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config() {
  auto c = ExperimentConfig::toy();
  c.backbone.num_layers = 2;
  c.train.epochs = 2;
  c.train.warmup_epochs = 1;
  c.train.step_epochs = {};
  c.train.batch_size = 16;
  c.train.iters_per_epoch = 2;
  return c;
}

DatasetManifest small_dataset() {
  SyntheticSpec spec;
  spec.num_ids = 6;
  spec.num_cameras = 4;
  spec.images_per_id_per_camera = 2;
  return generate_synthetic(spec);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  const TrainConfig t;
  CHECK(lr_at(0, t) == doctest::Approx(3.5e-6).epsilon(1e-12));
  CHECK(lr_at(5, t) == doctest::Approx(3.5e-4 * (0.01 * 0.5 + 0.5)).epsilon(1e-12));
  CHECK(lr_at(10, t) == doctest::Approx(3.5e-4).epsilon(1e-12));
  CHECK(lr_at(19, t) == doctest::Approx(3.5e-4).epsilon(1e-12));
  CHECK(lr_at(20, t) == doctest::Approx(3.5e-5).epsilon(1e-12));
  CHECK(lr_at(40, t) == doctest::Approx(3.5e-6).epsilon(1e-12));
  CHECK(lr_at(49, t) == doctest::Approx(3.5e-6).epsilon(1e-12));
  for (int64_t e = 1; e <= 10; ++e) CHECK(lr_at(e, t) > lr_at(e - 1, t));
}

TEST_CASE("augmentation") {
  auto image = torch::rand({3, 16, 8});
  const auto fill = torch::tensor({0.1f, 0.2f, 0.3f});
  std::mt19937_64 rng(1);

  CHECK(torch::equal(Augmenter::flip(Augmenter::flip(image)), image));
  CHECK(torch::equal(Augmenter::flip(image).select(2, 0), image.select(2, 7)));

  const auto erased = Augmenter::erase(image, 0, 0, 16, 8, fill);
  for (int64_t c = 0; c < 3; ++c) CHECK((erased[c] == fill[c]).all().item<bool>());

  CHECK(torch::equal(Augmenter::pad_crop(image, 2, 2, 2), image));
  const auto shifted = Augmenter::pad_crop(image, 2, 0, 0);
  CHECK(torch::equal(shifted.narrow(1, 2, 14).narrow(2, 2, 6), image.narrow(1, 0, 14).narrow(2, 0, 6)));
  CHECK((shifted.narrow(1, 0, 2) == 0).all().item<bool>());

  Augmenter aug(AugmentOptions{}, fill);
  CHECK(torch::equal(aug(image, rng, false), image));
  auto out = aug(image, rng, true);
  CHECK(out.sizes() == image.sizes());

  AugmentOptions flip_only;
  flip_only.flip_prob = 1.0;
  flip_only.crop_padding = 0;
  flip_only.erase_prob = 0.0;
  Augmenter flipper(flip_only, fill);
  CHECK(torch::equal(flipper(flipper(image, rng), rng), image));

  std::mt19937_64 a(9), b(9);
  CHECK(torch::equal(aug(image, a), aug(image, b)));
}

TEST_CASE("proxy-balanced sampler") {
  ClusterAssignment c{{0, 0, 0, kOutlier, 1, 1, 0, 1}, 2};
  const std::vector<int64_t> cams{0, 0, 1, 1, 0, 1, 0, 1};
  const auto l = split_camera_proxies(c, cams);
  const ProxyBalancedSampler sampler(l, 8, 4);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto batch = sampler.next_batch(rng);
    REQUIRE(batch.size() == 8);
    for (size_t s = 0; s < batch.size(); s += 4) {
      const auto proxy = l.pseudo_label[static_cast<size_t>(batch[s])];
      CHECK(proxy != kOutlier);
      for (size_t j = s; j < s + 4; ++j) CHECK(l.pseudo_label[static_cast<size_t>(batch[j])] == proxy);
    }
    CHECK(l.pseudo_label[static_cast<size_t>(batch[0])] != l.pseudo_label[static_cast<size_t>(batch[4])]);
  }
  CHECK_THROWS_AS(ProxyBalancedSampler(l, 2, 4), ConfigError);
}

TEST_CASE("training never reads train identities") {
  const auto data = small_dataset();
  const auto before = train_label_reads();
  Trainer trainer(small_config(), make_training_data(data, small_config().backbone));
  trainer.train();
  CHECK(train_label_reads() == before);
}

TEST_CASE("an epoch without clusters aborts with a diagnostic") {
  auto c = small_config();
  c.association.dbscan_min_samples = 1000;
  Trainer trainer(c, make_training_data(small_dataset(), c.backbone));
  const auto r = trainer.epoch_cycle(0);
  CHECK(r.aborted);
  CHECK(r.diagnostic.find("no clusters") != std::string::npos);
  CHECK(r.steps == 0);
  CHECK_FALSE(trainer.labeling().has_value());
}

TEST_CASE("an epoch rebuilds proxies and memories") {
  auto c = small_config();
  c.association.dbscan_eps = 2.0;  // one cluster covering everything
  Trainer trainer(c, make_training_data(small_dataset(), c.backbone));
  const auto r = trainer.epoch_cycle(0);
  REQUIRE_FALSE(r.aborted);
  CHECK(r.num_clusters == 1);
  CHECK(r.num_proxies == 4);
  CHECK(r.num_outliers == 0);
  CHECK(r.steps == 2);
  CHECK(std::isfinite(r.total));
  REQUIRE(trainer.memories().size() == 6);
  for (const auto& m : trainer.memories()) {
    CHECK(m.num_proxies() == 4);
    CHECK(max_abs_diff(m.bank().norm(2, 1), torch::ones({4})) < 1e-5);
  }
}

TEST_CASE("identical seeds replay bit for bit") {
  const auto dir = fs::temp_directory_path() / "tmgf_test_replay";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto data = small_dataset();
  auto c = small_config();
  c.association.dbscan_eps = 0.9;
  std::vector<torch::Tensor> finals;
  for (int run = 0; run < 2; ++run) {
    Trainer trainer(c, make_training_data(data, c.backbone), dir / ("log" + std::to_string(run) + ".csv"));
    trainer.train();
    finals.push_back(extract_features(trainer.model(), make_training_data(data, c.backbone).images,
                                      make_training_data(data, c.backbone).cameras)
                         .global);
  }
  CHECK(slurp(dir / "log0.csv") == slurp(dir / "log1.csv"));
  CHECK(torch::equal(finals[0], finals[1]));
}

TEST_CASE("checkpoint round trip and shape mismatch") {
  const auto dir = fs::temp_directory_path() / "tmgf_test_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto c = small_config();
  torch::manual_seed(71);
  TmgfModel model(c.backbone, c.head);
  // Move BN running stats away from their defaults so buffers are exercised.
  model->train();
  model->forward(torch::randn({4, 3, 64, 32}), torch::tensor({0, 1, 2, 3}, torch::kLong));
  save_checkpoint(dir / "m.pt", model, c);
  CHECK(fs::exists(manifest_path_for(dir / "m.pt")));

  auto loaded = load_checkpoint(dir / "m.pt");
  CHECK(dump_config(loaded.config) == dump_config(c));
  auto x = torch::randn({2, 3, 64, 32});
  auto cams = torch::tensor({1, 2}, torch::kLong);
  model->eval();
  loaded.model->eval();
  CHECK(torch::equal(model->forward(x, cams).global, loaded.model->forward(x, cams).global));

  auto other = c;
  other.backbone.embed_dim = 32;
  TmgfModel wrong(other.backbone, other.head);
  CHECK_THROWS_AS(load_parameters(dir / "m.pt", wrong), ConfigError);
}
