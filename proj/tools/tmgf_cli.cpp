// Command-line front end: synth, train, eval, extract, rollout, config.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "tmgf/checkpoint.hpp"
#include "tmgf/config.hpp"
#include "tmgf/dataset.hpp"
#include "tmgf/errors.hpp"
#include "tmgf/evalkit.hpp"
#include "tmgf/feature_io.hpp"
#include "tmgf/synthetic.hpp"
#include "tmgf/trainer.hpp"

namespace fs = std::filesystem;
using namespace tmgf;

namespace {

struct TrainOverrides {
  std::optional<int64_t> k1, k2, epochs;
  std::optional<std::string> fusion;
  bool no_duplicate = false;
  std::optional<double> lambda_p, eps;
  std::optional<uint64_t> seed;
};

void apply(const TrainOverrides& o, ExperimentConfig& c) {
  if (o.k1) c.head.k1 = *o.k1;
  if (o.k2) c.head.k2 = *o.k2;
  if (o.fusion) c.head.fusion_mode = parse_fusion_mode(*o.fusion);
  if (o.no_duplicate) c.head.duplicate_last_layer = false;
  if (o.lambda_p) c.loss.lambda_p = *o.lambda_p;
  if (o.eps) c.association.dbscan_eps = *o.eps;
  if (o.seed) c.train.seed = *o.seed;
  if (o.epochs) c.train.epochs = *o.epochs;
  c.validate();
}

void print_epoch(const EpochReport& r) {
  std::cout << "epoch " << std::setw(3) << r.epoch << "  lr " << std::scientific << std::setprecision(2) << r.lr
            << std::defaultfloat;
  if (r.aborted) {
    std::cout << "  aborted: " << r.diagnostic << '\n';
    return;
  }
  std::cout << "  clusters " << r.num_clusters << "  proxies " << r.num_proxies << "  outliers " << r.num_outliers
            << std::fixed << std::setprecision(4) << "  loss " << r.total << " (g_off " << r.global_offline
            << ", g_on " << r.global_online << ", part " << r.part_term << ")" << std::defaultfloat << '\n';
}

int run_synth(const SyntheticSpec& spec, const fs::path& out) {
  const auto dataset = generate_synthetic(spec);
  write_synthetic(dataset, out);
  std::cout << "wrote " << dataset.records.size() << " images and " << (out / "manifest.csv").string() << '\n';
  return 0;
}

int run_train(const fs::path& config_path, const fs::path& manifest_path, const fs::path& out,
              const TrainOverrides& overrides) {
  auto config = load_config(config_path);
  apply(overrides, config);
  fs::create_directories(out);
  {
    std::ofstream f(out / "config.json");
    f << dump_config(config);
  }
  const auto manifest = load_manifest(manifest_path, config.backbone.num_cameras);
  auto data = make_training_data(manifest, config.backbone);
  const auto ids = data.ids;
  const auto cameras = std::vector<int64_t>(data.cameras.data_ptr<int64_t>(),
                                            data.cameras.data_ptr<int64_t>() + data.cameras.numel());

  Trainer trainer(config, std::move(data), out / "loss_log.csv");
  trainer.train([&](const EpochReport& report) {
    print_epoch(report);
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%03d.pt", static_cast<int>(report.epoch));
    save_checkpoint(out / name, trainer.model(), config);
    if (trainer.labeling()) {
      std::ofstream dump(out / "labeling.csv");
      write_labeling_dump(dump, *trainer.labeling(), ids, cameras);
    }
  });
  save_checkpoint(out / "final.pt", trainer.model(), config);
  std::cout << "checkpoint: " << (out / "final.pt").string() << '\n';

  if (!manifest.indices(Split::query).empty() && !manifest.indices(Split::gallery).empty()) {
    print_result_table(std::cout, evaluate_model(trainer.model(), manifest));
  }
  return 0;
}

int run_eval(const fs::path& checkpoint, const fs::path& manifest_path, const std::string& per_query) {
  auto loaded = load_checkpoint(checkpoint);
  const auto manifest = load_manifest(manifest_path, loaded.config.backbone.num_cameras);
  const auto result = evaluate_model(loaded.model, manifest);
  print_result_table(std::cout, result);
  if (!per_query.empty()) {
    std::ofstream out(per_query);
    if (!out) throw InputError("cannot write " + per_query);
    write_per_query_csv(out, result);
  }
  return 0;
}

int run_extract(const fs::path& checkpoint, const fs::path& manifest_path, const fs::path& out,
                const std::string& split) {
  auto loaded = load_checkpoint(checkpoint);
  const auto& cfg = loaded.config.backbone;
  const auto manifest = load_manifest(manifest_path, cfg.num_cameras);
  std::vector<int64_t> indices;
  if (split == "all") {
    for (size_t i = 0; i < manifest.records.size(); ++i) indices.push_back(static_cast<int64_t>(i));
  } else {
    indices = manifest.indices(parse_split(split));
  }
  const auto images = load_images(manifest, indices, cfg.image_height, cfg.image_width);
  const auto features = extract_features(loaded.model, images, camera_tensor(manifest, indices)).global;
  write_feature_matrix(out, features);

  std::vector<FeatureRow> rows;
  for (auto i : indices) {
    const auto& r = manifest.records[static_cast<size_t>(i)];
    // Train rows are exported without their identity.
    rows.push_back({r.path, r.split == Split::train ? std::nullopt : r.person_id(), r.camera_id});
  }
  write_feature_sidecar(sidecar_path_for(out), rows);
  std::cout << "wrote " << features.size(0) << " x " << features.size(1) << " features to " << out.string() << '\n';
  return 0;
}

int run_rollout(const fs::path& checkpoint, const fs::path& image_path, int64_t camera, const fs::path& out_prefix) {
  auto loaded = load_checkpoint(checkpoint);
  const auto& cfg = loaded.config.backbone;
  auto image = load_image(image_path, cfg.image_height, cfg.image_width);
  std::vector<torch::Tensor> attentions;
  {
    torch::NoGradGuard no_grad;
    loaded.model->eval();
    loaded.model->forward_raw(to_model_input(image.unsqueeze(0)), torch::tensor({camera}, torch::kLong), &attentions);
  }
  const auto map = attention_rollout(attentions, cfg.grid_rows(), cfg.grid_cols());

  const auto scale = cfg.patch_size;
  save_image(out_prefix.string() + ".png", map.map.repeat_interleave(scale, 0).repeat_interleave(scale, 1));
  std::ofstream txt(out_prefix.string() + ".txt");
  txt << std::setprecision(9);
  for (int64_t r = 0; r < map.raw.size(0); ++r) {
    for (int64_t c = 0; c < map.raw.size(1); ++c) txt << (c ? " " : "") << map.raw[r][c].item<double>();
    txt << '\n';
  }
  if (map.degenerate) std::cout << "warning: degenerate constant rollout map\n";
  std::cout << "wrote " << out_prefix.string() << ".png and .txt\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer multi-grained features for unsupervised person re-identification"};
  app.require_subcommand(1);

  SyntheticSpec spec;
  fs::path synth_out = "synthetic";
  auto* synth = app.add_subcommand("synth", "Generate a labeled-by-construction synthetic Re-ID dataset");
  synth->add_option("--ids", spec.num_ids, "Number of identities");
  synth->add_option("--cams", spec.num_cameras, "Number of cameras");
  synth->add_option("--imgs", spec.images_per_id_per_camera, "Images per identity per camera");
  synth->add_option("--height", spec.image_height);
  synth->add_option("--width", spec.image_width);
  synth->add_option("--sigma", spec.noise_sigma, "Pixel noise standard deviation");
  synth->add_option("--shift", spec.camera_shift, "Camera colour-shift strength");
  synth->add_option("--test-fraction", spec.test_id_fraction, "Fraction of identities held out for evaluation");
  synth->add_option("--seed", spec.seed);
  synth->add_option("--out", synth_out, "Output directory")->required();

  fs::path config_path, manifest_path, train_out = "run";
  TrainOverrides overrides;
  auto* train = app.add_subcommand("train", "Unsupervised training");
  train->add_option("--config", config_path, "Config file (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--manifest", manifest_path, "Dataset manifest")->required()->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "Output directory for checkpoints and logs");
  train->add_option("--k1", overrides.k1, "Stripes in branch 1");
  train->add_option("--k2", overrides.k2, "Stripes in branch 2");
  train->add_option("--fusion", overrides.fusion, "Global fusion: avg|b1|b2")->check(CLI::IsMember({"avg", "b1", "b2"}));
  train->add_flag("--no-duplicate", overrides.no_duplicate, "Share the last layer between branches");
  train->add_option("--lambda-p", overrides.lambda_p, "Part loss weight");
  train->add_option("--eps", overrides.eps, "DBSCAN eps (cosine distance)");
  train->add_option("--seed", overrides.seed);
  train->add_option("--epochs", overrides.epochs);

  fs::path checkpoint;
  std::string per_query;
  auto* eval = app.add_subcommand("eval", "mAP / CMC on the query and gallery splits");
  eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", manifest_path)->required()->check(CLI::ExistingFile);
  eval->add_option("--per-query", per_query, "Write per-query AP CSV");

  fs::path extract_out;
  std::string split = "all";
  auto* extract = app.add_subcommand("extract", "Export inference features");
  extract->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  extract->add_option("--manifest", manifest_path)->required()->check(CLI::ExistingFile);
  extract->add_option("--out", extract_out, "Feature matrix file")->required();
  extract->add_option("--split", split, "all|train|query|gallery")
      ->check(CLI::IsMember({"all", "train", "query", "gallery"}));

  fs::path image_path, rollout_out = "rollout";
  int64_t camera = 0;
  auto* rollout = app.add_subcommand("rollout", "Attention rollout map for one image");
  rollout->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  rollout->add_option("--image", image_path)->required()->check(CLI::ExistingFile);
  rollout->add_option("--camera", camera, "Camera id of the image");
  rollout->add_option("--out", rollout_out, "Output prefix");

  std::string preset = "toy";
  auto* config_cmd = app.add_subcommand("config", "Print a complete config file");
  config_cmd->add_option("--preset", preset)->check(CLI::IsMember({"toy", "paper"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return run_synth(spec, synth_out);
    if (*train) return run_train(config_path, manifest_path, train_out, overrides);
    if (*eval) return run_eval(checkpoint, manifest_path, per_query);
    if (*extract) return run_extract(checkpoint, manifest_path, extract_out, split);
    if (*rollout) return run_rollout(checkpoint, image_path, camera, rollout_out);
    if (*config_cmd) {
      std::cout << dump_config(preset == "paper" ? ExperimentConfig::paper() : ExperimentConfig::toy());
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
