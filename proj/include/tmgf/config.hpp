#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace tmgf {

struct BackboneConfig {
  int64_t image_height = 64;
  int64_t image_width = 32;
  int64_t patch_size = 16;
  int64_t embed_dim = 64;
  int64_t num_layers = 4;
  int64_t num_heads = 4;
  int64_t num_cameras = 4;
  double camera_weight = 3.0;  // lambda_c
  int64_t stem_channels = 32;

  int64_t grid_rows() const { return image_height / patch_size; }
  int64_t grid_cols() const { return image_width / patch_size; }
  int64_t num_patches() const { return grid_rows() * grid_cols(); }
  int64_t num_tokens() const { return num_patches() + 1; }

  /// Throws ConfigError when a shape relation does not hold.
  void validate() const;
};

enum class FusionMode { avg, branch1, branch2 };

std::string to_string(FusionMode mode);
/// Accepts "avg", "b1"/"branch1", "b2"/"branch2".
FusionMode parse_fusion_mode(const std::string& text);

struct HeadConfig {
  int64_t k1 = 2;
  int64_t k2 = 3;
  bool duplicate_last_layer = true;
  FusionMode fusion_mode = FusionMode::avg;

  int64_t num_parts() const { return k1 + k2; }
  void validate(int64_t grid_rows) const;
};

struct AssociationConfig {
  double dbscan_eps = 0.5;
  int64_t dbscan_min_samples = 4;
  int64_t num_hard_negatives = 50;
  int64_t online_topk = 5;

  void validate() const;
};

struct MemoryConfig {
  double momentum = 0.2;  // mu
  double temperature = 0.07;

  void validate() const;
};

struct LossWeights {
  double lambda_p = 0.1;

  void validate() const;
};

struct TrainConfig {
  int64_t epochs = 50;
  double base_lr = 3.5e-4;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  int64_t warmup_epochs = 10;
  double warmup_start_factor = 0.01;
  std::vector<int64_t> step_epochs{20, 40};
  double step_factor = 0.1;
  int64_t batch_size = 32;
  uint64_t seed = 1;
  // Sampler and augmentation knobs.
  int64_t instances_per_proxy = 4;
  int64_t iters_per_epoch = 0;  // 0: ceil(#labeled images / batch_size)
  double flip_prob = 0.5;
  int64_t crop_padding = 10;
  double erase_prob = 0.5;

  void validate() const;
};

/// Every knob of one experiment. Serialized as a JSON document with one
/// object per section; field names match the struct members exactly.
struct ExperimentConfig {
  BackboneConfig backbone;
  HeadConfig head;
  AssociationConfig association;
  MemoryConfig memory;
  LossWeights loss;
  TrainConfig train;

  void validate() const;

  /// Desk-scale defaults that train on a CPU in minutes.
  static ExperimentConfig toy();
  /// ViT-Small/16 at 384x128 with the published hyper-parameters.
  static ExperimentConfig paper();
};

/// Strict parse: every section and key must be present, unknown keys are rejected.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string dump_config(const ExperimentConfig& config);

/// One "section.key = value" line per field, in declaration order.
std::vector<std::string> config_lines(const ExperimentConfig& config);
ExperimentConfig config_from_lines(const std::vector<std::string>& lines);

}  // namespace tmgf
