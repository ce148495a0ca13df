#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "tmgf/association.hpp"
#include "tmgf/config.hpp"
#include "tmgf/dataset.hpp"
#include "tmgf/evalkit.hpp"
#include "tmgf/memory_losses.hpp"
#include "tmgf/multigrain_head.hpp"

namespace tmgf {

/// Linear warmup from base_lr * warmup_start_factor (epoch 0) to base_lr
/// (epoch warmup_epochs), then multiplied by step_factor at every step epoch reached.
double lr_at(int64_t epoch, const TrainConfig& config);

struct AugmentOptions {
  double flip_prob = 0.5;
  int64_t crop_padding = 10;
  double erase_prob = 0.5;
  double erase_area_min = 0.02;
  double erase_area_max = 0.4;
  double erase_aspect_min = 0.3;

  static AugmentOptions from(const TrainConfig& config);
};

/// Training-time augmentation on [3, H, W] pixels in [0, 1]: horizontal flip,
/// zero-pad and random crop, random erasing with a constant fill.
class Augmenter {
 public:
  Augmenter(AugmentOptions options, torch::Tensor fill);

  /// Identity when `training` is false.
  torch::Tensor operator()(const torch::Tensor& image, std::mt19937_64& rng, bool training = true) const;

  static torch::Tensor flip(const torch::Tensor& image);
  static torch::Tensor pad_crop(const torch::Tensor& image, int64_t padding, int64_t top, int64_t left);
  static torch::Tensor erase(const torch::Tensor& image, int64_t top, int64_t left, int64_t height, int64_t width,
                             const torch::Tensor& fill);

 private:
  AugmentOptions options_;
  torch::Tensor fill_;  // [3]
};

/// Draws batch_size / instances proxies per batch and `instances` images of
/// each (with replacement when a proxy is smaller). Outliers are never drawn.
class ProxyBalancedSampler {
 public:
  ProxyBalancedSampler(const ProxyLabeling& labeling, int64_t batch_size, int64_t instances);
  std::vector<int64_t> next_batch(std::mt19937_64& rng) const;

 private:
  std::vector<std::vector<int64_t>> members_;
  int64_t proxies_per_batch_;
  int64_t instances_;
};

/// Unlabeled training images. Built without reading any train-split identity.
struct TrainingData {
  torch::Tensor images;   // [N, 3, H, W] in [0, 1]
  torch::Tensor cameras;  // [N] int64
  std::vector<std::string> ids;
};

TrainingData make_training_data(const DatasetManifest& manifest, const BackboneConfig& config);

/// Inference-mode normalized features in batches; leaves the model in eval mode.
MultiGrainFeatures extract_features(TmgfModel& model, const torch::Tensor& images, const torch::Tensor& cameras,
                                    int64_t batch_size = 128);

/// Retrieval metrics of the global feature on the query/gallery splits.
RetrievalResult evaluate_model(TmgfModel& model, const DatasetManifest& manifest);

struct EpochReport {
  int64_t epoch = 0;
  double lr = 0.0;
  int64_t num_clusters = 0;
  int64_t num_proxies = 0;
  int64_t num_outliers = 0;
  int64_t steps = 0;
  int64_t memory_warnings = 0;
  double global_offline = 0.0;  // means over steps
  double global_online = 0.0;
  double part_term = 0.0;
  double total = 0.0;
  bool aborted = false;
  std::string diagnostic;
};

class Trainer {
 public:
  /// Seeds torch and the augmentation/sampling stream from config.train.seed
  /// before building the model, so equal configs replay bit for bit.
  Trainer(ExperimentConfig config, TrainingData data, std::optional<std::filesystem::path> loss_log = {});

  /// Extract, cluster, split into proxies, rebuild memories, train one epoch.
  EpochReport epoch_cycle(int64_t epoch);
  std::vector<EpochReport> train(const std::function<void(const EpochReport&)>& on_epoch = {});

  TmgfModel& model() { return model_; }
  const ExperimentConfig& config() const { return config_; }
  /// Labeling and memories of the last epoch (empty before the first cycle).
  const std::optional<ProxyLabeling>& labeling() const { return labeling_; }
  const std::vector<ProxyMemory>& memories() const { return memories_; }

 private:
  torch::Tensor augment_batch(const std::vector<int64_t>& indices);

  ExperimentConfig config_;
  TrainingData data_;
  TmgfModel model_{nullptr};
  std::unique_ptr<torch::optim::SGD> optimizer_;
  std::mt19937_64 rng_;
  Augmenter augmenter_;
  std::optional<LossLog> log_;
  std::optional<ProxyLabeling> labeling_;
  std::vector<ProxyMemory> memories_;
};

}  // namespace tmgf
