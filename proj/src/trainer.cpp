#include "tmgf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tmgf/errors.hpp"

namespace tmgf {

double lr_at(int64_t epoch, const TrainConfig& config) {
  double lr = config.base_lr;
  if (epoch < config.warmup_epochs) {
    const double alpha = static_cast<double>(epoch) / static_cast<double>(config.warmup_epochs);
    lr *= config.warmup_start_factor * (1.0 - alpha) + alpha;
  }
  for (auto step : config.step_epochs) {
    if (epoch >= step) lr *= config.step_factor;
  }
  return lr;
}

AugmentOptions AugmentOptions::from(const TrainConfig& config) {
  AugmentOptions o;
  o.flip_prob = config.flip_prob;
  o.crop_padding = config.crop_padding;
  o.erase_prob = config.erase_prob;
  return o;
}

Augmenter::Augmenter(AugmentOptions options, torch::Tensor fill) : options_(options), fill_(std::move(fill)) {}

torch::Tensor Augmenter::flip(const torch::Tensor& image) { return image.flip({-1}); }

torch::Tensor Augmenter::pad_crop(const torch::Tensor& image, int64_t padding, int64_t top, int64_t left) {
  if (padding == 0) return image;
  const auto h = image.size(1), w = image.size(2);
  auto padded = torch::constant_pad_nd(image, {padding, padding, padding, padding}, 0.0);
  return padded.narrow(1, top, h).narrow(2, left, w).contiguous();
}

torch::Tensor Augmenter::erase(const torch::Tensor& image, int64_t top, int64_t left, int64_t height, int64_t width,
                               const torch::Tensor& fill) {
  auto out = image.clone();
  out.narrow(1, top, height).narrow(2, left, width).copy_(fill.view({3, 1, 1}).expand({3, height, width}));
  return out;
}

torch::Tensor Augmenter::operator()(const torch::Tensor& image, std::mt19937_64& rng, bool training) const {
  if (!training) return image;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto out = image;
  if (unit(rng) < options_.flip_prob) out = flip(out);
  if (options_.crop_padding > 0) {
    std::uniform_int_distribution<int64_t> offset(0, 2 * options_.crop_padding);
    const auto top = offset(rng);
    const auto left = offset(rng);
    out = pad_crop(out, options_.crop_padding, top, left);
  }
  if (unit(rng) < options_.erase_prob) {
    const auto h = out.size(1), w = out.size(2);
    const double area = static_cast<double>(h * w);
    std::uniform_real_distribution<double> area_frac(options_.erase_area_min, options_.erase_area_max);
    std::uniform_real_distribution<double> log_aspect(std::log(options_.erase_aspect_min),
                                                      std::log(1.0 / options_.erase_aspect_min));
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double target = area_frac(rng) * area;
      const double aspect = std::exp(log_aspect(rng));
      const auto eh = static_cast<int64_t>(std::llround(std::sqrt(target * aspect)));
      const auto ew = static_cast<int64_t>(std::llround(std::sqrt(target / aspect)));
      if (eh < 1 || ew < 1 || eh >= h || ew >= w) continue;
      const auto top = std::uniform_int_distribution<int64_t>(0, h - eh)(rng);
      const auto left = std::uniform_int_distribution<int64_t>(0, w - ew)(rng);
      out = erase(out, top, left, eh, ew, fill_);
      break;
    }
  }
  return out;
}

ProxyBalancedSampler::ProxyBalancedSampler(const ProxyLabeling& labeling, int64_t batch_size, int64_t instances)
    : members_(labeling.images_by_proxy()), proxies_per_batch_(batch_size / instances), instances_(instances) {
  if (members_.empty()) throw LabelingError("sampler needs at least one proxy");
  if (proxies_per_batch_ < 1) throw ConfigError("batch_size must be >= instances_per_proxy");
}

std::vector<int64_t> ProxyBalancedSampler::next_batch(std::mt19937_64& rng) const {
  const auto num_proxies = static_cast<int64_t>(members_.size());
  std::vector<int64_t> proxies(static_cast<size_t>(num_proxies));
  std::iota(proxies.begin(), proxies.end(), 0);
  std::vector<int64_t> chosen;
  if (num_proxies >= proxies_per_batch_) {
    std::shuffle(proxies.begin(), proxies.end(), rng);
    chosen.assign(proxies.begin(), proxies.begin() + proxies_per_batch_);
  } else {
    std::uniform_int_distribution<int64_t> pick(0, num_proxies - 1);
    for (int64_t i = 0; i < proxies_per_batch_; ++i) chosen.push_back(pick(rng));
  }

  std::vector<int64_t> batch;
  for (auto u : chosen) {
    auto images = members_[static_cast<size_t>(u)];
    std::shuffle(images.begin(), images.end(), rng);
    const auto size = static_cast<int64_t>(images.size());
    std::uniform_int_distribution<int64_t> pick(0, size - 1);
    for (int64_t i = 0; i < instances_; ++i) {
      batch.push_back(i < size ? images[static_cast<size_t>(i)] : images[static_cast<size_t>(pick(rng))]);
    }
  }
  return batch;
}

TrainingData make_training_data(const DatasetManifest& manifest, const BackboneConfig& config) {
  const auto indices = manifest.indices(Split::train);
  if (indices.empty()) throw InputError("manifest has no train rows");
  TrainingData data;
  data.images = load_images(manifest, indices, config.image_height, config.image_width);
  data.cameras = camera_tensor(manifest, indices);
  for (auto i : indices) data.ids.push_back(manifest.records[static_cast<size_t>(i)].path);
  if (data.cameras.max().item<int64_t>() >= config.num_cameras) {
    throw InputError("train camera id exceeds backbone num_cameras");
  }
  return data;
}

MultiGrainFeatures extract_features(TmgfModel& model, const torch::Tensor& images, const torch::Tensor& cameras,
                                    int64_t batch_size) {
  torch::NoGradGuard no_grad;
  model->eval();
  std::vector<torch::Tensor> globals, parts;
  for (int64_t start = 0; start < images.size(0); start += batch_size) {
    const auto len = std::min(batch_size, images.size(0) - start);
    auto f = model->forward(to_model_input(images.narrow(0, start, len)), cameras.narrow(0, start, len));
    globals.push_back(f.global);
    parts.push_back(f.parts);
  }
  return {torch::cat(globals), torch::cat(parts)};
}

RetrievalResult evaluate_model(TmgfModel& model, const DatasetManifest& manifest) {
  const auto& cfg = model->backbone_config();
  const auto query_idx = manifest.indices(Split::query);
  const auto gallery_idx = manifest.indices(Split::gallery);
  if (query_idx.empty() || gallery_idx.empty()) throw InputError("manifest needs query and gallery rows");

  auto features_of = [&](const std::vector<int64_t>& idx) {
    auto images = load_images(manifest, idx, cfg.image_height, cfg.image_width);
    return extract_features(model, images, camera_tensor(manifest, idx)).global;
  };
  auto meta_of = [&](const std::vector<int64_t>& idx) {
    std::vector<ImageMeta> meta;
    for (auto i : idx) {
      const auto& r = manifest.records[static_cast<size_t>(i)];
      meta.push_back({r.person_id().value_or(-1), r.camera_id});
    }
    return meta;
  };
  const auto qm = meta_of(query_idx);
  const auto gm = meta_of(gallery_idx);
  return evaluate(features_of(query_idx), qm, features_of(gallery_idx), gm);
}

Trainer::Trainer(ExperimentConfig config, TrainingData data, std::optional<std::filesystem::path> loss_log)
    : config_(std::move(config)),
      data_(std::move(data)),
      rng_(config_.train.seed),
      augmenter_(AugmentOptions::from(config_.train), data_.images.mean({0, 2, 3})) {
  config_.validate();
  torch::manual_seed(config_.train.seed);
  model_ = TmgfModel(config_.backbone, config_.head);
  optimizer_ = std::make_unique<torch::optim::SGD>(
      model_->parameters(), torch::optim::SGDOptions(config_.train.base_lr)
                                .momentum(config_.train.momentum)
                                .weight_decay(config_.train.weight_decay));
  if (loss_log) log_.emplace(*loss_log);
}

torch::Tensor Trainer::augment_batch(const std::vector<int64_t>& indices) {
  std::vector<torch::Tensor> images;
  images.reserve(indices.size());
  for (auto i : indices) images.push_back(augmenter_(data_.images[i], rng_, true));
  return to_model_input(torch::stack(images));
}

EpochReport Trainer::epoch_cycle(int64_t epoch) {
  EpochReport report;
  report.epoch = epoch;
  report.lr = lr_at(epoch, config_.train);
  for (auto& group : optimizer_->param_groups()) {
    static_cast<torch::optim::SGDOptions&>(group.options()).lr(report.lr);
  }

  // Clustering step on inference-mode features.
  const auto features = extract_features(model_, data_.images, data_.cameras);
  const auto camera_ids = std::vector<int64_t>(data_.cameras.data_ptr<int64_t>(),
                                               data_.cameras.data_ptr<int64_t>() + data_.cameras.numel());
  ClusterAssignment clusters;
  try {
    clusters = cluster(features.global, config_.association);
  } catch (const LabelingError& e) {
    report.aborted = true;
    report.diagnostic = e.what();
    report.num_outliers = data_.images.size(0);
    labeling_.reset();
    memories_.clear();
    return report;
  }
  labeling_ = split_camera_proxies(clusters, camera_ids);
  labeling_->validate(camera_ids);
  report.num_clusters = clusters.num_clusters;
  report.num_proxies = labeling_->num_proxies();
  report.num_outliers = clusters.num_outliers();

  memories_.clear();
  const auto& mem_cfg = config_.memory;
  memories_.push_back(init_memory(features.global, *labeling_, mem_cfg.momentum, mem_cfg.temperature, 0));
  for (int64_t k = 0; k < features.num_parts(); ++k) {
    memories_.push_back(init_memory(features.part(k), *labeling_, mem_cfg.momentum, mem_cfg.temperature, k + 1));
  }

  // Learning step.
  const auto labeled = data_.images.size(0) - report.num_outliers;
  const auto steps = config_.train.iters_per_epoch > 0
                         ? config_.train.iters_per_epoch
                         : (labeled + config_.train.batch_size - 1) / config_.train.batch_size;
  const ProxyBalancedSampler sampler(*labeling_, config_.train.batch_size, config_.train.instances_per_proxy);
  model_->train();
  for (int64_t step = 0; step < steps; ++step) {
    const auto batch = sampler.next_batch(rng_);
    const auto index = torch::tensor(batch, torch::kLong);
    auto out = model_->forward(augment_batch(batch), data_.cameras.index_select(0, index));

    std::vector<ProxySets> offline, online;
    {
      torch::NoGradGuard no_grad;
      auto sims = out.global.detach().to(torch::kDouble).matmul(memories_[0].bank().to(torch::kDouble).t()).contiguous();
      const auto np = labeling_->num_proxies();
      for (size_t b = 0; b < batch.size(); ++b) {
        const auto image = batch[b];
        const auto proxy = labeling_->pseudo_label[static_cast<size_t>(image)];
        const std::span<const double> row(sims.data_ptr<double>() + static_cast<int64_t>(b) * np, static_cast<size_t>(np));
        offline.push_back(offline_sets(proxy, *labeling_, row, config_.association));
        online.push_back(online_sets(camera_ids[static_cast<size_t>(image)], proxy, *labeling_, row,
                                     config_.association));
      }
    }

    auto losses = total_loss(out, offline, online, memories_, config_.loss.lambda_p);
    optimizer_->zero_grad();
    losses.total.backward();
    optimizer_->step();

    // Momentum updates in batch order, after the parameter update.
    for (size_t b = 0; b < batch.size(); ++b) {
      const auto proxy = labeling_->pseudo_label[static_cast<size_t>(batch[b])];
      const auto row = static_cast<int64_t>(b);
      if (!memories_[0].update(proxy, out.global[row])) ++report.memory_warnings;
      for (int64_t k = 0; k < out.num_parts(); ++k) {
        if (!memories_[static_cast<size_t>(k + 1)].update(proxy, out.parts[row][k])) ++report.memory_warnings;
      }
    }

    if (log_) log_->append(epoch, step, losses);
    report.global_offline += losses.global_offline.item<double>();
    report.global_online += losses.global_online.item<double>();
    report.part_term += losses.part_term.item<double>();
    report.total += losses.total.item<double>();
    ++report.steps;
  }
  if (report.steps > 0) {
    const auto n = static_cast<double>(report.steps);
    report.global_offline /= n;
    report.global_online /= n;
    report.part_term /= n;
    report.total /= n;
  }
  return report;
}

std::vector<EpochReport> Trainer::train(const std::function<void(const EpochReport&)>& on_epoch) {
  std::vector<EpochReport> reports;
  for (int64_t epoch = 0; epoch < config_.train.epochs; ++epoch) {
    reports.push_back(epoch_cycle(epoch));
    if (on_epoch) on_epoch(reports.back());
  }
  return reports;
}

}  // namespace tmgf
