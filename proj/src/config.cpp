#include "tmgf/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tmgf/errors.hpp"

namespace tmgf {

using Json = nlohmann::ordered_json;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

// Reads the fields of one section, remembering which keys were consumed so
// leftovers can be reported as unknown.
class SectionReader {
 public:
  SectionReader(const Json& root, std::string name) : name_(std::move(name)) {
    auto it = root.find(name_);
    if (it == root.end()) throw ConfigError("missing config section '" + name_ + "'");
    if (!it->is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
    section_ = &*it;
  }

  template <typename T>
  void get(const char* key, T& out) {
    auto it = section_->find(key);
    if (it == section_->end()) throw ConfigError("missing config key '" + name_ + "." + key + "'");
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for '" + name_ + "." + key + "': " + e.what());
    }
    seen_.insert(key);
  }

  void finish() const {
    for (auto it = section_->begin(); it != section_->end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + name_ + "." + it.key() + "'");
    }
  }

 private:
  std::string name_;
  const Json* section_ = nullptr;
  std::set<std::string> seen_;
};

Json to_json(const ExperimentConfig& c) {
  Json j;
  const auto& b = c.backbone;
  j["backbone"] = {{"image_height", b.image_height}, {"image_width", b.image_width},
                   {"patch_size", b.patch_size},     {"embed_dim", b.embed_dim},
                   {"num_layers", b.num_layers},     {"num_heads", b.num_heads},
                   {"num_cameras", b.num_cameras},   {"camera_weight", b.camera_weight},
                   {"stem_channels", b.stem_channels}};
  j["head"] = {{"k1", c.head.k1},
               {"k2", c.head.k2},
               {"duplicate_last_layer", c.head.duplicate_last_layer},
               {"fusion_mode", to_string(c.head.fusion_mode)}};
  const auto& a = c.association;
  j["association"] = {{"dbscan_eps", a.dbscan_eps},
                      {"dbscan_min_samples", a.dbscan_min_samples},
                      {"num_hard_negatives", a.num_hard_negatives},
                      {"online_topk", a.online_topk}};
  j["memory"] = {{"momentum", c.memory.momentum}, {"temperature", c.memory.temperature}};
  j["loss"] = {{"lambda_p", c.loss.lambda_p}};
  const auto& t = c.train;
  j["train"] = {{"epochs", t.epochs},
                {"base_lr", t.base_lr},
                {"weight_decay", t.weight_decay},
                {"momentum", t.momentum},
                {"warmup_epochs", t.warmup_epochs},
                {"warmup_start_factor", t.warmup_start_factor},
                {"step_epochs", t.step_epochs},
                {"step_factor", t.step_factor},
                {"batch_size", t.batch_size},
                {"seed", t.seed},
                {"instances_per_proxy", t.instances_per_proxy},
                {"iters_per_epoch", t.iters_per_epoch},
                {"flip_prob", t.flip_prob},
                {"crop_padding", t.crop_padding},
                {"erase_prob", t.erase_prob}};
  return j;
}

ExperimentConfig from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config root must be an object");
  static const std::set<std::string> kSections{"backbone", "head", "association", "memory", "loss", "train"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!kSections.count(it.key())) throw ConfigError("unknown config section '" + it.key() + "'");
  }

  ExperimentConfig c;
  {
    SectionReader r(j, "backbone");
    auto& b = c.backbone;
    r.get("image_height", b.image_height);
    r.get("image_width", b.image_width);
    r.get("patch_size", b.patch_size);
    r.get("embed_dim", b.embed_dim);
    r.get("num_layers", b.num_layers);
    r.get("num_heads", b.num_heads);
    r.get("num_cameras", b.num_cameras);
    r.get("camera_weight", b.camera_weight);
    r.get("stem_channels", b.stem_channels);
    r.finish();
  }
  {
    SectionReader r(j, "head");
    std::string fusion;
    r.get("k1", c.head.k1);
    r.get("k2", c.head.k2);
    r.get("duplicate_last_layer", c.head.duplicate_last_layer);
    r.get("fusion_mode", fusion);
    r.finish();
    c.head.fusion_mode = parse_fusion_mode(fusion);
  }
  {
    SectionReader r(j, "association");
    auto& a = c.association;
    r.get("dbscan_eps", a.dbscan_eps);
    r.get("dbscan_min_samples", a.dbscan_min_samples);
    r.get("num_hard_negatives", a.num_hard_negatives);
    r.get("online_topk", a.online_topk);
    r.finish();
  }
  {
    SectionReader r(j, "memory");
    r.get("momentum", c.memory.momentum);
    r.get("temperature", c.memory.temperature);
    r.finish();
  }
  {
    SectionReader r(j, "loss");
    r.get("lambda_p", c.loss.lambda_p);
    r.finish();
  }
  {
    SectionReader r(j, "train");
    auto& t = c.train;
    r.get("epochs", t.epochs);
    r.get("base_lr", t.base_lr);
    r.get("weight_decay", t.weight_decay);
    r.get("momentum", t.momentum);
    r.get("warmup_epochs", t.warmup_epochs);
    r.get("warmup_start_factor", t.warmup_start_factor);
    r.get("step_epochs", t.step_epochs);
    r.get("step_factor", t.step_factor);
    r.get("batch_size", t.batch_size);
    r.get("seed", t.seed);
    r.get("instances_per_proxy", t.instances_per_proxy);
    r.get("iters_per_epoch", t.iters_per_epoch);
    r.get("flip_prob", t.flip_prob);
    r.get("crop_padding", t.crop_padding);
    r.get("erase_prob", t.erase_prob);
    r.finish();
  }
  c.validate();
  return c;
}

}  // namespace

void BackboneConfig::validate() const {
  require(image_height > 0 && image_width > 0, "image size must be positive");
  require(patch_size > 0 && patch_size % 2 == 0, "patch_size must be positive and even");
  require(image_height % patch_size == 0 && image_width % patch_size == 0,
          "image_height and image_width must be divisible by patch_size");
  require(embed_dim > 0 && num_heads > 0 && embed_dim % num_heads == 0,
          "embed_dim must be divisible by num_heads");
  require(num_layers >= 1, "num_layers must be >= 1");
  require(num_cameras >= 1, "num_cameras must be >= 1");
  require(stem_channels >= 2, "stem_channels must be >= 2 (split into IN and BN halves)");
  require(std::isfinite(camera_weight), "camera_weight must be finite");
}

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::avg: return "avg";
    case FusionMode::branch1: return "b1";
    case FusionMode::branch2: return "b2";
  }
  return "avg";
}

FusionMode parse_fusion_mode(const std::string& text) {
  if (text == "avg") return FusionMode::avg;
  if (text == "b1" || text == "branch1") return FusionMode::branch1;
  if (text == "b2" || text == "branch2") return FusionMode::branch2;
  throw ConfigError("unknown fusion mode '" + text + "' (expected avg|b1|b2)");
}

void HeadConfig::validate(int64_t grid_rows) const {
  require(k1 >= 1 && k2 >= 1, "k1 and k2 must be >= 1");
  require(k1 <= grid_rows && k2 <= grid_rows,
          "partition count exceeds grid rows (" + std::to_string(grid_rows) + ")");
}

void AssociationConfig::validate() const {
  require(dbscan_eps > 0, "dbscan_eps must be > 0");
  require(dbscan_min_samples >= 1, "dbscan_min_samples must be >= 1");
  require(num_hard_negatives >= 1, "num_hard_negatives must be >= 1");
  require(online_topk >= 0, "online_topk must be >= 0");
}

void MemoryConfig::validate() const {
  require(momentum >= 0 && momentum <= 1, "memory momentum must lie in [0, 1]");
  require(temperature > 0, "temperature must be > 0");
}

void LossWeights::validate() const {
  require(std::isfinite(lambda_p) && lambda_p >= 0, "lambda_p must be finite and >= 0");
}

void TrainConfig::validate() const {
  require(epochs >= 1, "epochs must be >= 1");
  require(base_lr > 0, "base_lr must be > 0");
  require(warmup_epochs >= 0 && warmup_epochs < epochs, "warmup_epochs must be < epochs");
  for (size_t i = 0; i < step_epochs.size(); ++i) {
    require(step_epochs[i] < epochs, "step_epochs must be < epochs");
    require(i == 0 || step_epochs[i] > step_epochs[i - 1], "step_epochs must be strictly increasing");
  }
  require(batch_size >= 2, "batch_size must be >= 2");
  require(instances_per_proxy >= 1 && batch_size % instances_per_proxy == 0,
          "batch_size must be a multiple of instances_per_proxy");
  require(iters_per_epoch >= 0, "iters_per_epoch must be >= 0");
  require(crop_padding >= 0, "crop_padding must be >= 0");
}

void ExperimentConfig::validate() const {
  backbone.validate();
  head.validate(backbone.grid_rows());
  association.validate();
  memory.validate();
  loss.validate();
  train.validate();
}

ExperimentConfig ExperimentConfig::toy() {
  ExperimentConfig c;
  c.backbone.camera_weight = 0.5;
  c.association.dbscan_eps = 0.15;
  c.train.epochs = 15;
  c.train.warmup_epochs = 2;
  c.train.step_epochs = {10};
  c.train.iters_per_epoch = 80;
  c.train.crop_padding = 4;
  return c;
}

ExperimentConfig ExperimentConfig::paper() {
  ExperimentConfig c;
  c.backbone.image_height = 384;
  c.backbone.image_width = 128;
  c.backbone.patch_size = 16;
  c.backbone.embed_dim = 384;
  c.backbone.num_layers = 12;
  c.backbone.num_heads = 6;
  c.backbone.num_cameras = 6;
  c.backbone.camera_weight = 3.0;
  c.backbone.stem_channels = 64;
  return c;
}

ExperimentConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const ExperimentConfig& config) { return to_json(config).dump(2) + "\n"; }

std::vector<std::string> config_lines(const ExperimentConfig& config) {
  std::vector<std::string> lines;
  const auto doc = to_json(config);
  for (const auto& [section, body] : doc.items()) {
    for (const auto& [key, value] : body.items()) lines.push_back(section + "." + key + " = " + value.dump());
  }
  return lines;
}

ExperimentConfig config_from_lines(const std::vector<std::string>& lines) {
  Json doc = Json::object();
  for (const auto& line : lines) {
    const auto eq = line.find(" = ");
    const auto dot = line.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw ConfigError("malformed config line '" + line + "'");
    }
    try {
      doc[line.substr(0, dot)][line.substr(dot + 1, eq - dot - 1)] = Json::parse(line.substr(eq + 3));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("malformed config value in '" + line + "'");
    }
  }
  return from_json(doc);
}

}  // namespace tmgf
