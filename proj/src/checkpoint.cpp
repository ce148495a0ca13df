#include "tmgf/checkpoint.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "tmgf/errors.hpp"

namespace tmgf {

namespace {

constexpr const char* kManifestHeader = "# tmgf checkpoint manifest v1";

std::map<std::string, torch::Tensor> state_of(TmgfModel& model) {
  std::map<std::string, torch::Tensor> state;
  for (const auto& p : model->named_parameters(true)) state.emplace(p.key(), p.value());
  for (const auto& b : model->named_buffers(true)) state.emplace(b.key(), b.value());
  return state;
}

std::string shape_string(const torch::Tensor& t) {
  std::ostringstream out;
  for (int64_t d = 0; d < t.dim(); ++d) out << (d ? " " : "") << t.size(d);
  return out.str();
}

}  // namespace

std::filesystem::path manifest_path_for(const std::filesystem::path& checkpoint) {
  return checkpoint.string() + ".manifest.txt";
}

void save_checkpoint(const std::filesystem::path& file, TmgfModel& model, const ExperimentConfig& config) {
  torch::serialize::OutputArchive archive;
  std::ofstream manifest(manifest_path_for(file));
  if (!manifest) throw InputError("cannot write checkpoint manifest for " + file.string());
  manifest << kManifestHeader << "\n[config]\n";
  for (const auto& line : config_lines(config)) manifest << line << '\n';
  manifest << "[tensors]\n";
  for (const auto& [name, tensor] : state_of(model)) {
    archive.write(name, tensor.detach());
    manifest << name << " : " << shape_string(tensor) << '\n';
  }
  archive.save_to(file.string());
}

void load_parameters(const std::filesystem::path& file, TmgfModel& model) {
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(file.string());
  } catch (const c10::Error& e) {
    throw InputError("cannot read checkpoint " + file.string());
  }
  torch::NoGradGuard no_grad;
  for (auto& [name, target] : state_of(model)) {
    torch::Tensor stored;
    if (!archive.try_read(name, stored)) throw ConfigError("checkpoint is missing tensor '" + name + "'");
    if (stored.sizes() != target.sizes()) {
      throw ConfigError("shape mismatch for '" + name + "': checkpoint [" + shape_string(stored) + "] vs model [" +
                        shape_string(target) + "]");
    }
    target.copy_(stored);
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(manifest_path_for(file));
  if (!in) throw InputError("missing checkpoint manifest " + manifest_path_for(file).string());
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) throw ConfigError("unrecognized checkpoint manifest");

  std::vector<std::string> config_text;
  std::map<std::string, std::string> shapes;
  std::string section;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      section = line;
      continue;
    }
    if (section == "[config]") {
      config_text.push_back(line);
    } else if (section == "[tensors]") {
      const auto sep = line.find(" : ");
      if (sep == std::string::npos) throw ConfigError("malformed tensor line in manifest: " + line);
      shapes[line.substr(0, sep)] = line.substr(sep + 3);
    }
  }

  LoadedCheckpoint out;
  out.config = config_from_lines(config_text);
  out.model = TmgfModel(out.config.backbone, out.config.head);
  const auto state = state_of(out.model);
  for (const auto& [name, tensor] : state) {
    auto it = shapes.find(name);
    if (it == shapes.end()) throw ConfigError("manifest lacks tensor '" + name + "'");
    if (it->second != shape_string(tensor)) {
      throw ConfigError("manifest shape mismatch for '" + name + "': [" + it->second + "] vs model [" +
                        shape_string(tensor) + "]");
    }
  }
  if (shapes.size() != state.size()) throw ConfigError("manifest lists tensors the model does not have");
  load_parameters(file, out.model);
  return out;
}

}  // namespace tmgf
