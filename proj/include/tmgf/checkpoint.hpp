#pragma once

#include <filesystem>

#include "tmgf/config.hpp"
#include "tmgf/multigrain_head.hpp"

namespace tmgf {

/// `<file>.manifest.txt` beside a checkpoint archive.
std::filesystem::path manifest_path_for(const std::filesystem::path& checkpoint);

/// Writes every parameter and buffer of `model` into a torch archive at `file`
/// and a plain-text manifest listing the config and each tensor's shape.
void save_checkpoint(const std::filesystem::path& file, TmgfModel& model, const ExperimentConfig& config);

struct LoadedCheckpoint {
  ExperimentConfig config;
  TmgfModel model{nullptr};
};

/// Rebuilds the model from the manifest config and loads the archive.
/// Throws ConfigError on any missing tensor or shape mismatch.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& file);

/// Loads archive tensors into an existing model with the same strict checks.
void load_parameters(const std::filesystem::path& file, TmgfModel& model);

}  // namespace tmgf
