#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace tmgf {

// Feature matrix file, little-endian:
//   bytes 0..7   magic "TMGFFEAT"
//   uint32       format version (1)
//   uint32       reserved, 0
//   int64        rows
//   int64        cols
//   float32[rows * cols] row-major

void write_feature_matrix(const std::filesystem::path& path, const torch::Tensor& features);
torch::Tensor read_feature_matrix(const std::filesystem::path& path);

struct FeatureRow {
  std::string image;
  std::optional<int64_t> person_id;
  int64_t camera_id = 0;
};

/// Sidecar "index,image,person_id,camera_id" CSV, one row per matrix row.
std::filesystem::path sidecar_path_for(const std::filesystem::path& matrix);
void write_feature_sidecar(const std::filesystem::path& path, const std::vector<FeatureRow>& rows);
std::vector<FeatureRow> read_feature_sidecar(const std::filesystem::path& path);

}  // namespace tmgf
