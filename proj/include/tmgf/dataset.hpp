#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace tmgf {

enum class Split { train, query, gallery };

std::string to_string(Split split);
Split parse_split(const std::string& text);

/// One manifest row. The identity label is private so reads of train-split
/// labels can be counted: unsupervised training must never look at them.
class ImageRecord {
 public:
  ImageRecord() = default;
  ImageRecord(std::string path, std::optional<int64_t> person_id, int64_t camera_id, Split split);

  std::string path;
  int64_t camera_id = 0;
  Split split = Split::train;
  /// Optional inline pixels [3, H, W] in [0, 1]; takes precedence over `path`.
  torch::Tensor pixels;

  /// Counted access when split == train.
  std::optional<int64_t> person_id() const;
  void set_person_id(std::optional<int64_t> id) { person_id_ = id; }
  /// Uncounted read for serialization only.
  std::optional<int64_t> person_id_for_export() const { return person_id_; }

  bool operator==(const ImageRecord& other) const;

 private:
  std::optional<int64_t> person_id_;
};

/// Number of person_id() reads made on train-split records so far.
int64_t train_label_reads();

struct DatasetManifest {
  std::vector<ImageRecord> records;
  std::filesystem::path root;  // relative image paths resolve against this

  std::vector<int64_t> indices(Split split) const;
  bool operator==(const DatasetManifest& other) const { return records == other.records; }
};

/// Parses "path,person_id,camera_id,split" text with a header row. Throws
/// ParseError (with line number) on malformed rows and InputError on
/// validation failures (camera range, duplicate paths, missing query/gallery ids).
DatasetManifest parse_manifest(std::istream& in, int64_t num_cameras, const std::filesystem::path& root = {});
DatasetManifest load_manifest(const std::filesystem::path& path, int64_t num_cameras);
void write_manifest(std::ostream& out, const DatasetManifest& manifest);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Market1501-style name "0002_c1s1_000451_03.jpg": id 2, camera 0 (c1).
/// Id -1 ("-1_c1...") marks junk images; "0000" is treated as junk too.
ImageRecord parse_market_name(const std::string& filename, Split split);
/// Every image file in `dir` parsed with parse_market_name, sorted by name.
DatasetManifest import_market_directory(const std::filesystem::path& dir, Split split, int64_t num_cameras);

/// Reads an image as RGB float [3, height, width] in [0, 1], resizing when needed.
torch::Tensor load_image(const std::filesystem::path& path, int64_t height, int64_t width);
/// Writes [3, H, W] (RGB) or [H, W] (gray) data in [0, 1] as an 8-bit lossless image.
void save_image(const std::filesystem::path& path, const torch::Tensor& image);

/// Stacked pixels [n, 3, H, W] of the selected records.
torch::Tensor load_images(const DatasetManifest& manifest, const std::vector<int64_t>& indices, int64_t height,
                          int64_t width);
torch::Tensor camera_tensor(const DatasetManifest& manifest, const std::vector<int64_t>& indices);

/// Maps [0, 1] pixels to the model's input range.
torch::Tensor to_model_input(const torch::Tensor& pixels);

}  // namespace tmgf
