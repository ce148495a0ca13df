#pragma once

#include <cstdint>
#include <filesystem>

#include "tmgf/dataset.hpp"

namespace tmgf {

/// Labeled-by-construction pedestrian-like images. Each identity is a
/// head/torso/legs layout with its own colours and a torso band; each camera
/// applies a fixed colour cast, gain and background; each image gets a small
/// placement jitter plus i.i.d. Gaussian noise.
struct SyntheticSpec {
  int64_t num_ids = 16;
  int64_t num_cameras = 4;
  int64_t images_per_id_per_camera = 8;
  int64_t image_height = 64;
  int64_t image_width = 32;
  double noise_sigma = 0.08;
  double camera_shift = 0.1;
  /// Fraction of identities held out for query/gallery (disjoint from train).
  double test_id_fraction = 0.5;
  uint64_t seed = 0;

  void validate() const;
};

/// Pixels are quantized to 8 bits so that writing to disk and reloading is lossless.
/// Split: the first ids train; for each held-out id the first image of every
/// camera is a query and the rest go to the gallery. Throws InputError when a
/// query could not have a cross-camera positive.
DatasetManifest generate_synthetic(const SyntheticSpec& spec);

/// Writes one PNG per record plus `manifest.csv` into `dir`; records get relative paths.
void write_synthetic(const DatasetManifest& dataset, const std::filesystem::path& dir);

}  // namespace tmgf
