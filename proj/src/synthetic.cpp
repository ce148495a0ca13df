#include "tmgf/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "tmgf/errors.hpp"

namespace tmgf {

namespace {

using Rgb = std::array<float, 3>;

struct Identity {
  Rgb head, upper, lower, band, shoes;
  double body_width;  // fraction of image width
  double waist;       // torso/legs boundary, fraction of height
  double band_top, band_height;
};

struct Camera {
  Rgb cast;
  double gain;
  Rgb background_top, background_bottom;
};

std::mt19937_64 make_rng(uint64_t seed, uint64_t tag, uint64_t index) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(tag),
                    static_cast<uint32_t>(index)};
  return std::mt19937_64(seq);
}

Rgb random_colour(std::mt19937_64& rng, float lo = 0.1f, float hi = 0.9f) {
  std::uniform_real_distribution<float> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

Identity make_identity(uint64_t seed, int64_t id) {
  auto rng = make_rng(seed, 1, static_cast<uint64_t>(id));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Identity p;
  p.head = random_colour(rng, 0.35f, 0.85f);
  p.upper = random_colour(rng);
  p.lower = random_colour(rng);
  p.band = random_colour(rng);
  p.shoes = random_colour(rng, 0.0f, 0.5f);
  p.body_width = 0.45 + 0.25 * u(rng);
  p.waist = 0.45 + 0.15 * u(rng);
  p.band_top = 0.2 + 0.2 * u(rng);
  p.band_height = 0.04 + 0.08 * u(rng);
  return p;
}

Camera make_camera(uint64_t seed, int64_t cam, double shift) {
  auto rng = make_rng(seed, 2, static_cast<uint64_t>(cam));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Camera c;
  for (auto& v : c.cast) v = static_cast<float>(shift * u(rng));
  c.gain = 1.0 + 0.5 * shift * u(rng);
  // Shared grey scene, tinted per camera.
  for (size_t i = 0; i < 3; ++i) {
    c.background_top[i] = static_cast<float>(0.5 + shift * u(rng));
    c.background_bottom[i] = static_cast<float>(0.4 + shift * u(rng));
  }
  return c;
}

// Scene colour at pixel (y, x) before camera and noise.
Rgb scene_pixel(const Identity& p, const Camera& cam, int64_t y, int64_t x, int64_t h, int64_t w, int64_t dy,
                int64_t dx) {
  const double fy = static_cast<double>(y - dy) / static_cast<double>(h);
  const double fx = static_cast<double>(x - dx) / static_cast<double>(w);
  const double half = p.body_width / 2.0;
  const double t = static_cast<double>(y) / static_cast<double>(h);
  Rgb background;
  for (int c = 0; c < 3; ++c) {
    background[static_cast<size_t>(c)] = static_cast<float>((1.0 - t) * cam.background_top[static_cast<size_t>(c)] +
                                                            t * cam.background_bottom[static_cast<size_t>(c)]);
  }
  if (fy < 0.02 || fy > 0.98) return background;
  if (fy < 0.16) return std::abs(fx - 0.5) < half * 0.45 ? p.head : background;
  if (std::abs(fx - 0.5) > half) return background;
  if (fy < p.waist) {
    const double band_start = 0.16 + p.band_top * (p.waist - 0.16);
    return (fy >= band_start && fy < band_start + p.band_height) ? p.band : p.upper;
  }
  if (fy > 0.92) return p.shoes;
  // A gap between the legs.
  if (std::abs(fx - 0.5) < half * 0.12) return background;
  return p.lower;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (num_ids < 2) throw InputError("synthetic data needs at least 2 identities (train and test)");
  if (num_cameras < 1 || images_per_id_per_camera < 1) throw InputError("synthetic counts must be >= 1");
  if (image_height < 8 || image_width < 8) throw InputError("synthetic images must be at least 8x8");
  if (noise_sigma < 0 || camera_shift < 0) throw InputError("noise_sigma and camera_shift must be >= 0");
  if (test_id_fraction <= 0 || test_id_fraction >= 1) throw InputError("test_id_fraction must lie in (0, 1)");
  if (num_cameras < 2 || images_per_id_per_camera < 2) {
    throw InputError("every query needs a cross-camera gallery positive: need >= 2 cameras and >= 2 images per camera");
  }
}

DatasetManifest generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const auto h = spec.image_height;
  const auto w = spec.image_width;
  const auto num_test = std::clamp<int64_t>(
      static_cast<int64_t>(std::llround(static_cast<double>(spec.num_ids) * spec.test_id_fraction)), 1,
      spec.num_ids - 1);
  const auto num_train = spec.num_ids - num_test;

  std::vector<Camera> cameras;
  for (int64_t c = 0; c < spec.num_cameras; ++c) cameras.push_back(make_camera(spec.seed, c, spec.camera_shift));

  DatasetManifest manifest;
  auto rng = make_rng(spec.seed, 3, 0);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise_sigma));
  const int64_t jitter_x = std::max<int64_t>(1, w / 16);
  const int64_t jitter_y = std::max<int64_t>(1, h / 32);
  std::uniform_int_distribution<int64_t> jx(-jitter_x, jitter_x), jy(-jitter_y, jitter_y);

  for (int64_t id = 0; id < spec.num_ids; ++id) {
    const auto person = make_identity(spec.seed, id);
    const bool is_train = id < num_train;
    for (int64_t cam = 0; cam < spec.num_cameras; ++cam) {
      const auto& camera = cameras[static_cast<size_t>(cam)];
      for (int64_t n = 0; n < spec.images_per_id_per_camera; ++n) {
        const auto dx = jx(rng), dy = jy(rng);
        auto pixels = torch::empty({3, h, w}, torch::kFloat);
        auto acc = pixels.accessor<float, 3>();
        for (int64_t y = 0; y < h; ++y) {
          for (int64_t x = 0; x < w; ++x) {
            const auto rgb = scene_pixel(person, camera, y, x, h, w, dy, dx);
            for (int64_t c = 0; c < 3; ++c) {
              float v = static_cast<float>(camera.gain) * rgb[static_cast<size_t>(c)] +
                        camera.cast[static_cast<size_t>(c)];
              if (spec.noise_sigma > 0) v += noise(rng);
              v = std::clamp(v, 0.0f, 1.0f);
              acc[c][y][x] = std::round(v * 255.0f) / 255.0f;
            }
          }
        }
        std::ostringstream name;
        name << "id" << std::setw(4) << std::setfill('0') << id << "_c" << cam << '_' << std::setw(4) << n << ".png";
        Split split = Split::train;
        if (!is_train) split = n == 0 ? Split::query : Split::gallery;
        ImageRecord record(name.str(), id, cam, split);
        record.pixels = pixels;
        manifest.records.push_back(std::move(record));
      }
    }
  }
  return manifest;
}

void write_synthetic(const DatasetManifest& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  DatasetManifest on_disk;
  on_disk.root = dir;
  for (const auto& record : dataset.records) {
    if (!record.pixels.defined()) throw InputError("synthetic record without pixels: " + record.path);
    save_image(dir / record.path, record.pixels);
    ImageRecord copy(record.path, record.person_id_for_export(), record.camera_id, record.split);
    on_disk.records.push_back(std::move(copy));
  }
  write_manifest(dir / "manifest.csv", on_disk);
}

}  // namespace tmgf
