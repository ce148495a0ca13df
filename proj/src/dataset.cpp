#include "tmgf/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "tmgf/errors.hpp"

namespace tmgf {

namespace {

std::atomic<int64_t> g_train_label_reads{0};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::string trim(std::string s) {
  const auto ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  s.erase(s.find_last_not_of(ws) + 1);
  return s;
}

int64_t parse_int(const std::string& text, const char* field, long line) {
  try {
    size_t used = 0;
    const auto value = std::stoll(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return value;
  } catch (const std::exception&) {
    throw ParseError(std::string("bad ") + field + " '" + text + "'", line);
  }
}

}  // namespace

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "train";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "query") return Split::query;
  if (text == "gallery") return Split::gallery;
  throw InputError("unknown split '" + text + "'");
}

ImageRecord::ImageRecord(std::string path_, std::optional<int64_t> person_id, int64_t camera, Split split_)
    : path(std::move(path_)), camera_id(camera), split(split_), person_id_(person_id) {}

std::optional<int64_t> ImageRecord::person_id() const {
  if (split == Split::train) g_train_label_reads.fetch_add(1, std::memory_order_relaxed);
  return person_id_;
}

bool ImageRecord::operator==(const ImageRecord& other) const {
  return path == other.path && person_id_ == other.person_id_ && camera_id == other.camera_id &&
         split == other.split;
}

int64_t train_label_reads() { return g_train_label_reads.load(); }

std::vector<int64_t> DatasetManifest::indices(Split split) const {
  std::vector<int64_t> out;
  for (size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == split) out.push_back(static_cast<int64_t>(i));
  }
  return out;
}

DatasetManifest parse_manifest(std::istream& in, int64_t num_cameras, const std::filesystem::path& root) {
  DatasetManifest manifest;
  manifest.root = root;
  std::string line;
  long line_no = 0;
  if (!std::getline(in, line)) throw ParseError("empty manifest", 1);
  ++line_no;
  if (trim(line) != "path,person_id,camera_id,split") {
    throw ParseError("expected header 'path,person_id,camera_id,split'", line_no);
  }
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_csv(trim(line));
    if (fields.size() != 4) throw ParseError("expected 4 fields, got " + std::to_string(fields.size()), line_no);
    for (auto& f : fields) f = trim(f);

    ImageRecord record;
    record.path = fields[0];
    if (record.path.empty()) throw ParseError("empty path", line_no);
    try {
      record.split = parse_split(fields[3]);
    } catch (const InputError& e) {
      throw ParseError(e.what(), line_no);
    }
    record.camera_id = parse_int(fields[2], "camera_id", line_no);
    if (!fields[1].empty()) record.set_person_id(parse_int(fields[1], "person_id", line_no));

    const auto where = " (line " + std::to_string(line_no) + ")";
    if (record.camera_id < 0 || record.camera_id >= num_cameras) {
      throw InputError("camera_id " + fields[2] + " outside [0, " + std::to_string(num_cameras) + ")" + where);
    }
    if (record.split != Split::train && fields[1].empty()) {
      throw InputError(to_string(record.split) + " row requires a person_id" + where);
    }
    if (!seen.insert(record.path).second) throw InputError("duplicate path '" + record.path + "'" + where);
    manifest.records.push_back(std::move(record));
  }
  return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& path, int64_t num_cameras) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open manifest " + path.string());
  return parse_manifest(in, num_cameras, path.parent_path());
}

void write_manifest(std::ostream& out, const DatasetManifest& manifest) {
  out << "path,person_id,camera_id,split\n";
  for (const auto& r : manifest.records) {
    const auto id = r.person_id_for_export();
    out << r.path << ',' << (id ? std::to_string(*id) : "") << ',' << r.camera_id << ',' << to_string(r.split)
        << '\n';
  }
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write manifest " + path.string());
  write_manifest(out, manifest);
}

ImageRecord parse_market_name(const std::string& filename, Split split) {
  static const std::regex pattern(R"(^(-?\d+)_c(\d+).*)");
  std::smatch m;
  const auto name = std::filesystem::path(filename).filename().string();
  if (!std::regex_match(name, m, pattern)) throw ParseError("not a Market-style image name: " + name);
  auto id = std::stoll(m[1].str());
  if (id == 0) id = -1;
  const auto camera = std::stoll(m[2].str()) - 1;
  return ImageRecord(filename, id, camera, split);
}

DatasetManifest import_market_directory(const std::filesystem::path& dir, Split split, int64_t num_cameras) {
  DatasetManifest manifest;
  manifest.root = dir;
  std::vector<std::string> names;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto ext = entry.path().extension().string();
    if (entry.is_regular_file() && (ext == ".jpg" || ext == ".png" || ext == ".jpeg")) {
      names.push_back(entry.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  for (const auto& name : names) {
    auto record = parse_market_name(name, split);
    if (record.camera_id < 0 || record.camera_id >= num_cameras) {
      throw InputError("camera out of range in " + name);
    }
    manifest.records.push_back(std::move(record));
  }
  return manifest;
}

torch::Tensor load_image(const std::filesystem::path& path, int64_t height, int64_t width) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw InputError("cannot read image " + path.string());
  if (bgr.rows != height || bgr.cols != width) {
    cv::resize(bgr, bgr, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0, cv::INTER_LINEAR);
  }
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {height, width, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat).div(255.0).contiguous();
}

void save_image(const std::filesystem::path& path, const torch::Tensor& image) {
  auto bytes = image.detach().to(torch::kCPU, torch::kFloat).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8);
  cv::Mat out;
  if (bytes.dim() == 2) {
    bytes = bytes.contiguous();
    out = cv::Mat(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)), CV_8UC1, bytes.data_ptr()).clone();
  } else if (bytes.dim() == 3 && bytes.size(0) == 3) {
    bytes = bytes.permute({1, 2, 0}).contiguous();
    cv::Mat rgb(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)), CV_8UC3, bytes.data_ptr());
    cv::cvtColor(rgb, out, cv::COLOR_RGB2BGR);
  } else {
    throw InputError("save_image expects [3,H,W] or [H,W]");
  }
  if (!cv::imwrite(path.string(), out)) throw InputError("cannot write image " + path.string());
}

torch::Tensor load_images(const DatasetManifest& manifest, const std::vector<int64_t>& indices, int64_t height,
                          int64_t width) {
  std::vector<torch::Tensor> images;
  images.reserve(indices.size());
  for (auto i : indices) {
    const auto& r = manifest.records.at(static_cast<size_t>(i));
    if (r.pixels.defined()) {
      if (r.pixels.size(1) != height || r.pixels.size(2) != width) {
        throw ConfigError("inline image size does not match the configured input size");
      }
      images.push_back(r.pixels.to(torch::kFloat));
    } else {
      const std::filesystem::path p(r.path);
      images.push_back(load_image(p.is_absolute() ? p : manifest.root / p, height, width));
    }
  }
  if (images.empty()) return torch::empty({0, 3, height, width});
  return torch::stack(images);
}

torch::Tensor camera_tensor(const DatasetManifest& manifest, const std::vector<int64_t>& indices) {
  std::vector<int64_t> cams;
  for (auto i : indices) cams.push_back(manifest.records.at(static_cast<size_t>(i)).camera_id);
  return torch::tensor(cams, torch::kLong);
}

torch::Tensor to_model_input(const torch::Tensor& pixels) { return (pixels - 0.5) / 0.5; }

}  // namespace tmgf
