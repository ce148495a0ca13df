#include "tmgf/feature_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tmgf/errors.hpp"

namespace tmgf {

namespace {

constexpr char kMagic[8] = {'T', 'M', 'G', 'F', 'F', 'E', 'A', 'T'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "feature files are written in native little-endian order");

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw ParseError("truncated feature file header");
  return value;
}

}  // namespace

void write_feature_matrix(const std::filesystem::path& path, const torch::Tensor& features) {
  if (features.dim() != 2) throw InputError("feature matrix must be 2-D");
  auto data = features.detach().to(torch::kCPU, torch::kFloat).contiguous();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<uint32_t>(out, kVersion);
  put<uint32_t>(out, 0);
  put<int64_t>(out, data.size(0));
  put<int64_t>(out, data.size(1));
  out.write(reinterpret_cast<const char*>(data.data_ptr<float>()),
            static_cast<std::streamsize>(data.numel() * sizeof(float)));
}

torch::Tensor read_feature_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ParseError("not a feature matrix file: " + path.string());
  }
  if (take<uint32_t>(in) != kVersion) throw ParseError("unsupported feature file version");
  take<uint32_t>(in);
  const auto rows = take<int64_t>(in);
  const auto cols = take<int64_t>(in);
  if (rows < 0 || cols < 0) throw ParseError("negative feature matrix shape");
  auto data = torch::empty({rows, cols}, torch::kFloat);
  if (!in.read(reinterpret_cast<char*>(data.data_ptr<float>()), static_cast<std::streamsize>(data.numel() * sizeof(float)))) {
    throw ParseError("truncated feature matrix payload");
  }
  return data;
}

std::filesystem::path sidecar_path_for(const std::filesystem::path& matrix) { return matrix.string() + ".meta.csv"; }

void write_feature_sidecar(const std::filesystem::path& path, const std::vector<FeatureRow>& rows) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "index,image,person_id,camera_id\n";
  for (size_t i = 0; i < rows.size(); ++i) {
    out << i << ',' << rows[i].image << ',' << (rows[i].person_id ? std::to_string(*rows[i].person_id) : "") << ','
        << rows[i].camera_id << '\n';
  }
}

std::vector<FeatureRow> read_feature_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::string line;
  long line_no = 1;
  if (!std::getline(in, line) || line != "index,image,person_id,camera_id") throw ParseError("bad sidecar header", 1);
  std::vector<FeatureRow> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 4) throw ParseError("expected 4 fields", line_no);
    FeatureRow row;
    row.image = f[1];
    try {
      if (!f[2].empty()) row.person_id = std::stoll(f[2]);
      row.camera_id = std::stoll(f[3]);
    } catch (const std::exception&) {
      throw ParseError("bad integer field", line_no);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace tmgf
