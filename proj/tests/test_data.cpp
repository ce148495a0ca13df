#include "testing.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_util.hpp"
#include "tmgf/dataset.hpp"
#include "tmgf/errors.hpp"
#include "tmgf/feature_io.hpp"
#include "tmgf/synthetic.hpp"

using namespace tmgf;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("tmgf_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

DatasetManifest parse(const std::string& text, int64_t cams = 4) {
  std::istringstream in(text);
  return parse_manifest(in, cams);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("manifest parsing") {
  const auto m = parse(
      "path,person_id,camera_id,split\n"
      "a.png,,0,train\n"
      "b.png,3,1,query\n"
      "c.png,-1,3,gallery\n");
  REQUIRE(m.records.size() == 3);
  CHECK(m.records[0].person_id_for_export() == std::nullopt);
  CHECK(m.records[1].person_id() == 3);
  CHECK(m.records[2].person_id() == -1);
  CHECK(m.indices(Split::query) == std::vector<int64_t>{1});
  CHECK(m.indices(Split::train) == std::vector<int64_t>{0});

  CHECK_THROWS_AS(parse("path,person_id,camera_id,split\na.png,1,4,train\n"), InputError);
  CHECK_THROWS_AS(parse("path,person_id,camera_id,split\na.png,,1,query\n"), InputError);
  CHECK_THROWS_AS(parse("path,person_id,camera_id,split\na.png,1,1,train\na.png,2,1,train\n"), InputError);
  CHECK_THROWS_AS(parse("path,id,cam,split\n"), ParseError);
  try {
    parse("path,person_id,camera_id,split\na.png,1,1,train\nb.png,x,1,train\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
    CHECK(std::string(e.what()).rfind("line 3", 0) == 0);
  }
  CHECK_THROWS_AS(parse("path,person_id,camera_id,split\na.png,1,1,validation\n"), ParseError);
  CHECK_THROWS_AS(parse("path,person_id,camera_id,split\na.png,1,1\n"), ParseError);
}

TEST_CASE("manifest round trip") {
  const auto dir = scratch("manifest");
  DatasetManifest m;
  m.records.emplace_back("x/a.png", std::nullopt, 0, Split::train);
  m.records.emplace_back("x/b.png", 12, 2, Split::train);
  m.records.emplace_back("y/c.png", 4, 1, Split::query);
  m.records.emplace_back("y/d.png", -1, 3, Split::gallery);
  write_manifest(dir / "m.csv", m);
  const auto back = load_manifest(dir / "m.csv", 4);
  CHECK(back == m);
  CHECK(back.root == dir);
}

TEST_CASE("market-style names") {
  const auto r = parse_market_name("0002_c1s1_000451_03.jpg", Split::gallery);
  CHECK(r.person_id() == 2);
  CHECK(r.camera_id == 0);
  CHECK(parse_market_name("-1_c3s2_000100_01.jpg", Split::gallery).person_id() == -1);
  CHECK(parse_market_name("0000_c6s1_000001_01.jpg", Split::gallery).person_id() == -1);
  CHECK(parse_market_name("1501_c6s4_001902_01.jpg", Split::query).camera_id == 5);
  CHECK_THROWS_AS(parse_market_name("Thumbs.db", Split::train), ParseError);
}

TEST_CASE("label reads are counted on train rows only") {
  ImageRecord train("a", 5, 0, Split::train), query("b", 5, 0, Split::query);
  const auto before = train_label_reads();
  (void)query.person_id();
  (void)train.person_id_for_export();
  CHECK(train_label_reads() == before);
  (void)train.person_id();
  CHECK(train_label_reads() == before + 1);
}

TEST_CASE("synthetic generator") {
  SyntheticSpec spec;
  const auto a = generate_synthetic(spec);
  CHECK(a.records.size() == 16 * 4 * 8);
  CHECK(a.indices(Split::train).size() == 8 * 4 * 8);
  CHECK(a.indices(Split::query).size() == 8 * 4);
  CHECK(a.indices(Split::gallery).size() == 8 * 4 * 7);

  SUBCASE("every query has a cross-camera positive") {
    for (auto q : a.indices(Split::query)) {
      const auto& qr = a.records[static_cast<size_t>(q)];
      bool found = false;
      for (auto g : a.indices(Split::gallery)) {
        const auto& gr = a.records[static_cast<size_t>(g)];
        found = found || (gr.person_id() == qr.person_id() && gr.camera_id != qr.camera_id);
      }
      CHECK(found);
    }
  }
  SUBCASE("same seed gives identical pixels; another seed does not") {
    const auto b = generate_synthetic(spec);
    for (size_t i = 0; i < a.records.size(); ++i) CHECK(torch::equal(a.records[i].pixels, b.records[i].pixels));
    spec.seed = 1;
    const auto c = generate_synthetic(spec);
    CHECK_FALSE(torch::equal(a.records[0].pixels, c.records[0].pixels));
  }
  SUBCASE("noise-free shift-free images of an id are nearly identical") {
    spec.noise_sigma = 0.0;
    spec.camera_shift = 0.0;
    const auto d = generate_synthetic(spec);
    // Only the placement jitter and the camera background differ.
    const auto& p0 = d.records[0].pixels;
    const auto& p1 = d.records[1].pixels;
    CHECK((p0 - p1).abs().mean().item<double>() < 0.1);
  }
  SUBCASE("invalid specs") {
    spec.num_cameras = 1;
    CHECK_THROWS_AS(generate_synthetic(spec), InputError);
    spec = SyntheticSpec{};
    spec.noise_sigma = -1;
    CHECK_THROWS_AS(generate_synthetic(spec), InputError);
  }
}

TEST_CASE("synthetic identities are separable under a random linear probe") {
  SyntheticSpec spec;
  const auto d = generate_synthetic(spec);
  torch::manual_seed(67);
  const auto dims = 3 * spec.image_height * spec.image_width;
  auto probe = torch::randn({dims, 32}, torch::kDouble) / std::sqrt(static_cast<double>(dims));
  std::vector<torch::Tensor> rows;
  std::vector<int64_t> ids;
  for (const auto& r : d.records) {
    rows.push_back(r.pixels.to(torch::kDouble).flatten());
    ids.push_back(*r.person_id_for_export());
  }
  auto z = torch::stack(rows).matmul(probe);
  auto dist = torch::cdist(z, z);
  auto same = torch::tensor(ids).unsqueeze(1).eq(torch::tensor(ids).unsqueeze(0));
  auto self = torch::eye(static_cast<int64_t>(ids.size()), torch::kBool);
  const double intra = dist.masked_select(same & ~self).mean().item<double>();
  const double inter = dist.masked_select(~same).mean().item<double>();
  CHECK(inter > intra);
}

TEST_CASE("synthetic data and images survive a disk round trip") {
  const auto dir = scratch("synth");
  SyntheticSpec spec;
  spec.num_ids = 4;
  spec.images_per_id_per_camera = 2;
  spec.num_cameras = 2;
  const auto d = generate_synthetic(spec);
  write_synthetic(d, dir);
  const auto m = load_manifest(dir / "manifest.csv", 2);
  REQUIRE(m.records.size() == d.records.size());
  for (size_t i = 0; i < m.records.size(); ++i) {
    CHECK(m.records[i].path == d.records[i].path);
    CHECK(m.records[i].person_id_for_export() == d.records[i].person_id_for_export());
    const auto img = load_image(dir / m.records[i].path, spec.image_height, spec.image_width);
    CHECK(max_abs_diff(img, d.records[i].pixels) < 1e-6);
  }
  const auto all = load_images(m, {0, 3}, spec.image_height, spec.image_width);
  CHECK(all.sizes() == std::vector<int64_t>{2, 3, 64, 32});
  CHECK(torch::equal(camera_tensor(m, {0, 3}), torch::tensor({m.records[0].camera_id, m.records[3].camera_id})));
  // Writing twice is byte-identical.
  const auto first = slurp(dir / m.records[0].path);
  write_synthetic(d, dir);
  CHECK(slurp(dir / m.records[0].path) == first);
  CHECK_THROWS_AS(load_image(dir / "missing.png", 64, 32), InputError);
}

TEST_CASE("market directory import") {
  const auto dir = scratch("market");
  const auto img = torch::rand({3, 16, 8});
  for (const auto* name : {"0002_c1s1_000451_03.png", "0001_c2s1_000100_01.png", "-1_c1s1_000001_01.png"}) {
    save_image(dir / name, img);
  }
  std::ofstream(dir / "readme.txt") << "x";
  const auto m = import_market_directory(dir, Split::gallery, 6);
  REQUIRE(m.records.size() == 3);
  CHECK(m.records[0].path == "-1_c1s1_000001_01.png");
  CHECK(m.records[1].person_id() == 1);
  CHECK(m.records[1].camera_id == 1);
}

TEST_CASE("feature matrix and sidecar") {
  const auto dir = scratch("features");
  auto f = torch::randn({7, 5});
  write_feature_matrix(dir / "f.bin", f);
  CHECK(torch::equal(read_feature_matrix(dir / "f.bin"), f));
  CHECK(fs::file_size(dir / "f.bin") == 8 + 4 + 4 + 8 + 8 + 7 * 5 * 4);

  const std::vector<FeatureRow> rows{{"a.png", std::nullopt, 0}, {"b.png", 3, 2}};
  write_feature_sidecar(sidecar_path_for(dir / "f.bin"), rows);
  const auto back = read_feature_sidecar(sidecar_path_for(dir / "f.bin"));
  REQUIRE(back.size() == 2);
  CHECK(back[0].image == "a.png");
  CHECK(back[0].person_id == std::nullopt);
  CHECK(back[1].person_id == 3);
  CHECK(back[1].camera_id == 2);

  std::ofstream(dir / "bad.bin") << "NOTAFEATUREFILE";
  CHECK_THROWS_AS(read_feature_matrix(dir / "bad.bin"), ParseError);
}
