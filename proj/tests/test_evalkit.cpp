#include "testing.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "test_util.hpp"
#include "tmgf/errors.hpp"
#include "tmgf/evalkit.hpp"

using namespace tmgf;

namespace {

struct Instance {
  oracle::Matrix q, g;
  std::vector<oracle::Meta> qm, gm;
};

// Few ids and cameras so that exclusions, junk and exact similarity ties all occur.
Instance random_instance(std::mt19937_64& rng, int nq, int ng) {
  Instance r;
  std::uniform_int_distribution<int64_t> pid(-1, 5), cam(0, 2);
  r.q = oracle::lattice_unit_rows(rng, nq);
  r.g = oracle::lattice_unit_rows(rng, ng);
  for (int i = 0; i < nq; ++i) r.qm.push_back({std::max<int64_t>(0, pid(rng)), cam(rng)});
  for (int i = 0; i < ng; ++i) r.gm.push_back({pid(rng), cam(rng)});
  return r;
}

std::vector<ImageMeta> meta(const std::vector<oracle::Meta>& m) {
  std::vector<ImageMeta> out;
  for (const auto& x : m) out.push_back({x.pid, x.cam});
  return out;
}

RetrievalResult run(const Instance& x) {
  const auto qm = meta(x.qm), gm = meta(x.gm);
  return evaluate(to_tensor(x.q), qm, to_tensor(x.g), gm);
}

torch::Tensor uniform_attention(int64_t tokens) {
  return torch::full({2, tokens, tokens}, 1.0 / static_cast<double>(tokens), torch::kDouble);
}

}  // namespace

TEST_CASE("average precision worked example") {
  // Relevant items at ranks 1 and 3 of 5.
  auto q = torch::tensor({{1.0, 0.0}}, torch::kDouble);
  auto sims = std::vector<double>{0.9, 0.8, 0.7, 0.6, 0.5};
  auto g = torch::empty({5, 2}, torch::kDouble);
  for (int64_t i = 0; i < 5; ++i) {
    g[i][0] = sims[static_cast<size_t>(i)];
    g[i][1] = std::sqrt(1 - sims[static_cast<size_t>(i)] * sims[static_cast<size_t>(i)]);
  }
  const std::vector<ImageMeta> qm{{7, 0}};
  const std::vector<ImageMeta> gm{{7, 1}, {3, 1}, {7, 2}, {4, 1}, {5, 2}};
  const auto r = evaluate(q, qm, g, gm);
  CHECK(std::abs(r.average_precision[0] - 0.8333333333) < 1e-6);
  CHECK(r.mean_ap == r.average_precision[0]);
  CHECK(r.rank(1) == 1.0);
}

TEST_CASE("retrieval edge cases") {
  auto f = torch::tensor({{1.0, 0.0}}, torch::kDouble);
  SUBCASE("identical cross-camera positive") {
    const std::vector<ImageMeta> qm{{1, 0}}, gm{{1, 1}};
    const auto r = evaluate(f, qm, f, gm);
    CHECK(r.mean_ap == 1.0);
    CHECK(r.rank(1) == 1.0);
  }
  SUBCASE("only same id and camera") {
    const std::vector<ImageMeta> qm{{1, 0}}, gm{{1, 0}, {1, 0}};
    const auto r = evaluate(f, qm, torch::cat({f, f}), gm);
    CHECK(r.valid_query_count == 0);
    CHECK_FALSE(r.valid[0]);
    CHECK(std::isnan(r.average_precision[0]));
  }
  SUBCASE("single irrelevant gallery item") {
    const std::vector<ImageMeta> qm{{1, 0}}, gm{{2, 1}};
    CHECK(evaluate(f, qm, f, gm).valid_query_count == 0);
  }
  SUBCASE("junk gallery items are ignored") {
    auto g = torch::tensor({{1.0, 0.0}, {0.0, 1.0}}, torch::kDouble);
    const std::vector<ImageMeta> qm{{1, 0}}, gm{{-1, 1}, {1, 1}};
    CHECK(evaluate(f, qm, g, gm).mean_ap == 1.0);
  }
}

TEST_CASE("evaluate agrees with the naive reference") {
  std::mt19937_64 rng(53);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = random_instance(rng, 1 + static_cast<int>(rng() % 20), 1 + static_cast<int>(rng() % 100));
    const auto expected = oracle::evaluate(x.q, x.qm, x.g, x.gm, 10);
    const auto got = run(x);
    REQUIRE(got.average_precision.size() == expected.ap.size());
    CAPTURE(trial);
    for (size_t i = 0; i < expected.ap.size(); ++i) {
      CHECK(static_cast<bool>(got.valid[i]) == expected.valid[i]);
      if (expected.valid[i]) CHECK(std::abs(got.average_precision[i] - expected.ap[i]) < 1e-9);
    }
    CHECK(std::abs(got.mean_ap - expected.map) < 1e-9);
    for (size_t k = 0; k < 10; ++k) CHECK(std::abs(got.cmc[k] - expected.cmc[k]) < 1e-12);
    for (size_t k = 1; k < got.cmc.size(); ++k) CHECK(got.cmc[k] >= got.cmc[k - 1]);
    CHECK(got.mean_ap >= 0.0);
    CHECK(got.mean_ap <= 1.0);
  }
}

TEST_CASE("metrics are invariant under a common rotation") {
  std::mt19937_64 rng(59);
  for (int trial = 0; trial < 10; ++trial) {
    // Continuous features: a rotation must not create or break ties.
    Instance x;
    x.q = oracle::random_unit_rows(rng, 15, 8);
    x.g = oracle::random_unit_rows(rng, 60, 8);
    for (int i = 0; i < 15; ++i) x.qm.push_back({static_cast<int64_t>(rng() % 6), static_cast<int64_t>(rng() % 3)});
    for (int i = 0; i < 60; ++i) x.gm.push_back({static_cast<int64_t>(rng() % 6), static_cast<int64_t>(rng() % 3)});
    const auto base = run(x);
    auto [rot, r] = torch::linalg_qr(torch::randn({8, 8}, torch::kDouble));
    const auto qm = meta(x.qm), gm = meta(x.gm);
    const auto turned = evaluate(to_tensor(x.q).matmul(rot), qm, to_tensor(x.g).matmul(rot), gm);
    CHECK(std::abs(base.mean_ap - turned.mean_ap) < 1e-9);
    for (size_t k = 0; k < base.cmc.size(); ++k) CHECK(std::abs(base.cmc[k] - turned.cmc[k]) < 1e-9);
  }
}

TEST_CASE("result table and per-query csv") {
  RetrievalResult r;
  r.average_precision = {0.5, std::nan("")};
  r.valid = {1, 0};
  r.mean_ap = 0.5;
  r.cmc = std::vector<double>(10, 1.0);
  r.valid_query_count = 1;
  std::ostringstream table, csv;
  print_result_table(table, r);
  write_per_query_csv(csv, r);
  CHECK(table.str().find("mAP") != std::string::npos);
  CHECK(table.str().find("50.00") != std::string::npos);
  CHECK(csv.str().rfind("query_index,valid,ap\n0,1,0.5\n1,0,", 0) == 0);
}

TEST_CASE("attention rollout") {
  const int64_t rows = 4, cols = 2, tokens = rows * cols + 1;

  SUBCASE("identity attention is degenerate") {
    std::vector<torch::Tensor> attn(3, torch::eye(tokens).expand({2, tokens, tokens}));
    const auto m = attention_rollout(attn, rows, cols);
    CHECK(max_abs_diff(m.rollout, torch::eye(tokens)) < 1e-12);
    CHECK(max_abs_diff(m.raw, torch::zeros({rows, cols})) == 0.0);
    CHECK(m.degenerate);
    CHECK(max_abs_diff(m.map, torch::zeros({rows, cols})) == 0.0);
  }
  SUBCASE("one uniform layer gives a constant map") {
    const std::vector<torch::Tensor> attn{uniform_attention(tokens)};
    const auto m = attention_rollout(attn, rows, cols);
    CHECK(m.degenerate);
    CHECK(max_abs_diff(m.raw, torch::full({rows, cols}, 0.5 / static_cast<double>(tokens), torch::kDouble)) < 1e-12);
  }
  SUBCASE("random attention stays row-stochastic at every step") {
    torch::manual_seed(61);
    std::vector<torch::Tensor> attn;
    for (int l = 0; l < 6; ++l) attn.push_back(torch::softmax(3 * torch::randn({1, 4, tokens, tokens}), -1));
    std::vector<torch::Tensor> steps;
    const auto m = attention_rollout(attn, rows, cols, &steps);
    REQUIRE(steps.size() == 6);
    for (const auto& s : steps) {
      CHECK(max_abs_diff(s.sum(-1), torch::ones({tokens})) < 1e-6);
      CHECK((s >= 0).all().item<bool>());
    }
    CHECK_FALSE(m.degenerate);
    CHECK(m.map.min().item<double>() == 0.0);
    CHECK(m.map.max().item<double>() == doctest::Approx(1.0));
    // Last layer on the left.
    auto mix = [&](const torch::Tensor& a) {
      auto x = 0.5 * a.to(torch::kDouble).squeeze(0).mean(0) + 0.5 * torch::eye(tokens, torch::kDouble);
      return x / x.sum(-1, true);
    };
    CHECK(max_abs_diff(steps[1], mix(attn[1]).matmul(mix(attn[0]))) < 1e-12);
  }
  CHECK_THROWS_AS(attention_rollout(std::vector<torch::Tensor>{torch::ones({2, tokens, tokens + 1})}, rows, cols),
                  InputError);
  CHECK_THROWS_AS(attention_rollout(std::vector<torch::Tensor>{}, rows, cols), InputError);
}
