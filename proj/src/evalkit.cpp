#include "tmgf/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>

#include "tmgf/errors.hpp"

namespace tmgf {

RetrievalResult evaluate(const torch::Tensor& query, std::span<const ImageMeta> query_meta,
                         const torch::Tensor& gallery, std::span<const ImageMeta> gallery_meta, int64_t max_rank) {
  if (query.dim() != 2 || gallery.dim() != 2 || query.size(1) != gallery.size(1)) {
    throw InputError("query and gallery must be [N, D] with matching D");
  }
  if (static_cast<size_t>(query.size(0)) != query_meta.size() ||
      static_cast<size_t>(gallery.size(0)) != gallery_meta.size()) {
    throw InputError("one meta record per feature row required");
  }
  if (max_rank < 1) throw InputError("max_rank must be >= 1");

  const auto num_query = query.size(0);
  const auto num_gallery = gallery.size(0);
  auto sims = query.to(torch::kDouble).matmul(gallery.to(torch::kDouble).t()).contiguous();
  const double* s = sims.data_ptr<double>();

  RetrievalResult out;
  out.average_precision.assign(static_cast<size_t>(num_query), std::numeric_limits<double>::quiet_NaN());
  out.valid.assign(static_cast<size_t>(num_query), 0);
  std::vector<int64_t> hits_at(static_cast<size_t>(max_rank), 0);
  double ap_sum = 0.0;

  std::vector<int64_t> order(static_cast<size_t>(num_gallery));
  for (int64_t qi = 0; qi < num_query; ++qi) {
    const double* row = s + qi * num_gallery;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [row](int64_t a, int64_t b) { return row[a] > row[b]; });

    const auto& q = query_meta[static_cast<size_t>(qi)];
    int64_t position = 0, relevant = 0, first_hit = -1;
    double precision_sum = 0.0;
    for (auto gi : order) {
      const auto& g = gallery_meta[static_cast<size_t>(gi)];
      if (g.person_id == -1) continue;
      if (g.person_id == q.person_id && g.camera_id == q.camera_id) continue;
      ++position;
      if (g.person_id == q.person_id) {
        ++relevant;
        precision_sum += static_cast<double>(relevant) / static_cast<double>(position);
        if (first_hit < 0) first_hit = position;
      }
    }
    if (relevant == 0) continue;

    const double ap = precision_sum / static_cast<double>(relevant);
    out.average_precision[static_cast<size_t>(qi)] = ap;
    out.valid[static_cast<size_t>(qi)] = 1;
    ++out.valid_query_count;
    ap_sum += ap;
    for (int64_t k = first_hit; k <= max_rank; ++k) ++hits_at[static_cast<size_t>(k - 1)];
  }

  out.cmc.assign(static_cast<size_t>(max_rank), 0.0);
  if (out.valid_query_count > 0) {
    const auto n = static_cast<double>(out.valid_query_count);
    out.mean_ap = ap_sum / n;
    for (int64_t k = 0; k < max_rank; ++k) out.cmc[static_cast<size_t>(k)] = static_cast<double>(hits_at[static_cast<size_t>(k)]) / n;
  }
  return out;
}

void print_result_table(std::ostream& out, const RetrievalResult& result) {
  auto pct = [](double v) { return v * 100.0; };
  auto rank = [&](int64_t k) { return k <= static_cast<int64_t>(result.cmc.size()) ? pct(result.rank(k)) : 0.0; };
  const auto flags = out.flags();
  const auto precision = out.precision();
  out << std::fixed << std::setprecision(2);
  out << "+---------+---------+---------+---------+\n";
  out << "|   mAP   | Rank-1  | Rank-5  | Rank-10 |\n";
  out << "+---------+---------+---------+---------+\n";
  out << "| " << std::setw(7) << pct(result.mean_ap) << " | " << std::setw(7) << rank(1) << " | " << std::setw(7)
      << rank(5) << " | " << std::setw(7) << rank(10) << " |\n";
  out << "+---------+---------+---------+---------+\n";
  out << "valid queries: " << result.valid_query_count << "/" << result.valid.size() << '\n';
  out.flags(flags);
  out.precision(precision);
}

void write_per_query_csv(std::ostream& out, const RetrievalResult& result) {
  out << "query_index,valid,ap\n" << std::setprecision(12);
  for (size_t i = 0; i < result.valid.size(); ++i) {
    out << i << ',' << int(result.valid[i]) << ',';
    if (result.valid[i]) out << result.average_precision[i];
    out << '\n';
  }
}

RolloutMap attention_rollout(std::span<const torch::Tensor> attentions, int64_t grid_rows, int64_t grid_cols,
                             std::vector<torch::Tensor>* steps) {
  if (attentions.empty()) throw InputError("rollout needs at least one attention matrix");
  const auto tokens = grid_rows * grid_cols + 1;

  torch::NoGradGuard no_grad;
  auto rollout = torch::eye(tokens, torch::kDouble);
  for (const auto& layer : attentions) {
    auto attn = layer.detach().to(torch::kCPU, torch::kDouble);
    while (attn.dim() > 3) {
      if (attn.size(0) != 1) throw InputError("rollout takes the attention of a single image");
      attn = attn.squeeze(0);
    }
    if (attn.dim() == 2) attn = attn.unsqueeze(0);
    if (attn.size(-1) != attn.size(-2)) throw InputError("attention matrices must be square");
    if (attn.size(-1) != tokens) throw InputError("attention size does not match the token grid");

    auto mixed = 0.5 * attn.mean(0) + 0.5 * torch::eye(tokens, torch::kDouble);
    mixed = mixed / mixed.sum(-1, true);
    rollout = mixed.matmul(rollout);
    if (steps) steps->push_back(rollout.clone());
  }

  RolloutMap out;
  out.rollout = rollout;
  out.raw = rollout[0].narrow(0, 1, tokens - 1).reshape({grid_rows, grid_cols}).clone();
  const double lo = out.raw.min().item<double>();
  const double hi = out.raw.max().item<double>();
  if (hi - lo <= 1e-12) {
    out.degenerate = true;
    out.map = torch::zeros_like(out.raw);
  } else {
    out.map = (out.raw - lo) / (hi - lo);
  }
  return out;
}

}  // namespace tmgf
