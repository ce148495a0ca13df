#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include <torch/torch.h>

namespace tmgf {

/// Identity and camera of one evaluation image. person_id == -1 marks junk.
struct ImageMeta {
  int64_t person_id = -1;
  int64_t camera_id = 0;
};

struct RetrievalResult {
  std::vector<double> average_precision;  // per query; NaN for invalid queries
  std::vector<char> valid;                // per query
  double mean_ap = 0.0;
  std::vector<double> cmc;  // cmc[k-1] = Rank-k hit rate over valid queries
  int64_t valid_query_count = 0;

  double rank(int64_t k) const { return cmc.at(static_cast<size_t>(k - 1)); }
};

/// Market1501-style retrieval protocol on cosine similarity. Gallery entries
/// sharing the query's id and camera are dropped, junk entries are ignored,
/// ties rank the lower gallery index first. Queries without any relevant
/// gallery entry are invalid and excluded from the averages.
RetrievalResult evaluate(const torch::Tensor& query, std::span<const ImageMeta> query_meta,
                         const torch::Tensor& gallery, std::span<const ImageMeta> gallery_meta,
                         int64_t max_rank = 10);

/// Fixed-format mAP / Rank-1/5/10 table.
void print_result_table(std::ostream& out, const RetrievalResult& result);
/// "query_index,valid,ap" rows.
void write_per_query_csv(std::ostream& out, const RetrievalResult& result);

struct RolloutMap {
  torch::Tensor map;          // [grid_rows, grid_cols], min-max normalized to [0,1]; zeros when degenerate
  torch::Tensor raw;          // cls-row values over local tokens before normalization
  torch::Tensor rollout;      // accumulated [T, T] matrix
  bool degenerate = false;    // constant map, normalization skipped
};

/// Attention rollout. Each layer's head-averaged attention A becomes
/// 0.5 A + 0.5 I, row-renormalized, and the product over layers is taken
/// (last layer on the left). `steps`, when given, receives every
/// intermediate accumulated matrix.
RolloutMap attention_rollout(std::span<const torch::Tensor> attentions, int64_t grid_rows, int64_t grid_cols,
                             std::vector<torch::Tensor>* steps = nullptr);

}  // namespace tmgf
