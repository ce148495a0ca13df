#pragma once

#include <filesystem>
#include <fstream>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "tmgf/association.hpp"
#include "tmgf/multigrain_head.hpp"

namespace tmgf {

/// Unit-norm proxy centroids [N_p, D] for one feature head (0 = global, k = part k).
class ProxyMemory {
 public:
  ProxyMemory(torch::Tensor bank, double momentum, double temperature, int64_t head_id = 0);

  /// row <- mu * row + (1 - mu) * feature, then renormalized. Returns false
  /// (and leaves the raw, unnormalized row in place) when the result has zero norm.
  bool update(int64_t proxy, const torch::Tensor& feature);

  const torch::Tensor& bank() const { return bank_; }
  int64_t num_proxies() const { return bank_.size(0); }
  double momentum() const { return momentum_; }
  double temperature() const { return temperature_; }
  int64_t head_id() const { return head_id_; }

 private:
  torch::Tensor bank_;
  double momentum_;
  double temperature_;
  int64_t head_id_;
};

/// bank[u] = normalized mean of the features of proxy u's images. `features`
/// is [N_I, D], one row per image of the labeling.
ProxyMemory init_memory(const torch::Tensor& features, const ProxyLabeling& labeling, double momentum,
                        double temperature, int64_t head_id = 0);

/// -(1/|P|) sum_{u in P} log( S(u,f) / (sum_P S + sum_Q S) ), S(u,f) = exp(bank[u].f / tau).
/// Differentiable in `feature` only; the bank is treated as a constant.
torch::Tensor contrastive_loss(const torch::Tensor& feature, std::span<const int64_t> positives,
                               std::span<const int64_t> negatives, const ProxyMemory& memory);

/// Per-anchor losses [B] for features [B, D] and one ProxySets per anchor.
torch::Tensor contrastive_loss_batch(const torch::Tensor& features, std::span<const ProxySets> sets,
                                     const ProxyMemory& memory);

struct LossBreakdown {
  torch::Tensor global_offline;
  torch::Tensor global_online;
  torch::Tensor part_term;  // lambda_p / K * sum_k (off + on)
  torch::Tensor total;
};

/// Batch objective summed over anchors. Part heads reuse the global P/Q sets.
/// `memories` holds the global bank first, then one bank per part.
LossBreakdown total_loss(const MultiGrainFeatures& features, std::span<const ProxySets> offline,
                         std::span<const ProxySets> online, std::span<const ProxyMemory> memories, double lambda_p);

/// Appends "epoch,step,global_offline,global_online,part_term,total" rows.
class LossLog {
 public:
  explicit LossLog(const std::filesystem::path& path);
  void append(int64_t epoch, int64_t step, const LossBreakdown& losses);

 private:
  std::ofstream out_;
};

}  // namespace tmgf
