#pragma once

#include <utility>
#include <vector>

#include <torch/torch.h>

#include "tmgf/backbone.hpp"
#include "tmgf/config.hpp"

namespace tmgf {

/// Global feature [B, D] and part features [B, K, D]. Parts are ordered as
/// branch-1 stripes top to bottom, then branch-2 stripes top to bottom.
struct MultiGrainFeatures {
  torch::Tensor global;
  torch::Tensor parts;

  int64_t num_parts() const { return parts.size(1); }
  torch::Tensor part(int64_t k) const { return parts.select(1, k); }
};

/// Half-open grid-row ranges of K horizontal stripes. When rows % K != 0 the
/// first rows % K stripes take one extra row.
std::vector<std::pair<int64_t, int64_t>> stripe_bounds(int64_t grid_rows, int64_t k);

/// Mean-pools each horizontal stripe of the local-token grid. Returns K tensors [B, D].
std::vector<torch::Tensor> pool_parts(const TokenSequence& branch, int64_t k);

torch::Tensor fuse_global(const torch::Tensor& cls1, const torch::Tensor& cls2, FusionMode mode);

/// Backbone with its last layer duplicated into two branches, stripe pooling,
/// global-token fusion and one BN layer per feature head (index 0 = global,
/// 1..K = parts).
class TmgfModelImpl : public torch::nn::Module {
 public:
  TmgfModelImpl(const BackboneConfig& backbone, const HeadConfig& head);

  /// Both branches applied to the layer L-1 output. With duplication disabled
  /// the two results alias the single layer-L output.
  std::pair<TokenSequence, TokenSequence> dual_branch_forward(const TokenSequence& penultimate);

  /// Pre-normalization features.
  MultiGrainFeatures forward_raw(const torch::Tensor& images, const torch::Tensor& camera_ids,
                                 std::vector<torch::Tensor>* attentions = nullptr);
  /// BN + L2-normalized features.
  MultiGrainFeatures forward(const torch::Tensor& images, const torch::Tensor& camera_ids);

  /// BN of head `head_index` (training: batch stats, eval: running stats) then L2.
  /// Throws NumericError when a row collapses to zero.
  torch::Tensor normalize(const torch::Tensor& features, int64_t head_index);

  /// Runs the penultimate trunk, i.e. tokenize + layers 1..L-1.
  TokenSequence penultimate(const torch::Tensor& images, const torch::Tensor& camera_ids,
                            std::vector<torch::Tensor>* attentions = nullptr);

  Backbone& backbone() { return backbone_; }
  const HeadConfig& head_config() const { return head_; }
  const BackboneConfig& backbone_config() const { return backbone_->config(); }
  int64_t num_heads() const { return head_.num_parts() + 1; }

 private:
  HeadConfig head_;
  Backbone backbone_{nullptr};
  TransformerLayer branch2_{nullptr};
  std::vector<torch::nn::BatchNorm1d> head_norms_;
};
TORCH_MODULE(TmgfModel);

}  // namespace tmgf
