#pragma once

#include <vector>

#include <torch/torch.h>

#include "tmgf/config.hpp"

namespace tmgf {

/// Batched token matrix [B, N+1, D]. Row 0 is the cls token, rows 1..N are
/// the local tokens of a grid_rows x grid_cols patch grid in row-major order.
struct TokenSequence {
  torch::Tensor tokens;
  int64_t grid_rows = 0;
  int64_t grid_cols = 0;

  int64_t num_local() const { return grid_rows * grid_cols; }
  torch::Tensor cls() const { return tokens.select(1, 0); }
  torch::Tensor local() const { return tokens.narrow(1, 1, num_local()); }
};

/// Stride-2 3x3 convolution followed by IBN (instance norm on the first half
/// of the channels, batch norm on the rest) and ReLU. [B,3,H,W] -> [B,C,H/2,W/2].
class IbnStemImpl : public torch::nn::Module {
 public:
  explicit IbnStemImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& images);

 private:
  int64_t in_channels_;
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::InstanceNorm2d instance_norm_{nullptr};
  torch::nn::BatchNorm2d batch_norm_{nullptr};
};
TORCH_MODULE(IbnStem);

/// Pre-norm ViT block: z' = MSA(LN(z)) + z, z'' = MLP(LN(z')) + z'.
class TransformerLayerImpl : public torch::nn::Module {
 public:
  TransformerLayerImpl(int64_t dim, int64_t heads, int64_t mlp_ratio = 4);

  /// When `attention` is non-null it receives the softmax weights [B, heads, T, T].
  torch::Tensor forward(const torch::Tensor& z, torch::Tensor* attention = nullptr);

  /// Zeroes the output projections of MSA and MLP, turning the layer into the identity.
  void zero_output_projections();
  void copy_parameters_from(TransformerLayerImpl& other);

 private:
  int64_t heads_;
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Linear qkv_{nullptr}, proj_{nullptr}, fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(TransformerLayer);

class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const BackboneConfig& config);

  /// images [B,3,H,W], camera_ids int64 [B]. Returns z0 (pre-transformer tokens).
  TokenSequence tokenize(const torch::Tensor& images, const torch::Tensor& camera_ids);

  /// Runs layers [from, upto) (0-based, exclusive end). Appends per-layer
  /// attention weights to `attentions` when given. Throws NumericError on
  /// non-finite activations, naming the 1-based layer.
  TokenSequence forward_layers(const TokenSequence& z, int64_t from, int64_t upto,
                               std::vector<torch::Tensor>* attentions = nullptr);
  /// Runs the first `upto` layers (1 <= upto <= L).
  TokenSequence forward_layers(const TokenSequence& z0, int64_t upto,
                               std::vector<torch::Tensor>* attentions = nullptr);

  TransformerLayer& layer(int64_t index) { return layers_.at(static_cast<size_t>(index)); }
  const BackboneConfig& config() const { return config_; }

 private:
  BackboneConfig config_;
  IbnStem stem_{nullptr};
  torch::nn::Conv2d patch_proj_{nullptr};
  torch::Tensor cls_token_, pos_embed_, cam_embed_;
  std::vector<TransformerLayer> layers_;
};
TORCH_MODULE(Backbone);

/// Truncated normal (|x| <= 2 std) initialization used for embeddings and projections.
void trunc_normal_(torch::Tensor& tensor, double std = 0.02);

/// Throws NumericError if `t` has a NaN or Inf entry.
void check_finite(const torch::Tensor& t, const std::string& where);

}  // namespace tmgf
