#include "tmgf/backbone.hpp"

#include <cmath>
#include <string>

#include "tmgf/errors.hpp"

namespace tmgf {

void trunc_normal_(torch::Tensor& tensor, double std) {
  torch::NoGradGuard no_grad;
  tensor.normal_(0.0, std);
  // Redraw the tails until everything lies inside two standard deviations.
  for (int round = 0; round < 64; ++round) {
    auto outside = tensor.abs() > 2.0 * std;
    if (!outside.any().item<bool>()) return;
    auto redraw = torch::empty_like(tensor).normal_(0.0, std);
    tensor.copy_(torch::where(outside, redraw, tensor));
  }
  tensor.clamp_(-2.0 * std, 2.0 * std);
}

void check_finite(const torch::Tensor& t, const std::string& where) {
  if (!torch::isfinite(t).all().item<bool>()) throw NumericError("non-finite activations " + where);
}

IbnStemImpl::IbnStemImpl(int64_t channels) : in_channels_(channels / 2) {
  conv_ = register_module(
      "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, channels, 3).stride(2).padding(1).bias(false)));
  instance_norm_ = register_module(
      "instance_norm", torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(in_channels_).affine(true)));
  batch_norm_ = register_module("batch_norm", torch::nn::BatchNorm2d(channels - in_channels_));
}

torch::Tensor IbnStemImpl::forward(const torch::Tensor& images) {
  auto x = conv_->forward(images);
  auto halves = x.split_with_sizes({in_channels_, x.size(1) - in_channels_}, 1);
  x = torch::cat({instance_norm_->forward(halves[0]), batch_norm_->forward(halves[1])}, 1);
  return torch::relu(x);
}

TransformerLayerImpl::TransformerLayerImpl(int64_t dim, int64_t heads, int64_t mlp_ratio) : heads_(heads) {
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
  qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj_ = register_module("proj", torch::nn::Linear(dim, dim));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
  fc1_ = register_module("fc1", torch::nn::Linear(dim, mlp_ratio * dim));
  fc2_ = register_module("fc2", torch::nn::Linear(mlp_ratio * dim, dim));
  for (auto* linear : {&qkv_, &proj_, &fc1_, &fc2_}) {
    trunc_normal_((*linear)->weight);
    torch::NoGradGuard no_grad;
    (*linear)->bias.zero_();
  }
}

torch::Tensor TransformerLayerImpl::forward(const torch::Tensor& z, torch::Tensor* attention) {
  const auto batch = z.size(0);
  const auto tokens = z.size(1);
  const auto dim = z.size(2);
  const auto head_dim = dim / heads_;

  auto qkv = qkv_->forward(norm1_->forward(z)).reshape({batch, tokens, 3, heads_, head_dim}).permute({2, 0, 3, 1, 4});
  auto q = qkv[0], k = qkv[1], v = qkv[2];
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim)), -1);
  if (attention != nullptr) *attention = attn;
  auto mixed = torch::matmul(attn, v).transpose(1, 2).reshape({batch, tokens, dim});
  auto z_hat = proj_->forward(mixed) + z;
  return fc2_->forward(torch::gelu(fc1_->forward(norm2_->forward(z_hat)))) + z_hat;
}

void TransformerLayerImpl::zero_output_projections() {
  torch::NoGradGuard no_grad;
  proj_->weight.zero_();
  proj_->bias.zero_();
  fc2_->weight.zero_();
  fc2_->bias.zero_();
}

void TransformerLayerImpl::copy_parameters_from(TransformerLayerImpl& other) {
  torch::NoGradGuard no_grad;
  auto dst = named_parameters();
  auto src = other.named_parameters();
  for (const auto& item : src) dst[item.key()].copy_(item.value());
}

BackboneImpl::BackboneImpl(const BackboneConfig& config) : config_(config) {
  config_.validate();
  const auto dim = config_.embed_dim;
  const auto half_patch = config_.patch_size / 2;
  stem_ = register_module("stem", IbnStem(config_.stem_channels));
  patch_proj_ = register_module(
      "patch_proj",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(config_.stem_channels, dim, half_patch).stride(half_patch)));
  trunc_normal_(patch_proj_->weight);
  {
    torch::NoGradGuard no_grad;
    patch_proj_->bias.zero_();
  }

  cls_token_ = register_parameter("cls_token", torch::zeros({1, 1, dim}));
  pos_embed_ = register_parameter("pos_embed", torch::zeros({1, config_.num_tokens(), dim}));
  cam_embed_ = register_parameter("cam_embed", torch::zeros({config_.num_cameras, 1, dim}));
  trunc_normal_(cls_token_);
  trunc_normal_(pos_embed_);
  trunc_normal_(cam_embed_);

  for (int64_t i = 0; i < config_.num_layers; ++i) {
    layers_.push_back(register_module("layer" + std::to_string(i), TransformerLayer(dim, config_.num_heads)));
  }
}

TokenSequence BackboneImpl::tokenize(const torch::Tensor& images, const torch::Tensor& camera_ids) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != config_.image_height ||
      images.size(3) != config_.image_width) {
    throw ConfigError("image tensor must be [B,3," + std::to_string(config_.image_height) + "," +
                      std::to_string(config_.image_width) + "]");
  }
  if (camera_ids.dim() != 1 || camera_ids.size(0) != images.size(0)) {
    throw InputError("camera_ids must hold one id per image");
  }
  if (camera_ids.numel() > 0 &&
      (camera_ids.min().item<int64_t>() < 0 || camera_ids.max().item<int64_t>() >= config_.num_cameras)) {
    throw InputError("camera id out of range [0, " + std::to_string(config_.num_cameras) + ")");
  }

  const auto batch = images.size(0);
  auto patches = patch_proj_->forward(stem_->forward(images));  // [B, D, H/P, W/P]
  patches = patches.flatten(2).transpose(1, 2);                   // [B, N, D], row-major grid
  auto tokens = torch::cat({cls_token_.expand({batch, 1, config_.embed_dim}), patches}, 1);
  tokens = tokens + pos_embed_ + config_.camera_weight * cam_embed_.index_select(0, camera_ids);
  return {tokens, config_.grid_rows(), config_.grid_cols()};
}

TokenSequence BackboneImpl::forward_layers(const TokenSequence& z, int64_t from, int64_t upto,
                                           std::vector<torch::Tensor>* attentions) {
  if (from < 0 || upto > config_.num_layers || from > upto) {
    throw ConfigError("layer range [" + std::to_string(from) + ", " + std::to_string(upto) + ") out of bounds");
  }
  auto tokens = z.tokens;
  for (int64_t i = from; i < upto; ++i) {
    torch::Tensor attn;
    tokens = layers_[static_cast<size_t>(i)]->forward(tokens, attentions ? &attn : nullptr);
    check_finite(tokens, "at layer " + std::to_string(i + 1));
    if (attentions) attentions->push_back(attn);
  }
  return {tokens, z.grid_rows, z.grid_cols};
}

TokenSequence BackboneImpl::forward_layers(const TokenSequence& z0, int64_t upto,
                                           std::vector<torch::Tensor>* attentions) {
  if (upto < 1) throw ConfigError("forward_layers needs upto >= 1");
  return forward_layers(z0, 0, upto, attentions);
}

}  // namespace tmgf
