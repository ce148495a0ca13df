#include "tmgf/multigrain_head.hpp"

#include <string>

#include "tmgf/errors.hpp"

namespace tmgf {

namespace {
constexpr double kNormGuard = 1e-12;
}

std::vector<std::pair<int64_t, int64_t>> stripe_bounds(int64_t grid_rows, int64_t k) {
  if (k < 1 || k > grid_rows) {
    throw ConfigError("cannot split " + std::to_string(grid_rows) + " grid rows into " + std::to_string(k) +
                      " stripes");
  }
  std::vector<std::pair<int64_t, int64_t>> bounds;
  const int64_t base = grid_rows / k;
  const int64_t extra = grid_rows % k;
  int64_t begin = 0;
  for (int64_t s = 0; s < k; ++s) {
    const int64_t rows = base + (s < extra ? 1 : 0);
    bounds.emplace_back(begin, begin + rows);
    begin += rows;
  }
  return bounds;
}

std::vector<torch::Tensor> pool_parts(const TokenSequence& branch, int64_t k) {
  const auto batch = branch.tokens.size(0);
  const auto dim = branch.tokens.size(2);
  auto grid = branch.local().reshape({batch, branch.grid_rows, branch.grid_cols, dim});
  std::vector<torch::Tensor> parts;
  for (const auto& [begin, end] : stripe_bounds(branch.grid_rows, k)) {
    parts.push_back(grid.narrow(1, begin, end - begin).mean({1, 2}));
  }
  return parts;
}

torch::Tensor fuse_global(const torch::Tensor& cls1, const torch::Tensor& cls2, FusionMode mode) {
  switch (mode) {
    case FusionMode::avg: return (cls1 + cls2) / 2.0;
    case FusionMode::branch1: return cls1;
    case FusionMode::branch2: return cls2;
  }
  return (cls1 + cls2) / 2.0;
}

TmgfModelImpl::TmgfModelImpl(const BackboneConfig& backbone, const HeadConfig& head) : head_(head) {
  backbone.validate();
  head_.validate(backbone.grid_rows());
  backbone_ = register_module("backbone", Backbone(backbone));
  if (head_.duplicate_last_layer) {
    branch2_ = register_module("branch2", TransformerLayer(backbone.embed_dim, backbone.num_heads));
    branch2_->copy_parameters_from(*backbone_->layer(backbone.num_layers - 1));
  }
  for (int64_t h = 0; h < num_heads(); ++h) {
    head_norms_.push_back(register_module("head_bn" + std::to_string(h), torch::nn::BatchNorm1d(backbone.embed_dim)));
  }
}

TokenSequence TmgfModelImpl::penultimate(const torch::Tensor& images, const torch::Tensor& camera_ids,
                                         std::vector<torch::Tensor>* attentions) {
  const auto z0 = backbone_->tokenize(images, camera_ids);
  return backbone_->forward_layers(z0, 0, backbone_config().num_layers - 1, attentions);
}

std::pair<TokenSequence, TokenSequence> TmgfModelImpl::dual_branch_forward(const TokenSequence& penultimate) {
  const auto last = backbone_config().num_layers;
  auto branch1 = backbone_->forward_layers(penultimate, last - 1, last);
  if (!head_.duplicate_last_layer) return {branch1, branch1};
  auto tokens2 = branch2_->forward(penultimate.tokens);
  check_finite(tokens2, "at layer " + std::to_string(last) + " (branch 2)");
  return {branch1, TokenSequence{tokens2, penultimate.grid_rows, penultimate.grid_cols}};
}

MultiGrainFeatures TmgfModelImpl::forward_raw(const torch::Tensor& images, const torch::Tensor& camera_ids,
                                              std::vector<torch::Tensor>* attentions) {
  const auto z = penultimate(images, camera_ids, attentions);
  TokenSequence b1, b2;
  if (attentions) {
    // Branch-1 attention completes the L-layer trace used for rollout.
    const auto last = backbone_config().num_layers;
    b1 = backbone_->forward_layers(z, last - 1, last, attentions);
    b2 = head_.duplicate_last_layer ? TokenSequence{branch2_->forward(z.tokens), z.grid_rows, z.grid_cols} : b1;
  } else {
    std::tie(b1, b2) = dual_branch_forward(z);
  }
  auto parts1 = pool_parts(b1, head_.k1);
  auto parts2 = pool_parts(b2, head_.k2);
  parts1.insert(parts1.end(), parts2.begin(), parts2.end());
  return {fuse_global(b1.cls(), b2.cls(), head_.fusion_mode), torch::stack(parts1, 1)};
}

torch::Tensor TmgfModelImpl::normalize(const torch::Tensor& features, int64_t head_index) {
  if (head_index < 0 || head_index >= num_heads()) throw InputError("head index out of range");
  auto normed = head_norms_[static_cast<size_t>(head_index)]->forward(features);
  auto norms = normed.norm(2, -1, true);
  if ((norms < kNormGuard).any().item<bool>()) {
    throw NumericError("feature head " + std::to_string(head_index) + " produced a zero vector after BN");
  }
  return normed / norms;
}

MultiGrainFeatures TmgfModelImpl::forward(const torch::Tensor& images, const torch::Tensor& camera_ids) {
  auto raw = forward_raw(images, camera_ids);
  std::vector<torch::Tensor> parts;
  for (int64_t k = 0; k < raw.num_parts(); ++k) parts.push_back(normalize(raw.part(k), k + 1));
  return {normalize(raw.global, 0), torch::stack(parts, 1)};
}

}  // namespace tmgf
