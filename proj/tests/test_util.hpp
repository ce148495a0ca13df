#pragma once

#include <vector>

#include <torch/torch.h>

#include "oracles.hpp"

inline torch::Tensor to_tensor(const oracle::Matrix& m) {
  auto t = torch::empty({static_cast<int64_t>(m.size()), static_cast<int64_t>(m.empty() ? 0 : m[0].size())},
                        torch::kDouble);
  for (size_t i = 0; i < m.size(); ++i) {
    for (size_t j = 0; j < m[i].size(); ++j) t[static_cast<int64_t>(i)][static_cast<int64_t>(j)] = m[i][j];
  }
  return t;
}

inline std::vector<double> to_vector(const torch::Tensor& t) {
  auto flat = t.detach().to(torch::kDouble).contiguous().view(-1);
  return {flat.data_ptr<double>(), flat.data_ptr<double>() + flat.numel()};
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kDouble) - b.to(torch::kDouble)).abs().max().item<double>();
}
