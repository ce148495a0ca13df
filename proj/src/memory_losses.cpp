#include "tmgf/memory_losses.hpp"

#include <iomanip>
#include <limits>

#include "tmgf/errors.hpp"

namespace tmgf {

namespace {
constexpr double kNormGuard = 1e-12;
}

ProxyMemory::ProxyMemory(torch::Tensor bank, double momentum, double temperature, int64_t head_id)
    : bank_(bank.detach().clone()), momentum_(momentum), temperature_(temperature), head_id_(head_id) {
  if (bank_.dim() != 2) throw InputError("memory bank must be [N_p, D]");
  if (momentum < 0 || momentum > 1) throw ConfigError("memory momentum must lie in [0, 1]");
  if (temperature <= 0) throw ConfigError("temperature must be > 0");
}

bool ProxyMemory::update(int64_t proxy, const torch::Tensor& feature) {
  if (proxy < 0 || proxy >= num_proxies()) throw InputError("proxy index out of range in memory update");
  torch::NoGradGuard no_grad;
  auto row = bank_[proxy];
  // mu * row + (1 - mu) * f, written so that f == row and mu == 1 are exact no-ops.
  auto mixed = row + (1.0 - momentum_) * (feature.detach().to(bank_.dtype()) - row);
  if (torch::equal(mixed, row)) return true;
  const double norm = mixed.norm().item<double>();
  if (norm < kNormGuard) {
    row.copy_(mixed);
    return false;
  }
  row.copy_(mixed / norm);
  return true;
}

ProxyMemory init_memory(const torch::Tensor& features, const ProxyLabeling& labeling, double momentum,
                        double temperature, int64_t head_id) {
  if (features.dim() != 2 || features.size(0) != labeling.num_images()) {
    throw InputError("init_memory needs one feature row per labeled image");
  }
  torch::NoGradGuard no_grad;
  auto bank = torch::zeros({labeling.num_proxies(), features.size(1)}, features.options());
  const auto groups = labeling.images_by_proxy();
  for (int64_t u = 0; u < labeling.num_proxies(); ++u) {
    const auto& members = groups[static_cast<size_t>(u)];
    if (members.empty()) throw LabelingError("empty proxy " + std::to_string(u));
    auto index = torch::tensor(members, torch::kLong);
    auto centroid = features.detach().index_select(0, index).mean(0);
    const double norm = centroid.norm().item<double>();
    if (norm < kNormGuard) throw NumericError("proxy " + std::to_string(u) + " has a zero centroid");
    bank[u].copy_(centroid / norm);
  }
  return ProxyMemory(bank, momentum, temperature, head_id);
}

torch::Tensor contrastive_loss_batch(const torch::Tensor& features, std::span<const ProxySets> sets,
                                     const ProxyMemory& memory) {
  const auto batch = features.size(0);
  if (static_cast<int64_t>(sets.size()) != batch) throw InputError("one proxy-set pair per anchor required");
  const auto np = memory.num_proxies();

  auto positive = torch::zeros({batch, np}, torch::kBool);
  auto member = torch::zeros({batch, np}, torch::kBool);
  auto pos_count = torch::zeros({batch}, features.options());
  auto pos_acc = positive.accessor<bool, 2>();
  auto mem_acc = member.accessor<bool, 2>();
  for (int64_t b = 0; b < batch; ++b) {
    const auto& s = sets[static_cast<size_t>(b)];
    if (s.positives.empty()) throw InputError("contrastive loss needs a non-empty positive set");
    for (auto p : s.positives) {
      if (p < 0 || p >= np) throw InputError("positive proxy out of range");
      pos_acc[b][p] = true;
      mem_acc[b][p] = true;
    }
    for (auto q : s.negatives) {
      if (q < 0 || q >= np) throw InputError("negative proxy out of range");
      if (pos_acc[b][q]) throw InputError("positive and negative proxy sets overlap");
      mem_acc[b][q] = true;
    }
    pos_count[b] = static_cast<double>(s.positives.size());
  }

  auto logits = features.matmul(memory.bank().detach().to(features.dtype()).t()) / memory.temperature();
  const auto inf = std::numeric_limits<double>::infinity();
  auto log_denominator = torch::where(member, logits, torch::full_like(logits, -inf)).logsumexp(1);
  auto positive_mean = torch::where(positive, logits, torch::zeros_like(logits)).sum(1) / pos_count;
  return log_denominator - positive_mean;
}

torch::Tensor contrastive_loss(const torch::Tensor& feature, std::span<const int64_t> positives,
                               std::span<const int64_t> negatives, const ProxyMemory& memory) {
  if (positives.empty()) throw InputError("contrastive loss needs a non-empty positive set");
  const ProxySets sets{{positives.begin(), positives.end()}, {negatives.begin(), negatives.end()}};
  return contrastive_loss_batch(feature.reshape({1, -1}), std::span(&sets, 1), memory).squeeze(0);
}

LossBreakdown total_loss(const MultiGrainFeatures& features, std::span<const ProxySets> offline,
                         std::span<const ProxySets> online, std::span<const ProxyMemory> memories, double lambda_p) {
  const auto parts = features.num_parts();
  if (static_cast<int64_t>(memories.size()) != parts + 1) throw InputError("need one memory per feature head");

  LossBreakdown out;
  out.global_offline = contrastive_loss_batch(features.global, offline, memories[0]).sum();
  out.global_online = contrastive_loss_batch(features.global, online, memories[0]).sum();
  auto part_sum = torch::zeros({}, features.global.options());
  for (int64_t k = 0; k < parts; ++k) {
    const auto& bank = memories[static_cast<size_t>(k + 1)];
    part_sum = part_sum + contrastive_loss_batch(features.part(k), offline, bank).sum() +
               contrastive_loss_batch(features.part(k), online, bank).sum();
  }
  out.part_term = lambda_p * part_sum / static_cast<double>(parts);
  out.total = out.global_offline + out.global_online + out.part_term;
  return out;
}

LossLog::LossLog(const std::filesystem::path& path) : out_(path) {
  if (!out_) throw InputError("cannot open loss log " + path.string());
  out_ << "epoch,step,global_offline,global_online,part_term,total\n";
}

void LossLog::append(int64_t epoch, int64_t step, const LossBreakdown& losses) {
  out_ << epoch << ',' << step << std::setprecision(9) << ',' << losses.global_offline.item<double>() << ','
       << losses.global_online.item<double>() << ',' << losses.part_term.item<double>() << ','
       << losses.total.item<double>() << '\n';
  out_.flush();
}

}  // namespace tmgf
