#include "tmgf/association.hpp"

#include <algorithm>
#include <deque>
#include <map>
#include <numeric>
#include <ostream>

#include "tmgf/errors.hpp"

namespace tmgf {

namespace {

std::vector<double> to_vector(const torch::Tensor& t) {
  auto flat = t.detach().to(torch::kCPU, torch::kDouble).contiguous().view(-1);
  return {flat.data_ptr<double>(), flat.data_ptr<double>() + flat.numel()};
}

// Indices ordered by similarity descending, lower index first on ties.
std::vector<int64_t> rank_by_similarity(std::span<const double> sims, const std::vector<char>& excluded) {
  std::vector<int64_t> order;
  for (int64_t u = 0; u < static_cast<int64_t>(sims.size()); ++u) {
    if (!excluded[static_cast<size_t>(u)]) order.push_back(u);
  }
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) { return sims[a] > sims[b]; });
  return order;
}

std::vector<int64_t> hardest_negatives(std::span<const double> sims, const std::vector<int64_t>& positives,
                                       int64_t count) {
  std::vector<char> excluded(sims.size(), 0);
  for (auto p : positives) excluded[static_cast<size_t>(p)] = 1;
  auto order = rank_by_similarity(sims, excluded);
  if (static_cast<int64_t>(order.size()) > count) order.resize(static_cast<size_t>(count));
  return order;
}

void check_proxy(int64_t proxy, const ProxyLabeling& labeling, size_t num_sims) {
  if (proxy < 0 || proxy >= labeling.num_proxies()) throw InputError("anchor has no valid proxy (outlier?)");
  if (num_sims != static_cast<size_t>(labeling.num_proxies())) {
    throw InputError("similarity vector length does not match proxy count");
  }
}

}  // namespace

int64_t ClusterAssignment::num_outliers() const {
  return std::count(labels.begin(), labels.end(), kOutlier);
}

ClusterAssignment dbscan_cosine(const torch::Tensor& features, double eps, int64_t min_samples) {
  if (features.dim() != 2) throw InputError("dbscan expects a [N, D] feature matrix");
  const auto n = features.size(0);
  auto x = features.detach().to(torch::kCPU, torch::kDouble).contiguous();
  auto dist = (1.0 - x.matmul(x.t())).contiguous();
  const double* d = dist.data_ptr<double>();

  std::vector<std::vector<int64_t>> neighbours(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      if (d[i * n + j] <= eps) neighbours[static_cast<size_t>(i)].push_back(j);
    }
  }
  std::vector<char> core(static_cast<size_t>(n), 0);
  for (int64_t i = 0; i < n; ++i) {
    core[static_cast<size_t>(i)] = static_cast<int64_t>(neighbours[static_cast<size_t>(i)].size()) >= min_samples;
  }

  ClusterAssignment out;
  out.labels.assign(static_cast<size_t>(n), kOutlier);
  // Components of the core graph, seeded in index order.
  for (int64_t seed = 0; seed < n; ++seed) {
    if (!core[static_cast<size_t>(seed)] || out.labels[static_cast<size_t>(seed)] != kOutlier) continue;
    const auto id = out.num_clusters++;
    std::deque<int64_t> frontier{seed};
    out.labels[static_cast<size_t>(seed)] = id;
    while (!frontier.empty()) {
      const auto p = frontier.front();
      frontier.pop_front();
      for (auto q : neighbours[static_cast<size_t>(p)]) {
        if (core[static_cast<size_t>(q)] && out.labels[static_cast<size_t>(q)] == kOutlier) {
          out.labels[static_cast<size_t>(q)] = id;
          frontier.push_back(q);
        }
      }
    }
  }
  // Border points; neighbour lists are ascending so the first core hit is the lowest index.
  for (int64_t i = 0; i < n; ++i) {
    if (core[static_cast<size_t>(i)]) continue;
    for (auto q : neighbours[static_cast<size_t>(i)]) {
      if (core[static_cast<size_t>(q)]) {
        out.labels[static_cast<size_t>(i)] = out.labels[static_cast<size_t>(q)];
        break;
      }
    }
  }
  return out;
}

ClusterAssignment cluster(const torch::Tensor& features, const AssociationConfig& config) {
  config.validate();
  auto out = dbscan_cosine(features, config.dbscan_eps, config.dbscan_min_samples);
  if (out.num_clusters == 0) {
    throw LabelingError("no clusters: all " + std::to_string(out.labels.size()) +
                        " images are outliers (try a larger dbscan_eps)");
  }
  return out;
}

std::vector<std::vector<int64_t>> ProxyLabeling::proxies_by_cluster() const {
  std::vector<std::vector<int64_t>> groups(static_cast<size_t>(num_clusters));
  for (int64_t u = 0; u < num_proxies(); ++u) groups[static_cast<size_t>(proxy_cluster[static_cast<size_t>(u)])].push_back(u);
  return groups;
}

std::vector<std::vector<int64_t>> ProxyLabeling::images_by_proxy() const {
  std::vector<std::vector<int64_t>> groups(static_cast<size_t>(num_proxies()));
  for (int64_t i = 0; i < num_images(); ++i) {
    const auto p = pseudo_label[static_cast<size_t>(i)];
    if (p != kOutlier) groups[static_cast<size_t>(p)].push_back(i);
  }
  return groups;
}

void ProxyLabeling::validate(std::span<const int64_t> camera_ids) const {
  if (camera_ids.size() != pseudo_label.size() || image_cluster.size() != pseudo_label.size()) {
    throw LabelingError("labeling size mismatch");
  }
  std::vector<int64_t> counts(static_cast<size_t>(num_proxies()), 0);
  for (size_t i = 0; i < pseudo_label.size(); ++i) {
    const auto p = pseudo_label[i];
    if (p == kOutlier) {
      if (image_cluster[i] != kOutlier) throw LabelingError("clustered image without a proxy");
      continue;
    }
    if (p < 0 || p >= num_proxies()) throw LabelingError("proxy index out of range");
    if (proxy_camera[static_cast<size_t>(p)] != camera_ids[i]) throw LabelingError("proxy mixes cameras");
    if (proxy_cluster[static_cast<size_t>(p)] != image_cluster[i]) throw LabelingError("proxy mixes clusters");
    ++counts[static_cast<size_t>(p)];
  }
  for (auto c : counts) {
    if (c == 0) throw LabelingError("empty proxy");
  }
}

ProxyLabeling split_camera_proxies(const ClusterAssignment& clusters, std::span<const int64_t> camera_ids) {
  if (camera_ids.size() != clusters.labels.size()) throw InputError("one camera id per image required");
  ProxyLabeling out;
  out.image_cluster = clusters.labels;
  out.num_clusters = clusters.num_clusters;

  std::map<std::pair<int64_t, int64_t>, int64_t> index;  // (cluster, camera) -> proxy
  for (size_t i = 0; i < camera_ids.size(); ++i) {
    if (clusters.labels[i] != kOutlier) index.emplace(std::pair{clusters.labels[i], camera_ids[i]}, 0);
  }
  for (auto& [key, proxy] : index) {
    proxy = static_cast<int64_t>(out.proxy_cluster.size());
    out.proxy_cluster.push_back(key.first);
    out.proxy_camera.push_back(key.second);
  }
  out.pseudo_label.resize(camera_ids.size(), kOutlier);
  for (size_t i = 0; i < camera_ids.size(); ++i) {
    if (clusters.labels[i] != kOutlier) out.pseudo_label[i] = index.at({clusters.labels[i], camera_ids[i]});
  }
  return out;
}

ProxySets offline_sets(int64_t anchor_proxy, const ProxyLabeling& labeling, std::span<const double> similarities,
                       const AssociationConfig& config) {
  check_proxy(anchor_proxy, labeling, similarities.size());
  ProxySets sets;
  const auto cluster_id = labeling.proxy_cluster[static_cast<size_t>(anchor_proxy)];
  for (int64_t u = 0; u < labeling.num_proxies(); ++u) {
    if (labeling.proxy_cluster[static_cast<size_t>(u)] == cluster_id) sets.positives.push_back(u);
  }
  sets.negatives = hardest_negatives(similarities, sets.positives, config.num_hard_negatives);
  return sets;
}

ProxySets online_sets(int64_t anchor_camera, int64_t anchor_proxy, const ProxyLabeling& labeling,
                      std::span<const double> similarities, const AssociationConfig& config) {
  check_proxy(anchor_proxy, labeling, similarities.size());
  const auto order = rank_by_similarity(similarities, std::vector<char>(similarities.size(), 0));
  std::vector<char> in_topk(similarities.size(), 0);
  for (int64_t r = 0; r < std::min<int64_t>(config.online_topk, static_cast<int64_t>(order.size())); ++r) {
    in_topk[static_cast<size_t>(order[static_cast<size_t>(r)])] = 1;
  }

  // First hit per camera in the global ranking is that camera's nearest proxy.
  std::map<int64_t, int64_t> nearest;
  for (auto u : order) nearest.emplace(labeling.proxy_camera[static_cast<size_t>(u)], u);

  ProxySets sets;
  sets.positives.push_back(anchor_proxy);
  for (const auto& [camera, u] : nearest) {
    if (camera != anchor_camera && in_topk[static_cast<size_t>(u)] && u != anchor_proxy) sets.positives.push_back(u);
  }
  std::sort(sets.positives.begin(), sets.positives.end());
  sets.negatives = hardest_negatives(similarities, sets.positives, config.num_hard_negatives);
  return sets;
}

ProxySets offline_sets(int64_t anchor_proxy, const ProxyLabeling& labeling, const torch::Tensor& bank,
                       const torch::Tensor& anchor, const AssociationConfig& config) {
  const auto sims = to_vector(bank.detach().matmul(anchor.detach()));
  return offline_sets(anchor_proxy, labeling, sims, config);
}

ProxySets online_sets(const torch::Tensor& anchor, int64_t anchor_camera, int64_t anchor_proxy,
                      const ProxyLabeling& labeling, const torch::Tensor& bank, const AssociationConfig& config) {
  const auto sims = to_vector(bank.detach().matmul(anchor.detach()));
  return online_sets(anchor_camera, anchor_proxy, labeling, sims, config);
}

void write_labeling_dump(std::ostream& out, const ProxyLabeling& labeling, std::span<const std::string> image_ids,
                         std::span<const int64_t> camera_ids) {
  out << "image_id,cluster,proxy,camera\n";
  for (size_t i = 0; i < labeling.pseudo_label.size(); ++i) {
    out << image_ids[i] << ',' << labeling.image_cluster[i] << ',' << labeling.pseudo_label[i] << ','
        << camera_ids[i] << '\n';
  }
}

}  // namespace tmgf
