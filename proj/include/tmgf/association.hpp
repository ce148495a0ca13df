#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "tmgf/config.hpp"

namespace tmgf {

inline constexpr int64_t kOutlier = -1;

struct ClusterAssignment {
  std::vector<int64_t> labels;  // cluster index per image, or kOutlier
  int64_t num_clusters = 0;

  int64_t num_outliers() const;
};

/// DBSCAN over cosine distance 1 - a.b on row-normalized features [N, D].
///
/// A point is core when at least `min_samples` points (itself included) lie
/// within `eps`. Clusters are the connected components of the core graph,
/// numbered by their lowest core index. A non-core point within `eps` of some
/// core point joins the cluster of the lowest-indexed such core point;
/// anything else is an outlier. Never throws on "no clusters".
ClusterAssignment dbscan_cosine(const torch::Tensor& features, double eps, int64_t min_samples);

/// dbscan_cosine with the configured eps/min_samples. Throws LabelingError
/// when every image is an outlier.
ClusterAssignment cluster(const torch::Tensor& features, const AssociationConfig& config);

/// Pseudo labels: each (cluster, camera) pair with at least one image is one
/// proxy. Proxies are numbered 0..N_p-1 in (cluster, camera) order.
struct ProxyLabeling {
  std::vector<int64_t> image_cluster;  // copy of the clustering, kOutlier allowed
  std::vector<int64_t> pseudo_label;   // proxy per image, kOutlier for outliers
  std::vector<int64_t> proxy_cluster;
  std::vector<int64_t> proxy_camera;
  int64_t num_clusters = 0;

  int64_t num_proxies() const { return static_cast<int64_t>(proxy_cluster.size()); }
  int64_t num_images() const { return static_cast<int64_t>(pseudo_label.size()); }
  /// Proxy indices grouped by cluster, ascending.
  std::vector<std::vector<int64_t>> proxies_by_cluster() const;
  /// Image indices grouped by proxy, ascending.
  std::vector<std::vector<int64_t>> images_by_proxy() const;
  /// Checks non-empty proxies plus camera and cluster purity. Throws LabelingError.
  void validate(std::span<const int64_t> camera_ids) const;
};

ProxyLabeling split_camera_proxies(const ClusterAssignment& clusters, std::span<const int64_t> camera_ids);

struct ProxySets {
  std::vector<int64_t> positives;
  std::vector<int64_t> negatives;
};

/// `similarities[u]` is anchor . memory[u] for every proxy u.
ProxySets offline_sets(int64_t anchor_proxy, const ProxyLabeling& labeling, std::span<const double> similarities,
                       const AssociationConfig& config);
/// Camera-aware nearest neighbours: for each other camera, its most similar
/// proxy joins the positives if it also ranks among the `online_topk` most
/// similar proxies overall. Ties favour the lower proxy index.
ProxySets online_sets(int64_t anchor_camera, int64_t anchor_proxy, const ProxyLabeling& labeling,
                      std::span<const double> similarities, const AssociationConfig& config);

/// Tensor conveniences: anchor [D], bank [N_p, D].
ProxySets offline_sets(int64_t anchor_proxy, const ProxyLabeling& labeling, const torch::Tensor& bank,
                       const torch::Tensor& anchor, const AssociationConfig& config);
ProxySets online_sets(const torch::Tensor& anchor, int64_t anchor_camera, int64_t anchor_proxy,
                      const ProxyLabeling& labeling, const torch::Tensor& bank, const AssociationConfig& config);

/// One row per image: "image_id,cluster,proxy,camera", -1 for outliers.
void write_labeling_dump(std::ostream& out, const ProxyLabeling& labeling, std::span<const std::string> image_ids,
                         std::span<const int64_t> camera_ids);

}  // namespace tmgf
