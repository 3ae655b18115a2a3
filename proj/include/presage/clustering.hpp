#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "presage/attention.hpp"
#include "presage/errors.hpp"
#include "presage/tensor.hpp"

namespace presage {

struct VideoFeature {
  std::string video_id;
  std::vector<float> values;  // length d_h
};

// Video-level feature: each location's top-layer hidden vector is scaled by
// that location's attention weight, then max-pooled elementwise over
// locations and over time. Streaming-friendly: one running max vector.
class VideoFeatureAccumulator {
 public:
  explicit VideoFeatureAccumulator(uint32_t hidden)
      : max_(hidden, -std::numeric_limits<float>::infinity()) {}

  void add(const Tensor& hidden_rows, const AttentionMap& att) {
    require_rank(hidden_rows, 2, "video_feature hidden");
    const uint32_t n = hidden_rows.dim(0), d = hidden_rows.dim(1);
    if (n != att.alpha.size()) {
      throw ShapeError("video_feature: hidden rows do not match attention cells");
    }
    for (uint32_t loc = 0; loc < n; ++loc) {
      const float a = att.alpha[loc];
      const float* h = hidden_rows.data() + static_cast<size_t>(loc) * d;
      for (uint32_t k = 0; k < d; ++k) {
        max_[k] = std::max(max_[k], a * h[k]);
      }
    }
    frames_++;
  }

  uint64_t frames() const { return frames_; }

  const std::vector<float>& running_max() const { return max_; }
  void restore(std::vector<float> running_max, uint64_t frames) {
    max_ = std::move(running_max);
    frames_ = frames;
  }

  std::vector<float> finalize() const {
    if (frames_ == 0) throw UsageError("video_feature: empty video");
    return max_;
  }

 private:
  std::vector<float> max_;
  uint64_t frames_ = 0;
};

inline std::vector<float> video_feature(
    const std::vector<std::pair<Tensor, AttentionMap>>& per_frame) {
  if (per_frame.empty()) throw UsageError("video_feature: empty video");
  VideoFeatureAccumulator acc(per_frame.front().first.dim(1));
  for (const auto& [h, a] : per_frame) acc.add(h, a);
  return acc.finalize();
}

// ---------------------------------------------------------------------------
// k-means with k-means++ seeding and Lloyd iterations to an assignment
// fixpoint (or 300 iterations). Empty clusters are reseeded from the point
// farthest from its centroid.
// ---------------------------------------------------------------------------

struct ClusteringResult {
  uint32_t k = 0;
  std::vector<std::vector<float>> centroids;
  std::map<std::string, uint32_t> assignments;
  double inertia = 0.0;
  std::vector<double> inertia_history;  // one entry per Lloyd iteration
  uint32_t iterations = 0;
};

namespace detail {

inline double sq_dist(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace detail

inline ClusteringResult kmeans(const std::vector<VideoFeature>& features, uint32_t k,
                               uint64_t seed) {
  const size_t n = features.size();
  if (k == 0) throw ConfigError("kmeans: k must be >= 1");
  if (n < k) {
    throw ConfigError("kmeans: k=" + std::to_string(k) + " exceeds " +
                      std::to_string(n) + " features");
  }
  const size_t dim = features.front().values.size();
  for (const auto& f : features) {
    if (f.values.size() != dim) throw ShapeError("kmeans: inconsistent feature dims");
  }

  Rng rng(seed);
  ClusteringResult res;
  res.k = k;

  // k-means++ seeding.
  std::vector<size_t> seeds;
  seeds.push_back(rng.uniform_index(static_cast<uint32_t>(n)));
  std::vector<double> d2(n);
  while (seeds.size() < k) {
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (size_t s : seeds) {
        best = std::min(best, detail::sq_dist(features[i].values, features[s].values));
      }
      d2[i] = best;
      total += best;
    }
    size_t pick = 0;
    if (total <= 0.0) {
      pick = rng.uniform_index(static_cast<uint32_t>(n));
    } else {
      const double u = rng.uniform() * total;
      double acc = 0.0;
      for (size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= u) {
          pick = i;
          break;
        }
      }
    }
    seeds.push_back(pick);
  }
  for (size_t s : seeds) res.centroids.push_back(features[s].values);

  std::vector<uint32_t> assign(n, 0);
  std::vector<uint32_t> prev_assign;
  for (uint32_t iter = 0; iter < 300; ++iter) {
    // Assignment step (ties to the smallest cluster index).
    double inertia = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      uint32_t arg = 0;
      for (uint32_t c = 0; c < k; ++c) {
        const double d = detail::sq_dist(features[i].values, res.centroids[c]);
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      assign[i] = arg;
      inertia += best;
    }
    res.inertia_history.push_back(inertia);
    res.inertia = inertia;
    res.iterations = iter + 1;
    if (assign == prev_assign) break;
    prev_assign = assign;

    // Update step.
    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    std::vector<size_t> counts(k, 0);
    for (size_t i = 0; i < n; ++i) {
      counts[assign[i]]++;
      for (size_t j = 0; j < dim; ++j) sums[assign[i]][j] += features[i].values[j];
    }
    for (uint32_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Reseed from the point farthest from its assigned centroid.
        size_t far = 0;
        double far_d = -1.0;
        for (size_t i = 0; i < n; ++i) {
          const double d = detail::sq_dist(features[i].values, res.centroids[assign[i]]);
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        res.centroids[c] = features[far].values;
        continue;
      }
      for (size_t j = 0; j < dim; ++j) {
        res.centroids[c][j] = static_cast<float>(sums[c][j] / counts[c]);
      }
    }
  }

  for (size_t i = 0; i < n; ++i) res.assignments[features[i].video_id] = assign[i];
  return res;
}

// Elbow rule: the interior k maximizing the discrete second difference of
// log inertia(k); ties go to the smaller k. The log measures ratio
// curvature, so the pick does not depend on the absolute scale of the first
// inertia drops. An elbow only counts when the drop into k is at least
// twice the drop out of it (curvature > log 2); without such a knee the
// sweep reports the smallest interior k, the documented behavior for
// structureless data.
inline uint32_t elbow_optimal_k(const std::vector<VideoFeature>& features, uint32_t k_min,
                                uint32_t k_max, uint64_t seed) {
  if (k_min < 1 || k_max <= k_min + 1) {
    throw ConfigError("elbow: range must contain at least one interior k");
  }
  if (k_max > features.size()) {
    throw ConfigError("elbow: k_max exceeds number of features");
  }
  std::vector<double> log_inertia;
  for (uint32_t k = k_min; k <= k_max; ++k) {
    // Best of three seeded restarts per k keeps solver noise out of the curve.
    double best = std::numeric_limits<double>::max();
    for (uint64_t r = 0; r < 3; ++r) {
      best = std::min(best, kmeans(features, k, seed * 31 + r).inertia);
    }
    log_inertia.push_back(std::log(std::max(best, 1e-12)));
  }
  const double min_curvature = std::log(2.0);
  uint32_t best_k = k_min + 1;
  double best_curv = min_curvature;
  for (uint32_t k = k_min + 1; k < k_max; ++k) {
    const size_t i = k - k_min;
    const double curv = log_inertia[i - 1] - 2.0 * log_inertia[i] + log_inertia[i + 1];
    if (curv > best_curv) {
      best_curv = curv;
      best_k = k;
    }
  }
  return best_k;
}

// Homogeneity: 1 - H(class|cluster)/H(class); 1 when H(class) is zero.
inline double homogeneity(const std::map<std::string, uint32_t>& assignments,
                          const std::map<std::string, std::string>& labels) {
  if (assignments.size() != labels.size()) {
    throw ValidationError("homogeneity: id sets differ in size");
  }
  std::map<std::pair<uint32_t, std::string>, size_t> joint;
  std::map<uint32_t, size_t> cluster_n;
  std::map<std::string, size_t> class_n;
  for (const auto& [id, cluster] : assignments) {
    auto it = labels.find(id);
    if (it == labels.end()) {
      throw ValidationError("homogeneity: no label for video '" + id + "'");
    }
    joint[{cluster, it->second}]++;
    cluster_n[cluster]++;
    class_n[it->second]++;
  }
  const double total = static_cast<double>(assignments.size());
  double h_class = 0.0;
  for (const auto& [cls, cnt] : class_n) {
    const double p = cnt / total;
    h_class -= p * std::log(p);
  }
  if (h_class <= 0.0) return 1.0;
  double h_cond = 0.0;
  for (const auto& [key, cnt] : joint) {
    const double p_joint = cnt / total;
    const double p_in_cluster = static_cast<double>(cnt) / cluster_n[key.first];
    h_cond -= p_joint * std::log(p_in_cluster);
  }
  return 1.0 - h_cond / h_class;
}

}  // namespace presage
