#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "matl/error.hpp"
#include "matl/rng.hpp"

namespace matl {

// Axis-aligned box in pixel coordinates; covers columns [x, x+w) and rows
// [y, y+h).
struct BoxAnnotation {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool operator==(const BoxAnnotation&) const = default;
  long long area() const { return static_cast<long long>(w) * h; }
};

// Geometry features clustered into box labels: area, symmetric squareness,
// width, height. ss = 1 - min(w/h, h/w) is 0 for squares and approaches 1 for
// extreme elongation.
struct BoxFeatures {
  double area = 0.0;
  double ss = 0.0;
  double w = 0.0;
  double h = 0.0;

  std::array<double, 4> as_array() const { return {area, ss, w, h}; }
};

inline BoxFeatures compute_features(const BoxAnnotation& box) {
  if (box.w <= 0 || box.h <= 0)
    throw DataError("box at (" + std::to_string(box.x) + "," + std::to_string(box.y) +
                    ") has nonpositive dimension " + std::to_string(box.w) + "x" + std::to_string(box.h));
  BoxFeatures f;
  f.w = box.w;
  f.h = box.h;
  f.area = f.w * f.h;
  f.ss = 1.0 - std::min(f.w / f.h, f.h / f.w);
  return f;
}

// Per-feature (min, max) learned from a training split.
struct NormStats {
  std::array<double, 4> min{};
  std::array<double, 4> max{};
};

inline NormStats fit_minmax(const std::vector<BoxFeatures>& features) {
  if (features.empty()) throw UsageError("fit_minmax: empty feature list");
  NormStats stats;
  stats.min.fill(std::numeric_limits<double>::infinity());
  stats.max.fill(-std::numeric_limits<double>::infinity());
  for (const auto& f : features) {
    const auto a = f.as_array();
    for (int d = 0; d < 4; ++d) {
      stats.min[d] = std::min(stats.min[d], a[d]);
      stats.max[d] = std::max(stats.max[d], a[d]);
    }
  }
  return stats;
}

// (x - min) / (max - min), clamped to [0,1] for out-of-range values; a
// degenerate feature (max == min) maps to 0.
inline std::array<double, 4> apply_minmax(const BoxFeatures& f, const NormStats& stats) {
  std::array<double, 4> out{};
  const auto a = f.as_array();
  for (int d = 0; d < 4; ++d) {
    const double range = stats.max[d] - stats.min[d];
    out[d] = range > 0.0 ? std::clamp((a[d] - stats.min[d]) / range, 0.0, 1.0) : 0.0;
  }
  return out;
}

// Fitted K-means clustering over normalized box features; cluster indices are
// the discrete box labels.
struct KMeansModel {
  int k = 0;
  std::vector<std::array<double, 4>> centroids;
  double wcss = 0.0;
};

using BoxLabel = int;

namespace detail {

inline double sq_dist4(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  double acc = 0.0;
  for (int d = 0; d < 4; ++d) {
    const double diff = a[d] - b[d];
    acc += diff * diff;
  }
  return acc;
}

inline int nearest_centroid(const std::vector<std::array<double, 4>>& centroids,
                            const std::array<double, 4>& p) {
  int best = 0;
  double best_d = sq_dist4(centroids[0], p);
  for (int j = 1; j < static_cast<int>(centroids.size()); ++j) {
    const double d = sq_dist4(centroids[j], p);
    if (d < best_d) {  // strict: ties keep the lowest index
      best_d = d;
      best = j;
    }
  }
  return best;
}

// Lloyd iterations from a given initialization; assignments-stable or 300
// iterations. An emptied cluster is re-seeded at the point farthest from its
// assigned centroid.
inline KMeansModel lloyd(const std::vector<std::array<double, 4>>& points,
                         std::vector<std::array<double, 4>> centroids) {
  const int n = static_cast<int>(points.size());
  const int k = static_cast<int>(centroids.size());
  std::vector<int> assign(n, -1);
  for (int iter = 0; iter < 300; ++iter) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      const int j = nearest_centroid(centroids, points[i]);
      if (j != assign[i]) {
        assign[i] = j;
        changed = true;
      }
    }
    if (!changed && iter > 0) break;

    std::vector<std::array<double, 4>> sums(k, {0, 0, 0, 0});
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      for (int d = 0; d < 4; ++d) sums[assign[i]][d] += points[i][d];
      counts[assign[i]]++;
    }
    for (int j = 0; j < k; ++j) {
      if (counts[j] == 0) {
        // farthest point from its own centroid
        int far_i = 0;
        double far_d = -1.0;
        for (int i = 0; i < n; ++i) {
          const double d = sq_dist4(points[i], centroids[assign[i]]);
          if (d > far_d) {
            far_d = d;
            far_i = i;
          }
        }
        centroids[j] = points[far_i];
        changed = true;
      } else {
        for (int d = 0; d < 4; ++d) centroids[j][d] = sums[j][d] / counts[j];
      }
    }
    if (!changed) break;
  }

  KMeansModel model;
  model.k = k;
  model.centroids = std::move(centroids);
  model.wcss = 0.0;
  for (int i = 0; i < n; ++i)
    model.wcss += sq_dist4(points[i], model.centroids[nearest_centroid(model.centroids, points[i])]);
  return model;
}

// k-means++ seeding.
inline std::vector<std::array<double, 4>> kmeanspp_init(const std::vector<std::array<double, 4>>& points,
                                                        int k, Rng& rng) {
  const int n = static_cast<int>(points.size());
  std::vector<std::array<double, 4>> centroids;
  centroids.reserve(k);
  centroids.push_back(points[rng.uniform_int(0, n - 1)]);
  std::vector<double> d2(n);
  while (static_cast<int>(centroids.size()) < k) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centroids) best = std::min(best, sq_dist4(points[i], c));
      d2[i] = best;
      total += best;
    }
    if (total <= 0.0) {
      centroids.push_back(points[rng.uniform_int(0, n - 1)]);
      continue;
    }
    double target = rng.uniform() * total;
    int pick = n - 1;
    for (int i = 0; i < n; ++i) {
      target -= d2[i];
      if (target <= 0.0) {
        pick = i;
        break;
      }
    }
    centroids.push_back(points[pick]);
  }
  return centroids;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding; keeps the best-WCSS model over
// `restarts` independent runs (ties resolved toward the lowest restart index).
inline KMeansModel kmeans_fit(const std::vector<std::array<double, 4>>& points, int k, std::uint64_t seed,
                              int restarts = 10) {
  const int n = static_cast<int>(points.size());
  if (k < 1 || n < k)
    throw UsageError("kmeans_fit: need at least k=" + std::to_string(k) + " points, got " +
                     std::to_string(n));
  if (restarts < 1) restarts = 1;
  std::optional<KMeansModel> best;
  for (int r = 0; r < restarts; ++r) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(r)));
    KMeansModel model = detail::lloyd(points, detail::kmeanspp_init(points, k, rng));
    if (!best || model.wcss < best->wcss) best = std::move(model);
  }
  return *best;
}

// Nearest centroid by squared Euclidean distance; ties go to the lowest index.
inline BoxLabel kmeans_assign(const KMeansModel& model, const std::array<double, 4>& point) {
  if (model.k < 1 || model.centroids.empty()) throw UsageError("kmeans_assign: model is not fitted");
  return detail::nearest_centroid(model.centroids, point);
}

// (k, wcss) curve for k = 1..k_max. Alongside the fresh restarts, each k
// reuses the k-1 solution plus a split centroid as a candidate so the curve is
// non-increasing.
inline std::vector<std::pair<int, double>> wcss_curve(const std::vector<std::array<double, 4>>& points,
                                                      int k_max, std::uint64_t seed, int restarts = 10) {
  if (k_max < 1 || k_max > static_cast<int>(points.size()))
    throw UsageError("wcss_curve: k_max must be in [1, n]");
  std::vector<std::pair<int, double>> curve;
  std::optional<KMeansModel> prev;
  for (int k = 1; k <= k_max; ++k) {
    KMeansModel model = kmeans_fit(points, k, mix_seed(seed, static_cast<std::uint64_t>(k)), restarts);
    if (prev) {
      auto centroids = prev->centroids;
      int far_i = 0;
      double far_d = -1.0;
      for (int i = 0; i < static_cast<int>(points.size()); ++i) {
        const double d = detail::sq_dist4(points[i], centroids[detail::nearest_centroid(centroids, points[i])]);
        if (d > far_d) {
          far_d = d;
          far_i = i;
        }
      }
      centroids.push_back(points[far_i]);
      KMeansModel split = detail::lloyd(points, std::move(centroids));
      if (split.wcss < model.wcss) model = std::move(split);
    }
    curve.emplace_back(k, model.wcss);
    prev = std::move(model);
  }
  return curve;
}

// Suggested cluster count: the interior k with the largest discrete second
// difference of the WCSS curve. Returns nullopt when the curve is too short
// to evaluate an inflection (k_max < 3).
inline std::optional<int> elbow_suggest(const std::vector<std::pair<int, double>>& curve) {
  if (curve.size() < 3) return std::nullopt;
  int best_k = curve[1].first;
  double best_dd = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i + 1 < curve.size(); ++i) {
    const double dd = curve[i - 1].second - 2.0 * curve[i].second + curve[i + 1].second;
    if (dd > best_dd) {
      best_dd = dd;
      best_k = curve[i].first;
    }
  }
  return best_k;
}

}  // namespace matl
