#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "matl/error.hpp"
#include "matl/ops.hpp"
#include "matl/tensor.hpp"

namespace matl {

enum class Distance { SquaredEuclidean, Euclidean };
enum class Mining { BatchAll, BatchHard };

struct LossConfig {
  double margin = 1.0;               // alpha
  double lambda = 0.25;              // weight of the box-label term
  Distance distance = Distance::SquaredEuclidean;
  Mining mining = Mining::BatchAll;
  bool normalize_embeddings = false;

  void validate() const {
    if (margin < 0.0) throw ConfigError("loss.margin must be nonnegative");
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("loss.lambda must lie in [0,1]");
  }
};

struct Triplet {
  int anchor = 0;
  int positive = 0;
  int negative = 0;
  bool operator==(const Triplet&) const = default;
};

using TripletSet = std::vector<Triplet>;

// Every valid (anchor, positive, negative) combination, in lexicographic
// index order. Batches with no valid triplet yield an empty set.
inline TripletSet mine_triplets_all(const std::vector<int>& labels) {
  const int n = static_cast<int>(labels.size());
  TripletSet out;
  for (int a = 0; a < n; ++a)
    for (int p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (int neg = 0; neg < n; ++neg) {
        if (labels[neg] == labels[a]) continue;
        out.push_back({a, p, neg});
      }
    }
  return out;
}

// Per anchor: the farthest positive and the nearest negative under the given
// pairwise distance matrix (row-major n*n). Ties keep the lowest index.
inline TripletSet mine_triplets_hard(const std::vector<int>& labels, const std::vector<double>& distances) {
  const int n = static_cast<int>(labels.size());
  if (distances.size() != static_cast<std::size_t>(n) * n)
    throw DimensionError("mine_triplets_hard: distance matrix must be n*n");
  TripletSet out;
  for (int a = 0; a < n; ++a) {
    int best_p = -1, best_n = -1;
    double far_p = -1.0, near_n = 0.0;
    for (int i = 0; i < n; ++i) {
      if (i == a) continue;
      const double d = distances[static_cast<std::size_t>(a) * n + i];
      if (labels[i] == labels[a]) {
        if (d > far_p) {
          far_p = d;
          best_p = i;
        }
      } else if (best_n < 0 || d < near_n) {
        near_n = d;
        best_n = i;
      }
    }
    if (best_p >= 0 && best_n >= 0) out.push_back({a, best_p, best_n});
  }
  return out;
}

namespace detail {

template <typename T>
std::vector<double> pairwise_distances(const Tensor<T>& emb, Distance distance) {
  const int n = emb.dim(0), D = emb.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (int d = 0; d < D; ++d) {
        const double diff = static_cast<double>(emb.values()[i * D + d]) - emb.values()[j * D + d];
        acc += diff * diff;
      }
      if (distance == Distance::Euclidean) acc = std::sqrt(acc);
      out[static_cast<std::size_t>(i) * n + j] = acc;
      out[static_cast<std::size_t>(j) * n + i] = acc;
    }
  return out;
}

}  // namespace detail

// Mean over triplets of max(d(a,p) - d(a,n) + margin, 0) on (N,D) embeddings.
// An empty triplet set yields a constant zero so callers can always add the
// term. Differentiable w.r.t. the embeddings.
template <typename T>
Tensor<T> triplet_loss(Tape<T>& tape, const Tensor<T>& embeddings, const TripletSet& triplets,
                       const LossConfig& cfg) {
  detail::require_rank("triplet_loss", embeddings, 2);
  cfg.validate();
  if (triplets.empty()) return Tensor<T>::scalar(T(0));

  Tensor<T> emb = cfg.normalize_embeddings ? l2_normalize_rows(tape, embeddings) : embeddings;
  const int n = emb.dim(0), D = emb.dim(1);
  for (const auto& t : triplets)
    if (t.anchor < 0 || t.anchor >= n || t.positive < 0 || t.positive >= n || t.negative < 0 ||
        t.negative >= n || t.anchor == t.positive)
      throw UsageError("triplet_loss: invalid triplet (" + std::to_string(t.anchor) + "," +
                       std::to_string(t.positive) + "," + std::to_string(t.negative) + ") for batch of " +
                       std::to_string(n));

  const bool ng = emb.needs_grad();
  Tensor<T> out = detail::make_op_output<T>({1}, ng);

  auto dist = [&](int i, int j) -> T {
    T acc = T(0);
    const T* vi = emb.values().data() + static_cast<std::size_t>(i) * D;
    const T* vj = emb.values().data() + static_cast<std::size_t>(j) * D;
    for (int d = 0; d < D; ++d) {
      const T diff = vi[d] - vj[d];
      acc += diff * diff;
    }
    return cfg.distance == Distance::Euclidean ? std::sqrt(acc) : acc;
  };

  T acc = T(0);
  for (const auto& t : triplets)
    acc += std::max(dist(t.anchor, t.positive) - dist(t.anchor, t.negative) + T(cfg.margin), T(0));
  out.values()[0] = acc / static_cast<T>(triplets.size());

  if (ng) {
    auto en = emb.node();
    auto on = out.node();
    auto trips = std::make_shared<TripletSet>(triplets);
    const Distance distance = cfg.distance;
    const T margin = T(cfg.margin);
    tape.record("triplet_loss", [en, on, trips, distance, margin, D] {
      const T gscale = on->grad[0] / static_cast<T>(trips->size());
      const T tiny = T(1e-12);
      auto pair_dist = [&](int i, int j) -> T {
        T acc2 = T(0);
        const T* vi = en->value.data() + static_cast<std::size_t>(i) * D;
        const T* vj = en->value.data() + static_cast<std::size_t>(j) * D;
        for (int d = 0; d < D; ++d) {
          const T diff = vi[d] - vj[d];
          acc2 += diff * diff;
        }
        return distance == Distance::Euclidean ? std::sqrt(acc2) : acc2;
      };
      for (const auto& t : *trips) {
        const T dap = pair_dist(t.anchor, t.positive);
        const T dan = pair_dist(t.anchor, t.negative);
        if (dap - dan + margin <= T(0)) continue;  // inactive hinge
        const T* va = en->value.data() + static_cast<std::size_t>(t.anchor) * D;
        const T* vp = en->value.data() + static_cast<std::size_t>(t.positive) * D;
        const T* vn = en->value.data() + static_cast<std::size_t>(t.negative) * D;
        T* ga = en->grad.data() + static_cast<std::size_t>(t.anchor) * D;
        T* gp = en->grad.data() + static_cast<std::size_t>(t.positive) * D;
        T* gn = en->grad.data() + static_cast<std::size_t>(t.negative) * D;
        // d(d_ap)/da = 2(a-p) for squared distance, (a-p)/d_ap for euclidean
        const T cp = distance == Distance::Euclidean ? T(1) / std::max(dap, tiny) : T(2);
        const T cn = distance == Distance::Euclidean ? T(1) / std::max(dan, tiny) : T(2);
        for (int d = 0; d < D; ++d) {
          const T ap = va[d] - vp[d];
          const T an = va[d] - vn[d];
          ga[d] += gscale * (cp * ap - cn * an);
          gp[d] += gscale * (-cp * ap);
          gn[d] += gscale * (cn * an);
        }
      }
    });
  }
  return out;
}

// Mines triplets for the given labels (batch-all or batch-hard per cfg) and
// applies triplet_loss.
template <typename T>
Tensor<T> labeled_triplet_loss(Tape<T>& tape, const Tensor<T>& embeddings, const std::vector<int>& labels,
                               const LossConfig& cfg) {
  if (static_cast<int>(labels.size()) != embeddings.dim(0))
    throw DimensionError("triplet loss: batch axis (0) is " + std::to_string(embeddings.dim(0)) +
                         " but got " + std::to_string(labels.size()) + " labels");
  TripletSet triplets;
  if (cfg.mining == Mining::BatchAll) {
    triplets = mine_triplets_all(labels);
  } else {
    Tape<T> scratch;  // distances for mining are selection-only, not differentiated
    Tensor<T> m = cfg.normalize_embeddings ? l2_normalize_rows(scratch, embeddings) : embeddings;
    triplets = mine_triplets_hard(labels, detail::pairwise_distances(m, cfg.distance));
  }
  return triplet_loss(tape, embeddings, triplets, cfg);
}

template <typename T>
Tensor<T> class_triplet_loss(Tape<T>& tape, const Tensor<T>& embeddings, const std::vector<int>& y_class,
                             const LossConfig& cfg) {
  return labeled_triplet_loss(tape, embeddings, y_class, cfg);
}

template <typename T>
Tensor<T> box_triplet_loss(Tape<T>& tape, const Tensor<T>& embeddings, const std::vector<int>& y_box,
                           const LossConfig& cfg) {
  return labeled_triplet_loss(tape, embeddings, y_box, cfg);
}

// (1 - lambda) * class term + lambda * box term; both terms share the same
// embeddings and configuration and mine independently over their own labels.
template <typename T>
Tensor<T> matl_loss(Tape<T>& tape, const Tensor<T>& embeddings, const std::vector<int>& y_class,
                    const std::vector<int>& y_box, const LossConfig& cfg) {
  if (y_class.size() != y_box.size())
    throw DimensionError("matl_loss: class and box label vectors differ in length: " +
                         std::to_string(y_class.size()) + " vs " + std::to_string(y_box.size()));
  auto lc = class_triplet_loss(tape, embeddings, y_class, cfg);
  auto lb = box_triplet_loss(tape, embeddings, y_box, cfg);
  const T lam = T(cfg.lambda);
  return add(tape, scale(tape, lc, T(1) - lam), scale(tape, lb, lam));
}

}  // namespace matl
