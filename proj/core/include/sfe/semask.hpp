#pragma once

// Semantic volume masking.
//
// Along a ray with intersections x_0..x_{J-1} sorted by depth, compositing from
// start index k uses
//   w_j = sigma_j * prod_{k <= i < j} (1 - sigma_i),   j = k..J-1
//   residual = prod_{k <= i < J} (1 - sigma_i)
// with the occupancy used directly as alpha. The label of the point on the
// k-th manifold is argmax_c sum_j w_j p_j(c), lowest class index on ties.

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "sfe/autodiff.hpp"
#include "sfe/errors.hpp"

namespace sfe::semask {

template <typename T>
struct CompositeWeights {
  std::vector<T> weights;  // length J - start
  T residual{1};
};

/// `start` is 0-based. Throws DomainError for sigma outside [0, 1] or a start
/// past the end.
template <typename T>
CompositeWeights<T> composite_weights(std::span<const T> sigmas, std::size_t start) {
  if (start > sigmas.size() || (start == sigmas.size() && !sigmas.empty())) {
    throw DomainError("composite start index out of range");
  }
  CompositeWeights<T> out;
  out.weights.reserve(sigmas.size() - start);
  T transmittance{1};
  for (std::size_t j = start; j < sigmas.size(); ++j) {
    const T s = sigmas[j];
    if (!(s >= T{0} && s <= T{1})) throw DomainError("occupancy outside [0, 1]");
    out.weights.push_back(s * transmittance);
    transmittance *= (T{1} - s);
  }
  out.residual = transmittance;
  return out;
}

/// Row-major (J x C) per-point class probabilities.
using ProbMatrix = ad::Matrix;

/// Label of the point at `start` (0-based). Empty rays yield `background`.
int semantic_of_manifold(std::span<const double> sigmas, const ProbMatrix& probs, std::size_t start,
                         int background = 0);

/// Total map from fine class to group.
class ClubbingMap {
 public:
  ClubbingMap() = default;
  ClubbingMap(std::vector<int> map, int groups);
  static ClubbingMap identity(int n);

  [[nodiscard]] int operator()(int fine) const;
  [[nodiscard]] int classes() const { return static_cast<int>(map_.size()); }
  [[nodiscard]] int groups() const { return groups_; }
  [[nodiscard]] const std::vector<int>& table() const { return map_; }
  /// (classes x groups) 0/1 matrix summing fine probabilities into groups.
  [[nodiscard]] ad::Matrix matrix() const;

 private:
  std::vector<int> map_;
  int groups_ = 0;
};

/// Row offsets of each ray's points: ray r owns rows [offsets[r], offsets[r+1]).
using Segments = std::vector<std::int64_t>;
using SegmentsPtr = std::shared_ptr<const Segments>;

struct SemanticGrouping {
  std::vector<int> fine_labels;  // per point, S_k before clubbing
  std::vector<int> labels;       // per point, group index
  std::vector<std::vector<std::int64_t>> collections;  // per group, point rows
};

/// Labels every point with its clubbed S_k and partitions the points into
/// groups. `sigmas` (M) and `probs` (M x C) are aligned with the segments.
SemanticGrouping group_points(const Segments& segments, std::span<const double> sigmas, const ProbMatrix& probs,
                              const ClubbingMap& clubbing);

// ---- differentiable compositing ---------------------------------------------

/// Per-ray sum_j w_j v_j with start index 0. sigma is (M x 1), values (M x C);
/// result (R x C). First-order differentiable only.
ad::Var composite(const ad::Var& sigma, const ad::Var& values, const SegmentsPtr& segments);

/// Per-ray residual transmittance (R x 1).
ad::Var residual_transmittance(const ad::Var& sigma, const SegmentsPtr& segments);

}  // namespace sfe::semask
