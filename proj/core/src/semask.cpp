#include "sfe/semask.hpp"

namespace sfe::semask {

int semantic_of_manifold(std::span<const double> sigmas, const ProbMatrix& probs, std::size_t start,
                         int background) {
  if (sigmas.empty()) return background;
  if (static_cast<Eigen::Index>(sigmas.size()) != probs.rows()) {
    throw ShapeError("semantic_of_manifold: sigma/probability length mismatch");
  }
  const auto weights = composite_weights<double>(sigmas, start);
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(probs.cols());
  for (std::size_t j = 0; j < weights.weights.size(); ++j) {
    const double w = weights.weights[j];
    const auto row = static_cast<Eigen::Index>(start + j);
    for (Eigen::Index c = 0; c < probs.cols(); ++c) acc[c] += w * probs(row, c);
  }
  int best = 0;
  for (Eigen::Index c = 1; c < acc.size(); ++c) {
    if (acc[c] > acc[best]) best = static_cast<int>(c);
  }
  return best;
}

ClubbingMap::ClubbingMap(std::vector<int> map, int groups) : map_(std::move(map)), groups_(groups) {
  if (groups_ < 1) throw DomainError("clubbing needs at least one group");
  for (int g : map_) {
    if (g < 0 || g >= groups_) throw DomainError("clubbing group index out of range");
  }
}

ClubbingMap ClubbingMap::identity(int n) {
  std::vector<int> m(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) m[static_cast<std::size_t>(i)] = i;
  return {std::move(m), n};
}

int ClubbingMap::operator()(int fine) const {
  if (fine < 0 || fine >= classes()) throw IndexError("fine label " + std::to_string(fine) + " out of range");
  return map_[static_cast<std::size_t>(fine)];
}

ad::Matrix ClubbingMap::matrix() const {
  ad::Matrix m = ad::Matrix::Zero(classes(), groups_);
  for (int c = 0; c < classes(); ++c) m(c, map_[static_cast<std::size_t>(c)]) = 1.0;
  return m;
}

SemanticGrouping group_points(const Segments& segments, std::span<const double> sigmas, const ProbMatrix& probs,
                              const ClubbingMap& clubbing) {
  const auto m = static_cast<std::int64_t>(sigmas.size());
  if (probs.rows() != m) throw ShapeError("group_points: sigma/probability length mismatch");
  if (segments.empty() || segments.back() != m) throw ShapeError("group_points: segments do not cover points");
  if (probs.cols() != clubbing.classes()) throw ShapeError("group_points: class count mismatch");

  SemanticGrouping out;
  out.fine_labels.assign(static_cast<std::size_t>(m), 0);
  out.labels.assign(static_cast<std::size_t>(m), 0);
  out.collections.assign(static_cast<std::size_t>(clubbing.groups()), {});
  for (std::size_t r = 0; r + 1 < segments.size(); ++r) {
    const auto begin = segments[r];
    const auto end = segments[r + 1];
    if (end == begin) continue;
    const auto ray_sigmas = sigmas.subspan(static_cast<std::size_t>(begin), static_cast<std::size_t>(end - begin));
    const ProbMatrix ray_probs = probs.middleRows(begin, end - begin);
    for (auto k = begin; k < end; ++k) {
      const int fine = semantic_of_manifold(ray_sigmas, ray_probs, static_cast<std::size_t>(k - begin));
      const int group = clubbing(fine);
      out.fine_labels[static_cast<std::size_t>(k)] = fine;
      out.labels[static_cast<std::size_t>(k)] = group;
    }
  }
  for (std::int64_t k = 0; k < m; ++k) {
    out.collections[static_cast<std::size_t>(out.labels[static_cast<std::size_t>(k)])].push_back(k);
  }
  return out;
}

namespace {

void check_segments(const ad::Var& sigma, const Segments& seg) {
  if (sigma.cols() != 1) throw ShapeError("composite: sigma must be a column");
  if (seg.empty() || seg.back() != sigma.rows()) throw ShapeError("composite: segments do not cover points");
}

void guard_first_order() {
  if (ad::grad_enabled()) throw std::logic_error("compositing has no second-order backward");
}

}  // namespace

ad::Var composite(const ad::Var& sigma, const ad::Var& values, const SegmentsPtr& segments) {
  check_segments(sigma, *segments);
  if (values.rows() != sigma.rows()) throw ShapeError("composite: values/sigma row mismatch");
  const auto rays = static_cast<Eigen::Index>(segments->size()) - 1;
  const auto c = values.cols();
  const ad::Matrix& s = sigma.value();
  const ad::Matrix& v = values.value();
  ad::Matrix out = ad::Matrix::Zero(rays, c);
  for (Eigen::Index r = 0; r < rays; ++r) {
    double t = 1.0;
    for (auto j = (*segments)[static_cast<std::size_t>(r)]; j < (*segments)[static_cast<std::size_t>(r + 1)]; ++j) {
      const double sj = s(j, 0);
      if (!(sj >= 0.0 && sj <= 1.0)) throw DomainError("occupancy outside [0, 1]");
      out.row(r) += (sj * t) * v.row(j);
      t *= (1.0 - sj);
    }
  }
  return ad::make_result(std::move(out), {sigma, values}, [sigma, values, segments](const ad::Var& g) {
    guard_first_order();
    const ad::Matrix& s = sigma.value();
    const ad::Matrix& v = values.value();
    const ad::Matrix& gv = g.value();
    const auto cols = v.cols();
    ad::Matrix g_sigma = ad::Matrix::Zero(s.rows(), 1);
    ad::Matrix g_values = ad::Matrix::Zero(v.rows(), cols);
    const auto rays = static_cast<Eigen::Index>(segments->size()) - 1;
    Eigen::RowVectorXd after(cols);
    std::vector<double> trans;
    for (Eigen::Index r = 0; r < rays; ++r) {
      const auto begin = (*segments)[static_cast<std::size_t>(r)];
      const auto end = (*segments)[static_cast<std::size_t>(r + 1)];
      trans.assign(static_cast<std::size_t>(end - begin), 1.0);
      double t = 1.0;
      for (auto j = begin; j < end; ++j) {
        trans[static_cast<std::size_t>(j - begin)] = t;
        g_values.row(j) = (s(j, 0) * t) * gv.row(r);
        t *= (1.0 - s(j, 0));
      }
      // after_j = sum over m > j of sigma_m prod_{j<i<m}(1 - sigma_i) v_m
      after.setZero();
      for (auto j = end - 1; j >= begin; --j) {
        const double tj = trans[static_cast<std::size_t>(j - begin)];
        g_sigma(j, 0) = tj * (v.row(j) - after).dot(gv.row(r));
        after = s(j, 0) * v.row(j) + (1.0 - s(j, 0)) * after;
      }
    }
    return std::vector<ad::Var>{ad::Var(std::move(g_sigma)), ad::Var(std::move(g_values))};
  });
}

ad::Var residual_transmittance(const ad::Var& sigma, const SegmentsPtr& segments) {
  check_segments(sigma, *segments);
  const auto rays = static_cast<Eigen::Index>(segments->size()) - 1;
  const ad::Matrix& s = sigma.value();
  ad::Matrix out(rays, 1);
  for (Eigen::Index r = 0; r < rays; ++r) {
    double t = 1.0;
    for (auto j = (*segments)[static_cast<std::size_t>(r)]; j < (*segments)[static_cast<std::size_t>(r + 1)]; ++j) {
      const double sj = s(j, 0);
      if (!(sj >= 0.0 && sj <= 1.0)) throw DomainError("occupancy outside [0, 1]");
      t *= (1.0 - sj);
    }
    out(r, 0) = t;
  }
  return ad::make_result(std::move(out), {sigma}, [sigma, segments](const ad::Var& g) {
    guard_first_order();
    const ad::Matrix& s = sigma.value();
    ad::Matrix g_sigma = ad::Matrix::Zero(s.rows(), 1);
    const auto rays = static_cast<Eigen::Index>(segments->size()) - 1;
    for (Eigen::Index r = 0; r < rays; ++r) {
      const auto begin = (*segments)[static_cast<std::size_t>(r)];
      const auto end = (*segments)[static_cast<std::size_t>(r + 1)];
      // d/d sigma_j prod_i (1 - sigma_i) = -prefix_j * suffix_j
      double prefix = 1.0;
      std::vector<double> prefixes(static_cast<std::size_t>(end - begin));
      for (auto j = begin; j < end; ++j) {
        prefixes[static_cast<std::size_t>(j - begin)] = prefix;
        prefix *= (1.0 - s(j, 0));
      }
      double suffix = 1.0;
      for (auto j = end - 1; j >= begin; --j) {
        g_sigma(j, 0) = -prefixes[static_cast<std::size_t>(j - begin)] * suffix * g.value()(r, 0);
        suffix *= (1.0 - s(j, 0));
      }
    }
    return std::vector<ad::Var>{ad::Var(std::move(g_sigma))};
  });
}

}  // namespace sfe::semask
