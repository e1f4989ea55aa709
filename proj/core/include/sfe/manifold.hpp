#pragma once

// Scalar-field manifold predictor and ray / iso-surface intersection.
//
// Rays are sampled at equally spaced coarse depths; for each iso level the
// first sign change of (field - level) is refined with one linear
// interpolation step, t* = t_a + (l - f_a)(t_b - t_a)/(f_b - f_a). The
// differentiable variant re-evaluates f_a and f_b through the autodiff graph
// so gradients reach the field parameters through t*.

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "sfe/autodiff.hpp"
#include "sfe/nn.hpp"
#include "sfe/types.hpp"

namespace sfe::manifold {

class ScalarField {
 public:
  virtual ~ScalarField() = default;
  /// One value per row of `points` (N x 3); builds no graph.
  [[nodiscard]] virtual Eigen::VectorXd evaluate(const ad::Matrix& points) const;
  /// Differentiable with respect to the points and any parameters. Returns N x 1.
  [[nodiscard]] virtual ad::Var evaluate_var(const ad::Var& points) const = 0;
  [[nodiscard]] double eval(const Vec3& x) const;
  virtual void collect(nn::ParamList& /*out*/, const std::string& /*prefix*/) {}
};

/// f(x) = normal . x + offset.
class AffineField final : public ScalarField {
 public:
  AffineField(Vec3 normal, double offset) : normal_(std::move(normal)), offset_(offset) {}
  [[nodiscard]] ad::Var evaluate_var(const ad::Var& points) const override;

 private:
  Vec3 normal_;
  double offset_;
};

/// f(x) = |x - center|.
class SphereField final : public ScalarField {
 public:
  explicit SphereField(Vec3 center = Vec3::Zero()) : center_(std::move(center)) {}
  [[nodiscard]] ad::Var evaluate_var(const ad::Var& points) const override;

 private:
  Vec3 center_;
};

class ConstantField final : public ScalarField {
 public:
  explicit ConstantField(double value) : value_(value) {}
  [[nodiscard]] ad::Var evaluate_var(const ad::Var& points) const override;

 private:
  double value_;
};

/// Learned field: |x| plus a softplus MLP residual. The residual's output
/// layer starts near zero so initial iso-surfaces are concentric spheres.
class ManifoldNetwork final : public ScalarField {
 public:
  ManifoldNetwork() = default;
  ManifoldNetwork(Rng& rng, int width, int depth);

  [[nodiscard]] ad::Var evaluate_var(const ad::Var& points) const override;
  void collect(nn::ParamList& out, const std::string& prefix) override;

 private:
  std::vector<nn::Linear> hidden_;
  nn::Linear output_;
};

/// Strictly increasing iso levels.
class IsoLevels {
 public:
  explicit IsoLevels(std::vector<double> levels);
  static IsoLevels equally_spaced(double lo, double hi, int count);

  [[nodiscard]] const std::vector<double>& values() const { return levels_; }
  [[nodiscard]] int size() const { return static_cast<int>(levels_.size()); }
  [[nodiscard]] double operator[](int i) const { return levels_[static_cast<std::size_t>(i)]; }

 private:
  std::vector<double> levels_;
};

struct Intersection {
  double t = 0.0;
  std::optional<Vec3> position;  // empty when invalid
  int level_index = -1;
  [[nodiscard]] bool valid() const { return position.has_value(); }
};

/// One record per level: valid records first in ascending t, then invalid ones.
using ManifoldIntersections = std::vector<Intersection>;

/// Coarse bracket of the first crossing of one level along one ray.
struct Bracket {
  int ray = 0;
  int level = 0;
  double t_a = 0.0;
  double t_b = 0.0;
  double f_a = 0.0;
  double f_b = 0.0;
};

struct Intrinsics {
  double fov = 0.7;  // vertical, radians
  double orbit_radius = 2.7;
  double near = 1.4;
  double far = 4.0;
};

/// Camera-to-world rotation for a pose: Ry(yaw) * Rx(-pitch) * Rz(roll).
Eigen::Matrix3d camera_rotation(const CameraPose& pose);

/// One ray per pixel centre, row-major (y outer, x inner), unit directions,
/// origins on the orbit.
std::vector<Ray> generate_rays(const CameraPose& pose, int width, int height, const Intrinsics& intrinsics);

/// Brackets for every (ray, level) that has a non-degenerate first crossing,
/// ordered by ray then level.
std::vector<Bracket> find_brackets(const ScalarField& field, const IsoLevels& levels,
                                   std::span<const Ray> rays, int coarse_samples);

/// Linear-interpolation root of a bracket.
double refine_depth(const Bracket& bracket, double level);

ManifoldIntersections intersect_ray(const ScalarField& field, const IsoLevels& levels, const Ray& ray,
                                    int coarse_samples);
std::vector<ManifoldIntersections> intersect_rays(const ScalarField& field, const IsoLevels& levels,
                                                  std::span<const Ray> rays, int coarse_samples);

/// Differentiable refined depths (M x 1) for the given brackets.
ad::Var refine_depths(const ScalarField& field, const IsoLevels& levels, std::span<const Bracket> brackets,
                      std::span<const Ray> rays);

}  // namespace sfe::manifold
