#pragma once

#include <Eigen/Core>

#include <numbers>
#include <vector>

namespace sfe {

using Vec3 = Eigen::Vector3d;

/// Latent vector in Z space. Entries are finite.
class LatentCode {
 public:
  LatentCode() = default;
  explicit LatentCode(Eigen::VectorXd values);
  static LatentCode zeros(int dim) { return LatentCode(Eigen::VectorXd::Zero(dim)); }

  [[nodiscard]] int dim() const { return static_cast<int>(values_.size()); }
  [[nodiscard]] const Eigen::VectorXd& values() const { return values_; }
  [[nodiscard]] double operator[](int i) const { return values_[i]; }

  friend bool operator==(const LatentCode& a, const LatentCode& b) { return a.values_ == b.values_; }

 private:
  Eigen::VectorXd values_;
};

/// Camera on a fixed-radius orbit around the origin, looking at the origin.
struct CameraPose {
  double pitch = 0.0;  // radians, [-pi/2, pi/2]
  double yaw = 0.0;    // radians, [-pi, pi]
  double roll = 0.0;   // radians, about the optical axis

  static constexpr double kMaxPitch = std::numbers::pi / 2.0;
  static constexpr double kMaxYaw = std::numbers::pi;

  /// Throws DomainError when an angle is outside its range or non-finite.
  static CameraPose checked(double pitch, double yaw, double roll = 0.0);
  /// Clamps pitch/yaw into range.
  [[nodiscard]] CameraPose clamped() const;
  [[nodiscard]] bool valid() const;

  friend bool operator==(const CameraPose&, const CameraPose&) = default;
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();  // unit length
  double near = 0.0;
  double far = 1.0;

  [[nodiscard]] Vec3 at(double t) const { return origin + t * direction; }
};

/// Per-point outputs of the generator.
struct RadianceSample {
  double sigma = 0.0;
  Eigen::VectorXd sem_logits;
  Eigen::VectorXd descriptor;
  Vec3 rgb = Vec3::Zero();
};

}  // namespace sfe
