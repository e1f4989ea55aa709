#include "sfe/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sfe/errors.hpp"

namespace sfe {

LatentCode::LatentCode(Eigen::VectorXd values) : values_(std::move(values)) {
  if (!values_.allFinite()) throw DomainError("latent code has non-finite entries");
}

CameraPose CameraPose::checked(double pitch, double yaw, double roll) {
  CameraPose p{pitch, yaw, roll};
  if (!p.valid()) throw DomainError("camera pose out of range");
  return p;
}

bool CameraPose::valid() const {
  return std::isfinite(pitch) && std::isfinite(yaw) && std::isfinite(roll) &&
         std::abs(pitch) <= kMaxPitch && std::abs(yaw) <= kMaxYaw;
}

CameraPose CameraPose::clamped() const {
  return {std::clamp(pitch, -kMaxPitch, kMaxPitch), std::clamp(yaw, -kMaxYaw, kMaxYaw), roll};
}

std::string Rng::state() const {
  std::ostringstream out;
  out << engine_ << ' ' << normal_;
  return out.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream in(state);
  in >> engine_ >> normal_;
  if (!in) throw IoError("corrupt RNG state");
}

LatentCode sample_latent(Rng& rng, int dim) {
  if (dim < 1) throw ConfigError("model.latent_dim", "latent dimension must be >= 1");
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  return LatentCode(std::move(v));
}

CameraPose sample_pose(Rng& rng, const PosePrior& prior) {
  const double pitch = rng.normal(prior.pitch_mean, prior.pitch_std);
  const double yaw = rng.normal(prior.yaw_mean, prior.yaw_std);
  const double roll = rng.normal(prior.roll_mean, prior.roll_std);
  return CameraPose{pitch, yaw, roll}.clamped();
}

}  // namespace sfe
