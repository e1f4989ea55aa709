#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "sfe/config.hpp"
#include "sfe/types.hpp"

namespace sfe {

/// Seeded random source. Single owner; not thread-safe. The full state,
/// including the cached second normal deviate, round-trips through state().
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double normal(double mean, double stddev) { return mean + stddev * normal_(engine_); }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  /// Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

  [[nodiscard]] std::string state() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
};

/// i.i.d. standard normal vector. Throws ConfigError when dim < 1.
LatentCode sample_latent(Rng& rng, int dim);

/// Gaussian pose clamped to the valid pitch/yaw ranges.
CameraPose sample_pose(Rng& rng, const PosePrior& prior);

}  // namespace sfe
