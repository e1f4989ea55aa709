#pragma once

#include "sfe/autodiff.hpp"
#include "sfe/config.hpp"
#include "sfe/nn.hpp"

namespace sfe::geometry {

struct GeometryOutput {
  ad::Var sigma;       // (M, 1), occupancy in [0, 1]
  ad::Var sem_logits;  // (M, num_classes)
  ad::Var descriptor;  // (M, descriptor_dim)
};

/// FiLM-conditioned sine network: (z, x) -> occupancy, semantic logits and an
/// appearance descriptor. All three heads read the same final trunk feature.
class GeometryNetwork {
 public:
  GeometryNetwork() = default;
  GeometryNetwork(Rng& rng, const ModelConfig& config);

  /// z: one latent per row -> one FiLM row per latent.
  [[nodiscard]] nn::FilmParams map(const ad::Var& z) const;

  /// `film` must have one row per position. `directions` (M x 3) is only read
  /// when the descriptor head is view dependent.
  [[nodiscard]] GeometryOutput forward(const nn::FilmParams& film, const ad::Var& positions,
                                       const ad::Var& directions = {}) const;

  [[nodiscard]] int depth() const { return static_cast<int>(layers_.size()); }
  [[nodiscard]] int width() const { return layers_.empty() ? 0 : layers_.front().out(); }
  [[nodiscard]] const nn::MappingNetwork& mapping() const { return mapping_; }

  void collect(nn::ParamList& out, const std::string& prefix);

 private:
  nn::MappingNetwork mapping_;
  std::vector<nn::Linear> layers_;
  nn::Linear sigma_head_;
  nn::Linear semantic_head_;
  nn::Linear descriptor_head_;
  bool view_dependent_ = false;
};

}  // namespace sfe::geometry
