#pragma once

#include <cstdint>
#include <vector>

#include "sfe/autodiff.hpp"
#include "sfe/config.hpp"
#include "sfe/nn.hpp"
#include "sfe/semask.hpp"

namespace sfe::appearance {

/// Per-group appearance network. Group i has its own mapping network; the
/// sine backbone and the color heads are shared or not according to
/// ModelConfig::appearance_sharing.
class AppearanceNetwork {
 public:
  AppearanceNetwork() = default;
  AppearanceNetwork(Rng& rng, const ModelConfig& config);

  /// FiLM parameters for group `group`; throws IndexError when group >= n.
  [[nodiscard]] nn::FilmParams map(int group, const ad::Var& z) const;

  /// rgb (M x 3) for the points of one group. `film` has one row per point.
  [[nodiscard]] ad::Var forward_group(int group, const nn::FilmParams& film, const ad::Var& descriptors,
                                      const ad::Var& directions) const;

  /// rgb (M x 3) for every point. `films[i]` holds one row per frame and
  /// `frame_of_point[m]` picks the row used for point m. A group with no points
  /// may leave its FiLM parameters undefined.
  [[nodiscard]] ad::Var forward(const semask::SemanticGrouping& grouping, const ad::Var& descriptors,
                                const ad::Var& directions, const std::vector<nn::FilmParams>& films,
                                const std::vector<std::int64_t>& frame_of_point) const;

  [[nodiscard]] int groups() const { return static_cast<int>(mappings_.size()); }
  [[nodiscard]] int depth() const;
  [[nodiscard]] int width() const;
  [[nodiscard]] AppearanceSharing sharing() const { return sharing_; }
  [[nodiscard]] const nn::MappingNetwork& mapping(int group) const;

  void collect(nn::ParamList& out, const std::string& prefix);

 private:
  [[nodiscard]] const std::vector<nn::Linear>& backbone(int group) const;
  [[nodiscard]] const nn::Linear& head(int group) const;

  std::vector<nn::MappingNetwork> mappings_;
  std::vector<std::vector<nn::Linear>> backbones_;
  std::vector<nn::Linear> heads_;
  AppearanceSharing sharing_ = AppearanceSharing::kProposed;
};

}  // namespace sfe::appearance
