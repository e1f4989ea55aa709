#pragma once

// Full generator: rays -> manifold intersections -> geometry -> semantic
// masking -> per-group appearance -> composited image and semantic map.

#include <cstdint>
#include <span>
#include <vector>

#include "sfe/appearance.hpp"
#include "sfe/config.hpp"
#include "sfe/geometry.hpp"
#include "sfe/manifold.hpp"
#include "sfe/semask.hpp"
#include "sfe/types.hpp"

namespace sfe::render {

class Generator {
 public:
  Generator() = default;
  /// Builds and initialises every network from `seed`. The config is validated.
  Generator(TrainConfig config, std::uint64_t seed);

  [[nodiscard]] const TrainConfig& config() const { return config_; }
  [[nodiscard]] const ModelConfig& model() const { return config_.model; }
  [[nodiscard]] const manifold::ManifoldNetwork& manifold() const { return manifold_; }
  [[nodiscard]] const geometry::GeometryNetwork& geometry() const { return geometry_; }
  [[nodiscard]] const appearance::AppearanceNetwork& appearance() const { return appearance_; }
  [[nodiscard]] const manifold::IsoLevels& levels() const { return levels_; }
  [[nodiscard]] const semask::ClubbingMap& clubbing() const { return clubbing_; }
  [[nodiscard]] const ad::Var& background_logit() const { return background_logit_; }
  [[nodiscard]] manifold::Intrinsics intrinsics() const;

  /// Manifold and geometry parameters (frozen in stage 2).
  void collect_geometry(nn::ParamList& out);
  /// Appearance parameters and the background color.
  void collect_appearance(nn::ParamList& out);
  void collect(nn::ParamList& out);

 private:
  TrainConfig config_;
  manifold::ManifoldNetwork manifold_;
  geometry::GeometryNetwork geometry_;
  appearance::AppearanceNetwork appearance_;
  ad::Var background_logit_;
  manifold::IsoLevels levels_{std::vector<double>{0.5}};
  semask::ClubbingMap clubbing_;
};

/// Z-space codes for a batch of frames: one geometry latent and one latent
/// per group, each (B x d).
struct Latents {
  ad::Var geometry;
  std::vector<ad::Var> appearance;
  [[nodiscard]] Eigen::Index batch() const { return geometry.rows(); }
};

/// W-space codes for a batch: FiLM parameters with one row per frame.
struct Styles {
  nn::FilmParams geometry;
  std::vector<nn::FilmParams> appearance;
  [[nodiscard]] Eigen::Index batch() const { return geometry.batch(); }
};

Styles map_latents(const Generator& gen, const Latents& latents);

/// Stacks single latent codes into a batch of one.
Latents make_latents(const LatentCode& z, const std::vector<LatentCode>& z_groups);
/// Samples a geometry latent and n appearance latents.
Latents sample_latents(Rng& rng, const Generator& gen, int batch);

struct RenderResult {
  int batch = 0;
  int width = 0;
  int height = 0;
  // Pixel rows are ordered (frame, y, x).
  ad::Var rgb;          // (P, 3)
  ad::Var fine_probs;   // (P, N_cls), background residual folded in
  ad::Var group_probs;  // (P, n)
  ad::Var depth;        // (P, 1), sum_j w_j t_j
  std::vector<int> fine_labels;
  std::vector<int> labels;  // clubbed fine labels

  // Point-level data (rows sorted by ray, then depth).
  semask::SegmentsPtr segments;
  ad::Var point_sigma;  // (M, 1)
  ad::Var point_rgb;    // (M, 3); undefined without appearance
  semask::SemanticGrouping grouping;
};

struct RenderOptions {
  bool appearance = true;
};

/// Renders one frame per style row. Throws DomainError for zero resolution
/// and NumericalError when a network produces non-finite values.
RenderResult render(const Generator& gen, const Styles& styles, std::span<const CameraPose> poses, int width,
                    int height, const RenderOptions& options = {});

/// Plain-value frame.
struct RenderedFrame {
  int width = 0;
  int height = 0;
  std::vector<double> rgb;          // H*W*3, row-major
  std::vector<double> group_probs;  // H*W*n
  std::vector<double> fine_probs;   // H*W*N_cls
  std::vector<int> labels;          // H*W group labels
  std::vector<int> fine_labels;
  std::vector<double> depth;
};

RenderedFrame to_frame(const RenderResult& result, int index);

RenderedFrame render_frame(const Generator& gen, const LatentCode& z, const std::vector<LatentCode>& z_groups,
                           const CameraPose& pose, int width, int height);

/// Labels and probabilities only; the appearance network is not evaluated.
RenderedFrame render_semantic_only(const Generator& gen, const LatentCode& z, const CameraPose& pose, int width,
                                   int height);

}  // namespace sfe::render
