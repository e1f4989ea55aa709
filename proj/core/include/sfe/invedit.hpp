#pragma once

// Inversion into FiLM space around a pivot, mask-driven editing, per-group
// transfer between inversions and mean IoU.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfe/checkpoint.hpp"
#include "sfe/conv.hpp"
#include "sfe/render.hpp"

namespace sfe::invedit {

/// Mean FiLM rows of the mapping networks: geometry (1 x 2LW) and one row per group.
struct PivotLatent {
  ad::Matrix geometry;
  std::vector<ad::Matrix> appearance;
};

PivotLatent compute_pivot(const render::Generator& gen, int sample_count, std::uint64_t seed);

/// Per-layer offsets added to the pivot rows.
struct EditOffset {
  ad::Matrix geometry;
  std::vector<ad::Matrix> appearance;

  static EditOffset zeros(const PivotLatent& pivot);
  [[nodiscard]] bool compatible(const PivotLatent& pivot) const;
  friend bool operator==(const EditOffset&, const EditOffset&) = default;
};

render::Styles make_styles(const render::Generator& gen, const PivotLatent& pivot, const EditOffset& offset);

render::RenderedFrame render_offset(const render::Generator& gen, const PivotLatent& pivot, const EditOffset& offset,
                                    const CameraPose& pose, int width, int height);

struct MiouResult {
  std::vector<double> per_class;  // NaN for classes absent from both maps
  double mean = 1.0;
};

/// Throws ShapeError on a size mismatch and IndexError for labels outside [0, n).
MiouResult miou(std::span<const int> pred, std::span<const int> gt, int n);

/// Fixed random-weight convolutional features used for the perceptual term.
class PerceptualExtractor {
 public:
  explicit PerceptualExtractor(std::uint64_t seed = 0x5fe);
  /// images: (B*H*W, 3) in [0, 1].
  [[nodiscard]] ad::Var features(const ad::Var& images, const nn::ImageShape& shape) const;

 private:
  nn::Conv2d conv1_;
  nn::Conv2d conv2_;
};

struct Target {
  int width = 0;
  int height = 0;
  CameraPose pose;
  std::vector<double> rgb;  // H*W*3
  std::vector<int> labels;  // H*W group labels
  /// Optional soft semantic target (H*W*n); overrides the one-hot of `labels` in the loss.
  std::vector<double> group_probs;
};

struct LossWeights {
  double lambda_s = 10.0;
  double lambda_im = 1.0;
  double lambda_vgg = 1.0;
};

struct TraceEntry {
  int iter = 0;
  double loss = 0.0;
  double semantic = 0.0;
  double image = 0.0;
  double perceptual = 0.0;
  double image_mse = 0.0;  // unmasked, unweighted
  double miou = 0.0;
};

nlohmann::json to_json(const TraceEntry& e);

struct OptimizeOptions {
  LossWeights weights;
  double learning_rate = 1e-2;
  int steps = 500;
  bool optimize_geometry = true;
  bool optimize_appearance = true;
  std::function<void(const TraceEntry&)> on_step;
  /// Polled before every step; returning true stops early.
  std::function<bool()> cancelled;
};

OptimizeOptions options_from(const InversionConfig& config);

struct OptimizeResult {
  EditOffset offset;
  std::vector<TraceEntry> trace;  // one entry per evaluated iterate, starting at 0
  double final_miou = 0.0;
  bool stopped_early = false;
  std::vector<std::string> warnings;
};

/// Loss value of `offset` against `target` with per-pixel image weights
/// (empty = all ones). Exposed for tests of the masked-loss contract.
TraceEntry evaluate_loss(const render::Generator& gen, const PivotLatent& pivot, const EditOffset& offset,
                         const Target& target, std::span<const double> pixel_weights, const LossWeights& weights);

/// Optimizes offsets starting from `start` (zero when absent).
OptimizeResult invert(const render::Generator& gen, const PivotLatent& pivot, const Target& target,
                      const OptimizeOptions& options, const std::optional<EditOffset>& start = std::nullopt);

struct EditRequest {
  Target original;                  // the inverted image and its labels S
  std::vector<int> edited_labels;   // S_ed
  std::optional<std::vector<std::uint8_t>> region;  // r; derived from S != S_ed when absent
};

/// Pixels whose label differs between the two maps.
std::vector<std::uint8_t> label_diff(std::span<const int> a, std::span<const int> b);

OptimizeResult edit(const render::Generator& gen, const PivotLatent& pivot, const EditOffset& inverted,
                    const EditRequest& request, const OptimizeOptions& options);

/// Copy of `source` with group k's appearance offset taken from `target`.
EditOffset transfer_appearance(const EditOffset& source, const EditOffset& target, int group);
/// Exchanges group k's appearance offsets in place.
void swap_appearance(EditOffset& a, EditOffset& b, int group);

/// Optimizes the geometry offset of `source` so the rendering matches the
/// source outside M_k and the target inside, where M_k is the target's group-k mask.
OptimizeResult transfer_geometry(const render::Generator& gen, const PivotLatent& pivot, const EditOffset& source,
                                 const Target& source_target, const Target& target_target, int group,
                                 const OptimizeOptions& options);

// ---- persistence ----------------------------------------------------------

struct InversionArtifact {
  PivotLatent pivot;
  EditOffset offset;
  nlohmann::json meta = nlohmann::json::object();
};

void save_pivot(const PivotLatent& pivot, const std::filesystem::path& path);
PivotLatent load_pivot(const std::filesystem::path& path);
void save_inversion(const InversionArtifact& artifact, const std::filesystem::path& path);
InversionArtifact load_inversion(const std::filesystem::path& path);

}  // namespace sfe::invedit
