#pragma once

// Datasets of (image, fine mask, pose) triplets.
//
// On disk: root/images/<stem>.png (RGB), root/masks/<stem>.png (paletted, one
// byte per label) and root/poses.json mapping stem -> [pitch, yaw, roll].

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sfe/config.hpp"
#include "sfe/sampling.hpp"
#include "sfe/semask.hpp"
#include "sfe/types.hpp"

namespace sfe::data {

struct DatasetRecord {
  std::string stem;
  int width = 0;
  int height = 0;
  std::vector<double> image;  // H*W*3 in [0, 1]
  std::vector<int> mask;      // H*W fine labels
  CameraPose pose;
};

class Dataset {
 public:
  Dataset() = default;
  static Dataset from_records(std::vector<DatasetRecord> records);

  [[nodiscard]] std::size_t size() const { return stems_.size(); }
  [[nodiscard]] bool empty() const { return stems_.empty(); }
  [[nodiscard]] const std::vector<std::string>& stems() const { return stems_; }
  [[nodiscard]] const CameraPose& pose(std::size_t i) const { return poses_.at(i); }
  /// Reads the record from disk for file-backed datasets.
  [[nodiscard]] DatasetRecord record(std::size_t i) const;
  /// Loads every record into memory.
  [[nodiscard]] Dataset materialized() const;
  [[nodiscard]] const std::filesystem::path& root() const { return root_; }

 private:
  friend Dataset load_dataset(const std::filesystem::path& root);
  std::filesystem::path root_;
  std::vector<std::string> stems_;
  std::vector<CameraPose> poses_;
  std::vector<DatasetRecord> memory_;
};

/// Stems are sorted. Throws IoError naming the path of an image without a
/// mask or pose. A missing or empty images/ directory gives an empty dataset.
Dataset load_dataset(const std::filesystem::path& root);

/// Applies the clubbing map per pixel; throws IndexError naming the (x, y) of
/// an out-of-range label.
std::vector<int> club_mask(std::span<const int> fine, int width, const semask::ClubbingMap& clubbing);

/// Synthetic labels.
enum SyntheticLabel : int { kBackground = 0, kFace = 1, kHair = 2, kGarment = 3 };

/// Analytic head scene: background plane, head ellipsoid, hair cap (the part
/// of a larger ellipsoid above the hairline) and a garment box.
struct SceneParams {
  Vec3 head_center{0.0, 0.1, 0.0};
  Vec3 head_radii{0.5, 0.65, 0.55};
  double hair_thickness = 0.08;
  double hairline = 0.25;  // hair exists where y > head_center.y + hairline
  Vec3 garment_min{-0.7, -1.3, -0.35};
  Vec3 garment_max{0.7, -0.45, 0.35};
  double plane_z = -1.0;
  Vec3 skin{0.85, 0.65, 0.5};
  Vec3 hair{0.25, 0.15, 0.08};
  Vec3 garment{0.2, 0.3, 0.7};
  Vec3 background{0.6, 0.6, 0.6};

  [[nodiscard]] Vec3 hair_radii() const { return head_radii.array() + hair_thickness; }
  [[nodiscard]] Vec3 albedo(int label) const;
};

SceneParams sample_scene(Rng& rng);

struct SceneHit {
  int label = kBackground;
  double t = 0.0;
  Vec3 normal = Vec3::UnitZ();
};

/// First surface hit along the ray (t > 0); empty when the ray escapes.
std::optional<SceneHit> trace_scene(const SceneParams& scene, const Ray& ray);

/// Lambert-shaded image and first-hit labels for one view.
DatasetRecord render_scene(const SceneParams& scene, const CameraPose& pose, int width, int height,
                           const RenderConfig& camera, const std::string& stem);

/// Synthetic dataset described by config.data.synthetic, rendered at the
/// config's resolution with poses from config.data.pose_prior.
Dataset synth_generate(const TrainConfig& config, std::uint64_t seed);

void write_dataset(const Dataset& dataset, const std::filesystem::path& root);

}  // namespace sfe::data
