#pragma once

// Run configuration. The on-disk form is a JSON object with the sections
// model, training, data, render and service; every key is optional and
// unknown keys are rejected.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace sfe {

enum class AppearanceSharing {
  kProposed,  // shared backbone, per-group mapping networks and color heads
  kNone,      // nothing shared between groups
  kFull,      // backbone and color head shared, per-group mapping networks
};

struct ModelConfig {
  int latent_dim = 128;
  int num_classes = 19;
  int num_groups = 4;
  std::vector<int> clubbing;  // length num_classes; filled by validation when empty
  std::vector<std::string> group_names{"background", "face", "hair", "garment"};
  int background_class = 0;

  int num_levels = 8;
  double level_min = 0.35;
  double level_max = 1.25;
  int coarse_samples = 32;
  int manifold_width = 32;
  int manifold_depth = 2;

  int geometry_depth = 4;
  int geometry_width = 64;
  int descriptor_dim = 64;
  bool view_dependent_descriptor = false;

  int appearance_depth = 4;
  int appearance_width = 64;
  AppearanceSharing appearance_sharing = AppearanceSharing::kProposed;

  int mapping_width = 64;
  int mapping_layers = 3;
  double film_base_frequency = 30.0;
  double film_frequency_scale = 15.0;

  int discriminator_channels = 32;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct StageWeights {
  double lambda_im = 5.0;  // R1 weight on the image discriminator
  double lambda_s = 1.0;   // R1 weight on the semantic discriminator
  double lambda_p = 10.0;  // pose loss
  double lambda_l = 1.0;   // latent loss
  friend bool operator==(const StageWeights&, const StageWeights&) = default;
};

struct InversionConfig {
  double lambda_s = 10.0;
  double lambda_im = 1.0;
  double lambda_vgg = 1.0;
  double learning_rate = 1e-2;
  int steps = 500;
  int pivot_samples = 10000;
  friend bool operator==(const InversionConfig&, const InversionConfig&) = default;
};

struct TrainingConfig {
  int batch_size = 4;
  double generator_lr = 2e-5;
  double discriminator_lr = 2e-4;
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.9;
  double adam_eps = 1e-8;
  int stage1_iterations = 2000;
  int stage2_iterations = 500;
  StageWeights stage1{5.0, 1.0, 10.0, 1.0};
  StageWeights stage2{1.0, 0.0, 10.0, 0.0};
  InversionConfig inversion;
  int checkpoint_every = 500;
  int log_every = 50;
  std::uint64_t seed = 0;
  bool mixed_precision = false;
  friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

struct PosePrior {
  double pitch_mean = 0.0;
  double pitch_std = 0.15;
  double yaw_mean = 0.0;
  double yaw_std = 0.3;
  double roll_mean = 0.0;
  double roll_std = 0.0;
  friend bool operator==(const PosePrior&, const PosePrior&) = default;
};

struct SyntheticConfig {
  int identities = 64;
  int views_per_identity = 4;
  friend bool operator==(const SyntheticConfig&, const SyntheticConfig&) = default;
};

struct DataConfig {
  std::string root;
  PosePrior pose_prior;
  SyntheticConfig synthetic;
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct RenderConfig {
  int width = 32;
  int height = 32;
  double fov = 0.7;  // vertical field of view, radians
  double orbit_radius = 2.7;
  double scene_bound = 1.3;  // rays are clipped to [radius - bound, radius + bound]
  friend bool operator==(const RenderConfig&, const RenderConfig&) = default;
};

struct ServiceConfig {
  int port = 8080;
  std::string data_dir = "sfe_data";
  std::string static_dir;
  friend bool operator==(const ServiceConfig&, const ServiceConfig&) = default;
};

struct TrainConfig {
  ModelConfig model;
  TrainingConfig training;
  DataConfig data;
  RenderConfig render;
  ServiceConfig service;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// CelebAMask-HQ 19-class map onto {background, face, hair, garment}.
std::vector<int> default_celebamask_clubbing();

/// Checks invariants and fills derived defaults. Throws ConfigError naming the key.
void validate(TrainConfig& config);

TrainConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& config);

/// Reads a JSON config file; an empty file yields all defaults.
TrainConfig load_config(const std::filesystem::path& path);
void save_config(const TrainConfig& config, const std::filesystem::path& path);

std::string to_string(AppearanceSharing sharing);

}  // namespace sfe
