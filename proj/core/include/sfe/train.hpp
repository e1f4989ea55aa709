#pragma once

// Two-stage adversarial training.
//
// Stage 1 trains the whole generator against an image discriminator D_c (with
// a pose head) and a semantic discriminator D_s (with a latent head). Stage 2
// freezes the manifold and geometry networks and trains appearance only
// against D_c.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sfe/checkpoint.hpp"
#include "sfe/conv.hpp"
#include "sfe/data.hpp"
#include "sfe/render.hpp"

namespace sfe::train {

/// Strided convolution stack with a real/fake score head and an auxiliary
/// regression head (pose for images, latent code for semantic maps).
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(Rng& rng, int in_channels, int resolution_h, int resolution_w, int channels, int aux_outputs);

  struct Output {
    ad::Var score;  // (B, 1)
    ad::Var aux;    // (B, aux_outputs)
  };

  /// `images` holds one pixel per row, (batch, y, x) order.
  [[nodiscard]] Output operator()(const ad::Var& images, int batch) const;
  [[nodiscard]] int in_channels() const { return in_channels_; }
  void collect(nn::ParamList& out, const std::string& prefix);

 private:
  std::vector<nn::Conv2d> convs_;
  nn::Linear score_;
  nn::Linear aux_;
  int in_channels_ = 3;
  int height_ = 0;
  int width_ = 0;
};

/// softplus(x) = log(1 + exp(x)).
double softplus(double x);

struct Batch {
  int size = 0;
  ad::Matrix images;    // (B*H*W, 3)
  ad::Matrix semantic;  // (B*H*W, N_cls) one-hot
  std::vector<CameraPose> poses;
};

/// Samples `batch` records with replacement. Throws ShapeError when the
/// resolution differs from the render config and IndexError for labels >= N_cls.
Batch sample_batch(const data::Dataset& dataset, Rng& rng, const TrainConfig& config, int batch);
Batch make_batch(const std::vector<data::DatasetRecord>& records, const TrainConfig& config);

ad::Matrix pose_matrix(std::span<const CameraPose> poses);

struct Fakes {
  render::Latents latents;
  std::vector<CameraPose> poses;
  ad::Var images;    // (B*H*W, 3), attached to the generator graph
  ad::Var semantic;  // (B*H*W, N_cls)
};

struct LossTerms {
  ad::Var total;
  double adversarial = 0.0;
  double r1 = 0.0;
  double pose_mse = 0.0;
  double latent_mse = 0.0;
};

/// Discriminator objective. Fakes are detached inside. `use_semantic` turns
/// the D_s terms on (stage 1).
LossTerms d_losses(const Discriminator& image_disc, const Discriminator& semantic_disc, const Batch& real,
                   const Fakes& fake, const StageWeights& weights, bool use_semantic);

/// Generator objective; gradients reach the generator through the fakes.
LossTerms g_losses(const Discriminator& image_disc, const Discriminator& semantic_disc, const Fakes& fake,
                   const StageWeights& weights, bool use_semantic);

/// lambda * mean over the batch of |grad_x sum(D(x))|^2 at the given inputs.
ad::Var r1_penalty(const Discriminator& disc, const ad::Matrix& inputs, int batch, double lambda);

struct TrainState {
  TrainConfig config;
  render::Generator generator;
  Discriminator image_disc;
  Discriminator semantic_disc;
  nn::Adam g_opt;
  nn::Adam dc_opt;
  nn::Adam ds_opt;
  std::int64_t iteration = 0;
  int stage = 1;
  Rng rng;

  [[nodiscard]] std::int64_t total_iterations() const {
    return static_cast<std::int64_t>(config.training.stage1_iterations) + config.training.stage2_iterations;
  }
  [[nodiscard]] bool finished() const { return iteration >= total_iterations(); }
};

TrainState init_state(const TrainConfig& config);

struct StepMetrics {
  std::int64_t iter = 0;
  int stage = 1;
  double loss_d = 0.0;
  double loss_g = 0.0;
  double r1 = 0.0;
  double pose_mse = 0.0;
  double latent_mse = 0.0;
};

nlohmann::json to_json(const StepMetrics& m);

/// Renders a batch of fakes with fresh latents and poses from the state's RNG.
Fakes render_fakes(TrainState& state, int batch);

/// One D update followed by one G update. Enters stage 2 (fresh generator
/// optimizer over appearance parameters) when the stage-1 budget is used up.
/// Throws NumericalError, without applying the failing update, when a loss or
/// gradient is non-finite.
StepMetrics train_step(TrainState& state, const Batch& batch);

/// Parameters trained in the current stage.
nn::ParamList generator_trainables(TrainState& state);

ckpt::Container state_to_container(const TrainState& state);
TrainState state_from_container(const ckpt::Container& c);
void save_state(const TrainState& state, const std::filesystem::path& path);
TrainState load_state(const std::filesystem::path& path);

struct RunOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  /// Stops after this many steps in this call (for tests); -1 runs to the end.
  std::int64_t max_steps = -1;
  std::function<void(const StepMetrics&)> on_step;
  bool write_samples = true;
};

struct RunSummary {
  bool nothing_to_do = false;
  std::int64_t steps_run = 0;
  std::int64_t final_iteration = 0;
  std::filesystem::path last_checkpoint;
};

/// Runs the schedule, appending metrics to out_dir/metrics.jsonl and writing
/// out_dir/ckpt_<iter>.sfe every checkpoint_every steps and at the end. On a
/// numerical failure the last finite state is written to out_dir/abort.sfe
/// before the error propagates.
RunSummary run_training(const TrainConfig& config, const data::Dataset& dataset, const RunOptions& options);

std::string checkpoint_name(std::int64_t iteration);

}  // namespace sfe::train
