#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "sfe/errors.hpp"
#include "sfe/model_io.hpp"
#include "sfe/train.hpp"
#include "toy.hpp"

using namespace sfe;
using ad::Matrix;
using ad::Var;

namespace {

std::vector<Matrix> snapshot(const nn::ParamList& params) {
  std::vector<Matrix> out;
  for (const auto& [name, p] : params) out.push_back(p->value());
  return out;
}

nn::ParamList geometry_params(train::TrainState& s) {
  nn::ParamList p;
  s.generator.collect_geometry(p);
  return p;
}

nn::ParamList appearance_params(train::TrainState& s) {
  nn::ParamList p;
  s.generator.collect_appearance(p);
  return p;
}

nn::ParamList all_params(train::TrainState& s) {
  nn::ParamList p;
  s.generator.collect(p);
  s.image_disc.collect(p, "disc_c");
  s.semantic_disc.collect(p, "disc_s");
  return p;
}

class TrainFixture : public ::testing::Test {
 protected:
  TrainConfig config = sfe::testing::toy_config();
  data::Dataset dataset = data::synth_generate(config, 5).materialized();

  train::Batch batch(train::TrainState& s) {
    return train::sample_batch(dataset, s.rng, s.config, s.config.training.batch_size);
  }
};

}  // namespace

TEST(Softplus, OddPartIdentity) {
  for (double x = -20.0; x <= 20.0; x += 0.01) {
    EXPECT_NEAR(train::softplus(x) - train::softplus(-x), x, 1e-6);
  }
  EXPECT_DOUBLE_EQ(train::softplus(0.0), std::log(2.0));
  EXPECT_TRUE(std::isfinite(train::softplus(1000.0)));
  EXPECT_DOUBLE_EQ(train::softplus(1000.0), 1000.0);
  EXPECT_EQ(train::softplus(-1000.0), 0.0);
}

TEST(Softplus, GraphOpAgrees) {
  Matrix x(1, 5);
  x << -30.0, -1.0, 0.0, 2.5, 40.0;
  const Matrix y = ad::softplus(Var(x)).value();
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(y(0, i), train::softplus(x(0, i)), 1e-12);
}

TEST(Discriminator, ShapesAndErrors) {
  Rng rng(1);
  const train::Discriminator d(rng, 3, 8, 8, 4, 3);
  std::mt19937_64 g(2);
  const auto out = d(Var(sfe::testing::random_matrix(g, 2 * 64, 3)), 2);
  EXPECT_EQ(out.score.rows(), 2);
  EXPECT_EQ(out.score.cols(), 1);
  EXPECT_EQ(out.aux.cols(), 3);
  EXPECT_THROW(d(Var(Matrix::Zero(64, 3)), 2), ShapeError);
  EXPECT_THROW(d(Var(Matrix::Zero(64, 4)), 1), ShapeError);
}

TEST(R1Penalty, ConstantDiscriminatorHasZeroPenalty) {
  Rng rng(3);
  train::Discriminator d(rng, 3, 8, 8, 4, 3);
  nn::ParamList params;
  d.collect(params, "d");
  for (auto& [name, p] : params) {
    if (name.find(".conv") != std::string::npos) p->mutable_value().setZero();
  }
  std::mt19937_64 g(4);
  EXPECT_EQ(train::r1_penalty(d, sfe::testing::random_matrix(g, 128, 3), 2, 5.0).item(), 0.0);
}

TEST(R1Penalty, NonNegativeAndMatchesFiniteDifferenceGradient) {
  Rng rng(5);
  const train::Discriminator d(rng, 3, 8, 8, 4, 3);
  std::mt19937_64 g(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = sfe::testing::random_matrix(g, 128, 3);
    EXPECT_GE(train::r1_penalty(d, x, 2, 1.0).item(), 0.0);
  }
  // The penalty is lambda / B * |d sum(D) / dx|^2.
  const Matrix x = sfe::testing::random_matrix(g, 64, 3);
  const Matrix grad = sfe::testing::numeric_gradient(
      [&](const Matrix& m) { return d(Var(m), 1).score.value().sum(); }, x);
  EXPECT_NEAR(train::r1_penalty(d, x, 1, 2.0).item(), 2.0 * grad.squaredNorm(), 1e-6 * grad.squaredNorm());
}

TEST(StageWeights, DefaultsFollowTheTwoStageSchedule) {
  TrainConfig c;
  EXPECT_EQ(c.training.stage1.lambda_p, 10.0);
  EXPECT_EQ(c.training.stage1.lambda_l, 1.0);
  EXPECT_EQ(c.training.stage1.lambda_im, 5.0);
  EXPECT_EQ(c.training.stage1.lambda_s, 1.0);
  EXPECT_EQ(c.training.stage2.lambda_im, 1.0);
  EXPECT_EQ(c.training.stage2.lambda_p, 10.0);
  EXPECT_EQ(c.training.stage2.lambda_s, 0.0);
  EXPECT_EQ(c.training.stage2.lambda_l, 0.0);
  EXPECT_EQ(c.training.generator_lr, 2e-5);
  EXPECT_EQ(c.training.discriminator_lr, 2e-4);
}

TEST(StageWeights, FullProfileSchedule) {
  const auto c = load_config(std::filesystem::path(SFE_CONFIG_DIR) / "full.json");
  EXPECT_EQ(c.training.stage1_iterations, 120000);
  EXPECT_EQ(c.training.stage2_iterations, 30000);
  EXPECT_EQ(c.model.num_levels, 24);
  EXPECT_EQ(c.model.geometry_depth, 8);
  EXPECT_EQ(c.model.appearance_depth, 8);
}

TEST(StageWeights, DeskProfileSchedule) {
  const auto c = load_config(std::filesystem::path(SFE_CONFIG_DIR) / "desk.json");
  EXPECT_EQ(c.training.stage1_iterations, 2000);
  EXPECT_EQ(c.training.stage2_iterations, 500);
  EXPECT_EQ(c.training.batch_size, 4);
  EXPECT_EQ(c.render.width, 32);
  EXPECT_EQ(c.render.height, 32);
}

TEST(PoseLoss, PerfectPredictionIsZero) {
  const std::vector<CameraPose> poses{{0.1, -0.3, 0.0}, {0.0, 0.2, 0.05}};
  const Matrix m = train::pose_matrix(poses);
  EXPECT_EQ(ad::mse(Var(m), Var(m)).item(), 0.0);
}

TEST_F(TrainFixture, SemanticDiscriminatorReadsClassChannels) {
  auto s = train::init_state(config);
  EXPECT_EQ(s.semantic_disc.in_channels(), config.model.num_classes);
  EXPECT_EQ(s.image_disc.in_channels(), 3);
  const auto b = batch(s);
  EXPECT_EQ(b.semantic.cols(), config.model.num_classes);
  for (Eigen::Index r = 0; r < b.semantic.rows(); ++r) EXPECT_EQ(b.semantic.row(r).sum(), 1.0);
  const auto fakes = train::render_fakes(s, 2);
  EXPECT_EQ(fakes.semantic.cols(), config.model.num_classes);
  for (Eigen::Index r = 0; r < fakes.semantic.rows(); ++r) EXPECT_NEAR(fakes.semantic.value().row(r).sum(), 1.0, 1e-12);
}

TEST_F(TrainFixture, ZeroLearningRatesLeaveParametersUnchanged) {
  config.training.generator_lr = 0.0;
  config.training.discriminator_lr = 0.0;
  auto s = train::init_state(config);
  const auto params = all_params(s);
  const auto before = snapshot(params);
  for (int i = 0; i < 4; ++i) train::train_step(s, batch(s));
  EXPECT_EQ(s.stage, 2);
  EXPECT_EQ(snapshot(params), before);
}

TEST_F(TrainFixture, StageTwoFreezesGeometry) {
  config.training.stage1_iterations = 1;
  config.training.stage2_iterations = 3;
  auto s = train::init_state(config);
  train::train_step(s, batch(s));
  ASSERT_EQ(s.stage, 1);
  const auto geo_before = snapshot(geometry_params(s));
  const auto app_before = snapshot(appearance_params(s));
  for (int i = 0; i < 3; ++i) {
    const auto m = train::train_step(s, batch(s));
    EXPECT_EQ(m.stage, 2);
  }
  EXPECT_EQ(snapshot(geometry_params(s)), geo_before);
  EXPECT_NE(snapshot(appearance_params(s)), app_before);
  for (const auto& [name, p] : geometry_params(s)) EXPECT_TRUE(p->requires_grad()) << name;
}

TEST_F(TrainFixture, StageOneUpdatesGeometry) {
  auto s = train::init_state(config);
  const auto geo_before = snapshot(geometry_params(s));
  train::train_step(s, batch(s));
  EXPECT_NE(snapshot(geometry_params(s)), geo_before);
}

TEST_F(TrainFixture, HundredStepsStayFinite) {
  config.training.stage1_iterations = 80;
  config.training.stage2_iterations = 20;
  auto s = train::init_state(config);
  for (int i = 0; i < 100; ++i) {
    const auto m = train::train_step(s, batch(s));
    ASSERT_TRUE(std::isfinite(m.loss_d) && std::isfinite(m.loss_g) && std::isfinite(m.r1) &&
                std::isfinite(m.pose_mse) && std::isfinite(m.latent_mse))
        << "step " << i;
    ASSERT_GE(m.r1, 0.0);
  }
  EXPECT_TRUE(s.finished());
  EXPECT_THROW(train::train_step(s, batch(s)), DomainError);
}

TEST_F(TrainFixture, ResumeMatchesUninterruptedRun) {
  sfe::testing::TempDir dir;
  train::RunOptions straight;
  straight.out_dir = dir / "straight";
  straight.write_samples = false;
  const auto a = train::run_training(config, dataset, straight);
  EXPECT_EQ(a.steps_run, 5);
  EXPECT_EQ(a.final_iteration, 5);

  train::RunOptions first;
  first.out_dir = dir / "split";
  first.max_steps = 2;
  first.write_samples = false;
  const auto b1 = train::run_training(config, dataset, first);
  EXPECT_EQ(b1.final_iteration, 2);
  ASSERT_EQ(b1.last_checkpoint, dir / "split" / "ckpt_000002.sfe");
  train::RunOptions second = first;
  second.max_steps = -1;
  second.resume = b1.last_checkpoint;
  const auto b2 = train::run_training(config, dataset, second);
  EXPECT_EQ(b2.final_iteration, 5);

  const auto ca = ckpt::load(a.last_checkpoint);
  const auto cb = ckpt::load(b2.last_checkpoint);
  ASSERT_EQ(ca.tensors.size(), cb.tensors.size());
  for (const auto& [name, t] : ca.tensors) EXPECT_EQ(t.value, cb.at(name).value) << name;
  EXPECT_EQ(ca.meta, cb.meta);
  EXPECT_EQ(io::read_file(a.last_checkpoint), io::read_file(b2.last_checkpoint));
}

TEST_F(TrainFixture, FinishedRunHasNothingToDo) {
  sfe::testing::TempDir dir;
  train::RunOptions opts;
  opts.out_dir = dir.path();
  const auto a = train::run_training(config, dataset, opts);
  opts.resume = a.last_checkpoint;
  const auto b = train::run_training(config, dataset, opts);
  EXPECT_TRUE(b.nothing_to_do);
  EXPECT_EQ(b.steps_run, 0);
}

TEST_F(TrainFixture, MetricsLogAndCheckpointsWritten) {
  sfe::testing::TempDir dir;
  train::RunOptions opts;
  opts.out_dir = dir.path();
  int seen = 0;
  opts.on_step = [&](const train::StepMetrics&) { ++seen; };
  train::run_training(config, dataset, opts);
  EXPECT_EQ(seen, 5);
  std::ifstream log(dir / "metrics.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"iter", "stage", "loss_d", "loss_g", "r1", "pose_mse", "latent_mse"}) {
      EXPECT_TRUE(j.contains(key)) << key;
    }
    ++lines;
  }
  EXPECT_EQ(lines, 5);
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt_000002.sfe"));
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt_000004.sfe"));
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt_000005.sfe"));
  EXPECT_TRUE(std::filesystem::exists(dir / "samples_000005.png"));
  // A training state also loads as a plain generator.
  EXPECT_NO_THROW(load_generator(dir / "ckpt_000005.sfe"));
}

TEST_F(TrainFixture, NumericalFailureWritesAbortCheckpoint) {
  sfe::testing::TempDir dir;
  auto s = train::init_state(config);
  train::train_step(s, batch(s));
  nn::ParamList params;
  s.generator.collect(params);
  for (auto& [name, p] : params) {
    if (name == "geometry.layer0.weight") p->mutable_value()(0, 0) = std::numeric_limits<double>::quiet_NaN();
  }
  train::save_state(s, dir / "bad.sfe");
  train::RunOptions opts;
  opts.out_dir = dir / "run";
  opts.resume = dir / "bad.sfe";
  EXPECT_THROW(train::run_training(config, dataset, opts), NumericalError);
  ASSERT_TRUE(std::filesystem::exists(dir / "run" / "abort.sfe"));
  EXPECT_EQ(train::load_state(dir / "run" / "abort.sfe").iteration, 1);
}

TEST_F(TrainFixture, MissingPosesRejected) {
  auto s = train::init_state(config);
  auto b = batch(s);
  b.poses.pop_back();
  const auto fakes = train::render_fakes(s, 2);
  EXPECT_THROW(train::d_losses(s.image_disc, s.semantic_disc, b, fakes, config.training.stage1, true), ConfigError);
}

TEST_F(TrainFixture, BatchValidation) {
  auto rec = dataset.record(0);
  auto wrong_size = rec;
  wrong_size.width = 4;
  EXPECT_THROW(train::make_batch({wrong_size}, config), ShapeError);
  auto bad_label = rec;
  bad_label.mask[5] = config.model.num_classes;
  try {
    train::make_batch({bad_label}, config);
    FAIL();
  } catch (const IndexError& e) {
    EXPECT_NE(std::string(e.what()).find("(5, 0)"), std::string::npos) << e.what();
  }
  EXPECT_THROW(train::run_training(config, data::Dataset{}, train::RunOptions{}), ConfigError);
}

TEST_F(TrainFixture, StateRoundTripIsExact) {
  sfe::testing::TempDir dir;
  auto s = train::init_state(config);
  train::train_step(s, batch(s));
  train::save_state(s, dir / "s.sfe");
  auto r = train::load_state(dir / "s.sfe");
  EXPECT_EQ(r.iteration, s.iteration);
  EXPECT_EQ(r.stage, s.stage);
  EXPECT_EQ(r.rng.state(), s.rng.state());
  EXPECT_EQ(snapshot(all_params(r)), snapshot(all_params(s)));
  EXPECT_EQ(r.g_opt.first_moments(), s.g_opt.first_moments());
  EXPECT_EQ(r.dc_opt.second_moments(), s.dc_opt.second_moments());
  EXPECT_EQ(r.ds_opt.steps(), s.ds_opt.steps());
}
