#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "sfe/config.hpp"
#include "sfe/errors.hpp"
#include "sfe/sampling.hpp"
#include "toy.hpp"

using namespace sfe;

TEST(SampleLatent, SameSeedGivesSameVector) {
  Rng a(7);
  Rng b(7);
  EXPECT_EQ(sample_latent(a, 4), sample_latent(b, 4));
}

TEST(SampleLatent, MeanApproachesZero) {
  Rng rng(1);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(128);
  const int draws = 100000 / 128 + 1;
  for (int i = 0; i < draws; ++i) {
    const auto z = sample_latent(rng, 128);
    ASSERT_EQ(z.dim(), 128);
    acc += z.values();
  }
  EXPECT_NEAR(acc.sum() / (128.0 * draws), 0.0, 0.05);
}

TEST(SampleLatent, ZeroDimensionIsAConfigError) {
  Rng rng(0);
  EXPECT_THROW(sample_latent(rng, 0), ConfigError);
}

TEST(LatentCode, RejectsNonFinite) {
  Eigen::VectorXd v(2);
  v << 1.0, std::nan("");
  EXPECT_THROW(LatentCode{v}, DomainError);
}

TEST(SamplePose, DegeneratePriorIsFrontal) {
  Rng rng(3);
  PosePrior prior{0, 0, 0, 0, 0, 0};
  const auto p = sample_pose(rng, prior);
  EXPECT_EQ(p, (CameraPose{0.0, 0.0, 0.0}));
}

TEST(SamplePose, Reproducible) {
  Rng a(11);
  Rng b(11);
  const PosePrior prior;
  for (int i = 0; i < 10; ++i) EXPECT_EQ(sample_pose(a, prior), sample_pose(b, prior));
}

TEST(SamplePose, YawStddevMatchesPrior) {
  Rng rng(5);
  PosePrior prior;
  prior.yaw_std = 0.3;
  const int n = 10000;
  double s = 0.0;
  double s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double y = sample_pose(rng, prior).yaw;
    s += y;
    s2 += y * y;
  }
  const double mean = s / n;
  const double sd = std::sqrt(s2 / n - mean * mean);
  EXPECT_NEAR(sd, 0.3, 0.02);
}

TEST(SamplePose, ClampsIntoRange) {
  Rng rng(2);
  PosePrior prior;
  prior.pitch_std = 10.0;
  prior.yaw_std = 10.0;
  for (int i = 0; i < 1000; ++i) EXPECT_TRUE(sample_pose(rng, prior).valid());
}

TEST(CameraPose, CheckedRejectsOutOfRange) {
  EXPECT_THROW(CameraPose::checked(2.0, 0.0), DomainError);
  EXPECT_THROW(CameraPose::checked(0.0, 4.0), DomainError);
  EXPECT_NO_THROW(CameraPose::checked(0.1, -0.2, 0.3));
}

TEST(Rng, StateRoundTripsIncludingCachedNormal) {
  Rng a(9);
  a.normal();  // leaves a cached deviate
  Rng b(0);
  b.restore(a.state());
  for (int i = 0; i < 5; ++i) EXPECT_EQ(a.normal(), b.normal());
  EXPECT_EQ(a.index(1000), b.index(1000));
}

class ConfigFile : public ::testing::Test {
 protected:
  sfe::testing::TempDir dir;
  std::filesystem::path write(const std::string& text) {
    const auto p = dir / "config.json";
    std::ofstream(p) << text;
    return p;
  }
};

TEST_F(ConfigFile, EmptyFileGivesDefaults) {
  TrainConfig expected;
  validate(expected);
  EXPECT_EQ(load_config(write("")), expected);
  EXPECT_EQ(load_config(write("{}")), expected);
}

TEST_F(ConfigFile, MoreGroupsThanClassesNamesTheKey) {
  try {
    load_config(write(R"({"model": {"num_classes": 4, "num_groups": 5}})"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "model.num_groups");
    EXPECT_NE(std::string(e.what()).find("n exceeds N_cls"), std::string::npos);
  }
}

TEST_F(ConfigFile, TwentyFourLevelsAccepted) {
  EXPECT_EQ(load_config(write(R"({"model": {"num_levels": 24}})")).model.num_levels, 24);
}

TEST_F(ConfigFile, UnknownKeyRejected) {
  try {
    load_config(write(R"({"model": {"latent_dims": 3}})"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "model.latent_dims");
  }
  EXPECT_THROW(load_config(write(R"({"extra": 1})")), ConfigError);
}

TEST_F(ConfigFile, WrongTypeRejected) {
  EXPECT_THROW(load_config(write(R"({"training": {"batch_size": "four"}})")), ConfigError);
}

TEST_F(ConfigFile, MalformedJsonIsAConfigError) { EXPECT_THROW(load_config(write("{model")), ConfigError); }

TEST_F(ConfigFile, RoundTrip) {
  TrainConfig c = sfe::testing::toy_config();
  c.model.appearance_sharing = AppearanceSharing::kFull;
  c.training.seed = 1234567890123ULL;
  c.data.pose_prior.roll_std = 0.01;
  const auto p = dir / "rt.json";
  save_config(c, p);
  EXPECT_EQ(load_config(p), c);
  EXPECT_EQ(config_from_json(to_json(c)), c);
}

TEST(Config, DefaultClubbingCoversNineteenClasses) {
  TrainConfig c;
  validate(c);
  ASSERT_EQ(c.model.clubbing.size(), 19u);
  EXPECT_EQ(c.model.clubbing, default_celebamask_clubbing());
  EXPECT_EQ(c.model.clubbing[0], 0);
}

TEST(Config, ClubbingRequiredWhenNotSquare) {
  TrainConfig c;
  c.model.num_classes = 6;
  c.model.num_groups = 4;
  try {
    validate(c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "model.clubbing");
  }
}

TEST(Config, ClubbingMustHitEveryGroup) {
  TrainConfig c;
  c.model.num_classes = 4;
  c.model.clubbing = {0, 1, 1, 2};
  EXPECT_THROW(validate(c), ConfigError);
}
