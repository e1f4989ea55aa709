#include <gtest/gtest.h>

#include <random>

#include "sfe/errors.hpp"
#include "sfe/render.hpp"
#include "toy.hpp"

using namespace sfe;
using ad::Matrix;
using ad::Var;

namespace {

Var* find_param(nn::ParamList& params, const std::string& name) {
  for (auto& [n, p] : params) {
    if (n == name) return p;
  }
  return nullptr;
}

struct Codes {
  LatentCode z;
  std::vector<LatentCode> z_groups;
};

Codes sample_codes(Rng& rng, const render::Generator& gen) {
  Codes c{sample_latent(rng, gen.model().latent_dim), {}};
  for (int i = 0; i < gen.model().num_groups; ++i) c.z_groups.push_back(sample_latent(rng, gen.model().latent_dim));
  return c;
}

}  // namespace

class Render : public ::testing::Test {
 protected:
  TrainConfig config = sfe::testing::toy_config();
  render::Generator gen{config, 7};
  Rng rng{3};
  CameraPose pose{0.1, -0.2, 0.0};
};

TEST_F(Render, EmptySceneIsUniformBackground) {
  nn::ParamList params;
  gen.collect(params);
  // Lift the field far above every iso level.
  find_param(params, "manifold.output.bias")->mutable_value().setConstant(100.0);
  find_param(params, "background_logit")->mutable_value() << 0.3, -0.4, 1.2;
  const auto codes = sample_codes(rng, gen);
  const auto f = render::render_frame(gen, codes.z, codes.z_groups, pose, 8, 6);
  ASSERT_EQ(f.rgb.size(), 8u * 6u * 3u);
  const double expected[3] = {1.0 / (1.0 + std::exp(-0.3)), 1.0 / (1.0 + std::exp(0.4)), 1.0 / (1.0 + std::exp(-1.2))};
  for (std::size_t p = 0; p < 48; ++p) {
    for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(f.rgb[p * 3 + static_cast<std::size_t>(c)], expected[c]);
    EXPECT_EQ(f.labels[p], gen.clubbing()(gen.model().background_class));
    EXPECT_EQ(f.fine_probs[p * 4 + static_cast<std::size_t>(gen.model().background_class)], 1.0);
  }
}

TEST_F(Render, Deterministic) {
  const auto codes = sample_codes(rng, gen);
  const auto a = render::render_frame(gen, codes.z, codes.z_groups, pose, 8, 8);
  const auto b = render::render_frame(gen, codes.z, codes.z_groups, pose, 8, 8);
  EXPECT_EQ(a.rgb, b.rgb);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.group_probs, b.group_probs);
  EXPECT_EQ(a.depth, b.depth);
}

TEST_F(Render, SemanticOnlyLabelsMatchFullRender) {
  for (int trial = 0; trial < 5; ++trial) {
    const auto codes = sample_codes(rng, gen);
    const auto full = render::render_frame(gen, codes.z, codes.z_groups, pose, 8, 8);
    const auto sem = render::render_semantic_only(gen, codes.z, pose, 8, 8);
    EXPECT_EQ(full.labels, sem.labels);
    EXPECT_EQ(full.fine_labels, sem.fine_labels);
    EXPECT_TRUE(sem.rgb.empty());
  }
}

TEST_F(Render, OneHotFieldRecoversHitMask) {
  nn::ParamList params;
  gen.collect(params);
  // Opaque everywhere and always class 2.
  find_param(params, "geometry.sigma_head.weight")->mutable_value().setZero();
  find_param(params, "geometry.sigma_head.bias")->mutable_value().setConstant(50.0);
  find_param(params, "geometry.semantic_head.weight")->mutable_value().setZero();
  find_param(params, "geometry.semantic_head.bias")->mutable_value() << -50.0, -50.0, 50.0, -50.0;
  const auto codes = sample_codes(rng, gen);
  const auto f = render::render_semantic_only(gen, codes.z, pose, 8, 8);
  const auto rays = manifold::generate_rays(pose, 8, 8, gen.intrinsics());
  const auto hits = manifold::intersect_rays(gen.manifold(), gen.levels(), rays, gen.model().coarse_samples);
  int hit_count = 0;
  for (std::size_t r = 0; r < rays.size(); ++r) {
    const bool any = hits[r].front().valid();
    hit_count += any ? 1 : 0;
    EXPECT_EQ(f.labels[r], any ? 2 : 0) << "pixel " << r;
  }
  EXPECT_GT(hit_count, 0);
}

TEST_F(Render, LabelsMatchBruteForceOnRandomRays) {
  for (int trial = 0; trial < 3; ++trial) {
    const auto codes = sample_codes(rng, gen);
    const CameraPose p{rng.uniform(-0.3, 0.3), rng.uniform(-0.6, 0.6), 0.0};
    const auto frame = render::render_semantic_only(gen, codes.z, p, 8, 8);
    const auto rays = manifold::generate_rays(p, 8, 8, gen.intrinsics());
    ASSERT_EQ(rays.size(), 64u);
    const auto hits = manifold::intersect_rays(gen.manifold(), gen.levels(), rays, gen.model().coarse_samples);
    ad::NoGradGuard ng;
    const auto film = gen.geometry().map(render::make_latents(codes.z, {}).geometry);
    for (std::size_t r = 0; r < rays.size(); ++r) {
      std::vector<Vec3> pts;
      for (const auto& h : hits[r]) {
        if (h.valid()) pts.push_back(*h.position);
      }
      const int bg = gen.model().background_class;
      std::vector<double> acc(static_cast<std::size_t>(gen.model().num_classes), 0.0);
      double transmittance = 1.0;
      if (!pts.empty()) {
        Matrix x(static_cast<Eigen::Index>(pts.size()), 3);
        for (std::size_t j = 0; j < pts.size(); ++j) x.row(static_cast<Eigen::Index>(j)) = pts[j].transpose();
        const auto out = gen.geometry().forward(
            film.gather_rows(ad::make_index(std::vector<std::int64_t>(pts.size(), 0))), Var(x));
        for (std::size_t j = 0; j < pts.size(); ++j) {
          const auto row = static_cast<Eigen::Index>(j);
          const double sigma = out.sigma.value()(row, 0);
          const Eigen::RowVectorXd logits = out.sem_logits.value().row(row);
          const Eigen::RowVectorXd e = (logits.array() - logits.maxCoeff()).exp();
          const Eigen::RowVectorXd prob = e / e.sum();
          for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += sigma * transmittance * prob[static_cast<Eigen::Index>(c)];
          transmittance *= 1.0 - sigma;
        }
      }
      acc[static_cast<std::size_t>(bg)] += transmittance;
      const int fine = static_cast<int>(std::max_element(acc.begin(), acc.end()) - acc.begin());
      EXPECT_EQ(frame.fine_labels[r], fine) << "ray " << r;
      EXPECT_EQ(frame.labels[r], gen.clubbing()(fine));
    }
  }
}

TEST_F(Render, PixelsOfOneGroupIgnoreOtherLatents) {
  int checked = 0;
  for (int trial = 0; trial < 5; ++trial) {
    auto codes = sample_codes(rng, gen);
    ad::NoGradGuard ng;
    const auto styles = render::map_latents(gen, render::make_latents(codes.z, codes.z_groups));
    const auto base = render::render(gen, styles, std::span<const CameraPose>(&pose, 1), 8, 8);
    for (int k = 0; k < gen.model().num_groups; ++k) {
      auto changed_codes = codes;
      changed_codes.z_groups[static_cast<std::size_t>(k)] = sample_latent(rng, gen.model().latent_dim);
      const auto changed = render::render(
          gen, render::map_latents(gen, render::make_latents(changed_codes.z, changed_codes.z_groups)),
          std::span<const CameraPose>(&pose, 1), 8, 8);
      for (Eigen::Index r = 0; r < 64; ++r) {
        const auto b = (*base.segments)[static_cast<std::size_t>(r)];
        const auto e = (*base.segments)[static_cast<std::size_t>(r + 1)];
        bool untouched = true;
        for (auto j = b; j < e; ++j) untouched = untouched && base.grouping.labels[static_cast<std::size_t>(j)] != k;
        if (!untouched) continue;
        ++checked;
        for (int c = 0; c < 3; ++c) ASSERT_EQ(base.rgb.value()(r, c), changed.rgb.value()(r, c));
      }
    }
  }
  EXPECT_GT(checked, 0);
}

TEST_F(Render, FrameMeanGradientWrtGeometryLatent) {
  const auto codes = sample_codes(rng, gen);
  Matrix z0(1, gen.model().latent_dim);
  for (int i = 0; i < z0.cols(); ++i) z0(0, i) = codes.z[i];
  auto latents = render::make_latents(codes.z, codes.z_groups);
  latents.geometry = Var::parameter(z0);
  const auto result = render::render(gen, render::map_latents(gen, latents), std::span<const CameraPose>(&pose, 1), 8, 8);
  const Matrix analytic = ad::gradients(ad::mean(result.rgb), {latents.geometry})[0].value();
  const Matrix numeric = sfe::testing::numeric_gradient(
      [&](const Matrix& m) {
        Eigen::VectorXd v = m.row(0).transpose();
        return Eigen::Map<const Eigen::VectorXd>(
                   render::render_frame(gen, LatentCode(v), codes.z_groups, pose, 8, 8).rgb.data(), 192)
            .mean();
      },
      z0);
  EXPECT_GT(analytic.norm(), 0.0);
  EXPECT_LT(sfe::testing::relative_error(analytic, numeric), 1e-3);
}

TEST_F(Render, ProbabilitiesAreDistributions) {
  const auto codes = sample_codes(rng, gen);
  const auto f = render::render_frame(gen, codes.z, codes.z_groups, pose, 8, 8);
  const int n = gen.model().num_groups;
  for (std::size_t p = 0; p < 64; ++p) {
    double s = 0.0;
    for (int g = 0; g < n; ++g) s += f.group_probs[p * static_cast<std::size_t>(n) + static_cast<std::size_t>(g)];
    EXPECT_NEAR(s, 1.0, 1e-12);
    for (int c = 0; c < 3; ++c) {
      EXPECT_GE(f.rgb[p * 3 + static_cast<std::size_t>(c)], 0.0);
      EXPECT_LE(f.rgb[p * 3 + static_cast<std::size_t>(c)], 1.0);
    }
  }
}

TEST_F(Render, BatchedFramesMatchSingleFrames) {
  const auto l = render::sample_latents(rng, gen, 3);
  const std::vector<CameraPose> poses{pose, CameraPose{}, CameraPose{0.0, 0.5, 0.0}};
  ad::NoGradGuard ng;
  const auto batched = render::render(gen, render::map_latents(gen, l), poses, 6, 6);
  for (int b = 0; b < 3; ++b) {
    render::Latents one;
    one.geometry = Var(Matrix(l.geometry.value().row(b)));
    for (const auto& a : l.appearance) one.appearance.push_back(Var(Matrix(a.value().row(b))));
    const auto single = render::render(gen, render::map_latents(gen, one), std::span<const CameraPose>(&poses[static_cast<std::size_t>(b)], 1), 6, 6);
    const auto fb = render::to_frame(batched, b);
    const auto fs = render::to_frame(single, 0);
    EXPECT_EQ(fb.labels, fs.labels);
    for (std::size_t i = 0; i < fb.rgb.size(); ++i) EXPECT_NEAR(fb.rgb[i], fs.rgb[i], 1e-12);
  }
}

TEST_F(Render, ZeroResolutionRejected) {
  const auto codes = sample_codes(rng, gen);
  EXPECT_THROW(render::render_frame(gen, codes.z, codes.z_groups, pose, 0, 8), DomainError);
  EXPECT_THROW(render::render_semantic_only(gen, codes.z, pose, 8, 0), DomainError);
}

TEST_F(Render, WrongLatentSizeRejected) {
  const auto codes = sample_codes(rng, gen);
  EXPECT_THROW(render::render_frame(gen, LatentCode::zeros(3), codes.z_groups, pose, 4, 4), ShapeError);
}

TEST_F(Render, NonFiniteNetworkOutputRaises) {
  nn::ParamList params;
  gen.collect(params);
  find_param(params, "geometry.layer0.weight")->mutable_value()(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto codes = sample_codes(rng, gen);
  EXPECT_THROW(render::render_frame(gen, codes.z, codes.z_groups, pose, 8, 8), NumericalError);
}

TEST(RenderBudget, FullScaleRadianceEvaluations) {
  // 256 x 256 pixels, 24 manifold samples per ray, one geometry and one
  // appearance evaluation per sample.
  const long long per_field = 256LL * 256LL * 24LL;
  EXPECT_EQ(per_field * 2, 3145728);
  EXPECT_NEAR(static_cast<double>(per_field * 2) / 1e6, 3.14, 0.01);
}
