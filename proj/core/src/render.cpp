#include "sfe/render.hpp"

#include <algorithm>
#include <numeric>

#include "sfe/errors.hpp"

namespace sfe::render {

Generator::Generator(TrainConfig config, std::uint64_t seed) : config_(std::move(config)) {
  validate(config_);
  const ModelConfig& m = config_.model;
  Rng rng(seed);
  manifold_ = manifold::ManifoldNetwork(rng, m.manifold_width, m.manifold_depth);
  geometry_ = geometry::GeometryNetwork(rng, m);
  appearance_ = appearance::AppearanceNetwork(rng, m);
  background_logit_ = ad::Var::parameter(ad::Matrix::Zero(1, 3));
  levels_ = manifold::IsoLevels::equally_spaced(m.level_min, m.level_max, m.num_levels);
  clubbing_ = semask::ClubbingMap(m.clubbing, m.num_groups);
}

manifold::Intrinsics Generator::intrinsics() const {
  const RenderConfig& r = config_.render;
  return {r.fov, r.orbit_radius, r.orbit_radius - r.scene_bound, r.orbit_radius + r.scene_bound};
}

void Generator::collect_geometry(nn::ParamList& out) {
  manifold_.collect(out, "manifold");
  geometry_.collect(out, "geometry");
}

void Generator::collect_appearance(nn::ParamList& out) {
  appearance_.collect(out, "appearance");
  out.emplace_back("background_logit", &background_logit_);
}

void Generator::collect(nn::ParamList& out) {
  collect_geometry(out);
  collect_appearance(out);
}

Styles map_latents(const Generator& gen, const Latents& latents) {
  Styles s;
  s.geometry = gen.geometry().map(latents.geometry);
  for (std::size_t g = 0; g < latents.appearance.size(); ++g) {
    s.appearance.push_back(gen.appearance().map(static_cast<int>(g), latents.appearance[g]));
  }
  return s;
}

namespace {

ad::Var row_of(const LatentCode& z) {
  ad::Matrix m(1, z.dim());
  for (int i = 0; i < z.dim(); ++i) m(0, i) = z[i];
  return ad::Var(std::move(m));
}

int argmax_row(const ad::Matrix& m, Eigen::Index r) {
  int best = 0;
  for (Eigen::Index c = 1; c < m.cols(); ++c) {
    if (m(r, c) > m(r, best)) best = static_cast<int>(c);
  }
  return best;
}

}  // namespace

Latents make_latents(const LatentCode& z, const std::vector<LatentCode>& z_groups) {
  Latents l;
  l.geometry = row_of(z);
  for (const auto& zg : z_groups) l.appearance.push_back(row_of(zg));
  return l;
}

Latents sample_latents(Rng& rng, const Generator& gen, int batch) {
  const int d = gen.model().latent_dim;
  const int n = gen.model().num_groups;
  if (batch < 1) throw DomainError("batch must be >= 1");
  Latents l;
  ad::Matrix zg(batch, d);
  for (Eigen::Index i = 0; i < zg.size(); ++i) zg.data()[i] = rng.normal();
  l.geometry = ad::Var(std::move(zg));
  for (int g = 0; g < n; ++g) {
    ad::Matrix za(batch, d);
    for (Eigen::Index i = 0; i < za.size(); ++i) za.data()[i] = rng.normal();
    l.appearance.push_back(ad::Var(std::move(za)));
  }
  return l;
}

RenderResult render(const Generator& gen, const Styles& styles, std::span<const CameraPose> poses, int width,
                    int height, const RenderOptions& options) {
  if (width < 1 || height < 1) throw DomainError("render resolution must be at least 1x1");
  const auto batch = static_cast<Eigen::Index>(poses.size());
  if (batch < 1) throw DomainError("at least one pose is required");
  if (styles.batch() != batch) throw ShapeError("style batch does not match pose count");
  const ModelConfig& model = gen.model();
  if (options.appearance && static_cast<int>(styles.appearance.size()) != model.num_groups) {
    throw ConfigError("appearance latents", "expected " + std::to_string(model.num_groups) + " appearance codes");
  }

  const Eigen::Index pixels_per_frame = static_cast<Eigen::Index>(width) * height;
  const Eigen::Index n_rays = batch * pixels_per_frame;
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(n_rays));
  for (const auto& pose : poses) {
    auto frame_rays = manifold::generate_rays(pose, width, height, gen.intrinsics());
    rays.insert(rays.end(), frame_rays.begin(), frame_rays.end());
  }

  const auto brackets = manifold::find_brackets(gen.manifold(), gen.levels(), rays, model.coarse_samples);
  const ad::Var t_raw = manifold::refine_depths(gen.manifold(), gen.levels(), brackets, rays);

  // Sort each ray's intersections by depth (level index breaks ties).
  const auto m = static_cast<Eigen::Index>(brackets.size());
  auto segments = std::make_shared<semask::Segments>(static_cast<std::size_t>(n_rays + 1), 0);
  std::vector<std::int64_t> perm(static_cast<std::size_t>(m));
  std::iota(perm.begin(), perm.end(), 0);
  {
    std::size_t at = 0;
    for (Eigen::Index r = 0; r < n_rays; ++r) {
      std::size_t end = at;
      while (end < brackets.size() && brackets[end].ray == r) ++end;
      std::stable_sort(perm.begin() + static_cast<std::ptrdiff_t>(at), perm.begin() + static_cast<std::ptrdiff_t>(end),
                       [&](std::int64_t a, std::int64_t b) { return t_raw.value()(a, 0) < t_raw.value()(b, 0); });
      (*segments)[static_cast<std::size_t>(r + 1)] = static_cast<std::int64_t>(end);
      at = end;
    }
  }

  RenderResult out;
  out.batch = static_cast<int>(batch);
  out.width = width;
  out.height = height;
  out.segments = segments;

  const int n_cls = model.num_classes;
  const ad::Matrix club = gen.clubbing().matrix();
  ad::Matrix bg_onehot = ad::Matrix::Zero(1, n_cls);
  bg_onehot(0, model.background_class) = 1.0;

  ad::Var comp_rgb = ad::Var::zeros(n_rays, 3);
  ad::Var comp_probs = ad::Var::zeros(n_rays, n_cls);
  ad::Var residual = ad::Var(ad::Matrix::Ones(n_rays, 1));
  ad::Var depth = ad::Var::zeros(n_rays, 1);

  if (m > 0) {
    const ad::Var t = ad::gather(t_raw, ad::make_index(perm));
    ad::Matrix origins(m, 3);
    ad::Matrix dirs(m, 3);
    std::vector<std::int64_t> frame_of_point(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto& b = brackets[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
      const Ray& ray = rays[static_cast<std::size_t>(b.ray)];
      origins.row(i) = ray.origin.transpose();
      dirs.row(i) = ray.direction.transpose();
      frame_of_point[static_cast<std::size_t>(i)] = b.ray / pixels_per_frame;
    }
    const ad::Var d(std::move(dirs));
    const ad::Var positions = ad::add(ad::Var(std::move(origins)), ad::mul(t, d));
    const auto frame_idx = ad::make_index(frame_of_point);
    const auto geo = gen.geometry().forward(styles.geometry.gather_rows(frame_idx), positions, d);
    const ad::Var probs = ad::softmax_rows(geo.sem_logits);

    std::span<const double> sigma_values(geo.sigma.value().data(), static_cast<std::size_t>(m));
    out.grouping = semask::group_points(*segments, sigma_values, probs.value(), gen.clubbing());
    out.point_sigma = geo.sigma;

    comp_probs = semask::composite(geo.sigma, probs, segments);
    residual = semask::residual_transmittance(geo.sigma, segments);
    {
      ad::NoGradGuard no_grad;
      depth = semask::composite(geo.sigma.detach(), t.detach(), segments);
    }
    if (options.appearance) {
      out.point_rgb = gen.appearance().forward(out.grouping, geo.descriptor, d, styles.appearance, frame_of_point);
      comp_rgb = semask::composite(geo.sigma, out.point_rgb, segments);
    }
  } else {
    out.grouping.collections.assign(static_cast<std::size_t>(model.num_groups), {});
  }

  out.fine_probs = ad::add(comp_probs, ad::matmul(residual, ad::Var(bg_onehot)));
  out.group_probs = ad::matmul(out.fine_probs, ad::Var(club));
  out.depth = depth;
  if (options.appearance) {
    out.rgb = ad::add(comp_rgb, ad::matmul(residual, ad::sigmoid(gen.background_logit())));
    if (!out.rgb.value().allFinite()) throw NumericalError("non-finite rendered color");
  }

  out.fine_labels.resize(static_cast<std::size_t>(n_rays));
  out.labels.resize(static_cast<std::size_t>(n_rays));
  for (Eigen::Index r = 0; r < n_rays; ++r) {
    const int fine = argmax_row(out.fine_probs.value(), r);
    out.fine_labels[static_cast<std::size_t>(r)] = fine;
    out.labels[static_cast<std::size_t>(r)] = gen.clubbing()(fine);
  }
  return out;
}

RenderedFrame to_frame(const RenderResult& result, int index) {
  if (index < 0 || index >= result.batch) throw IndexError("frame index out of range");
  const Eigen::Index p = static_cast<Eigen::Index>(result.width) * result.height;
  const Eigen::Index first = p * index;
  RenderedFrame f;
  f.width = result.width;
  f.height = result.height;
  auto copy_block = [&](const ad::Var& v, std::vector<double>& dst) {
    if (!v.defined()) return;
    const auto block = v.value().middleRows(first, p);
    dst.resize(static_cast<std::size_t>(block.size()));
    ad::Matrix tmp = block;
    std::copy(tmp.data(), tmp.data() + tmp.size(), dst.begin());
  };
  copy_block(result.rgb, f.rgb);
  copy_block(result.group_probs, f.group_probs);
  copy_block(result.fine_probs, f.fine_probs);
  copy_block(result.depth, f.depth);
  f.labels.assign(result.labels.begin() + first, result.labels.begin() + first + p);
  f.fine_labels.assign(result.fine_labels.begin() + first, result.fine_labels.begin() + first + p);
  return f;
}

RenderedFrame render_frame(const Generator& gen, const LatentCode& z, const std::vector<LatentCode>& z_groups,
                           const CameraPose& pose, int width, int height) {
  if (z.dim() != gen.model().latent_dim) throw ShapeError("geometry latent has the wrong dimension");
  for (const auto& zg : z_groups) {
    if (zg.dim() != gen.model().latent_dim) throw ShapeError("appearance latent has the wrong dimension");
  }
  ad::NoGradGuard no_grad;
  const Styles styles = map_latents(gen, make_latents(z, z_groups));
  const auto result = render(gen, styles, std::span<const CameraPose>(&pose, 1), width, height);
  return to_frame(result, 0);
}

RenderedFrame render_semantic_only(const Generator& gen, const LatentCode& z, const CameraPose& pose, int width,
                                   int height) {
  if (z.dim() != gen.model().latent_dim) throw ShapeError("geometry latent has the wrong dimension");
  ad::NoGradGuard no_grad;
  Styles styles;
  styles.geometry = gen.geometry().map(make_latents(z, {}).geometry);
  const auto result =
      render(gen, styles, std::span<const CameraPose>(&pose, 1), width, height, RenderOptions{.appearance = false});
  return to_frame(result, 0);
}

}  // namespace sfe::render
