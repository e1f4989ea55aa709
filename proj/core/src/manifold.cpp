#include "sfe/manifold.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <limits>

#include "sfe/errors.hpp"

namespace sfe::manifold {

Eigen::VectorXd ScalarField::evaluate(const ad::Matrix& points) const {
  ad::NoGradGuard guard;
  const ad::Var out = evaluate_var(ad::Var(points));
  return Eigen::Map<const Eigen::VectorXd>(out.value().data(), out.rows());
}

double ScalarField::eval(const Vec3& x) const {
  ad::Matrix p(1, 3);
  p << x.x(), x.y(), x.z();
  return evaluate(p)[0];
}

ad::Var AffineField::evaluate_var(const ad::Var& points) const {
  ad::Matrix n(3, 1);
  n << normal_.x(), normal_.y(), normal_.z();
  return ad::add_scalar(ad::matmul(points, ad::Var(n)), offset_);
}

ad::Var SphereField::evaluate_var(const ad::Var& points) const {
  ad::Matrix c(1, 3);
  c << center_.x(), center_.y(), center_.z();
  return ad::sqrt(ad::sum_cols(ad::square(ad::sub(points, ad::Var(c)))));
}

ad::Var ConstantField::evaluate_var(const ad::Var& points) const {
  return ad::Var(ad::Matrix::Constant(points.rows(), 1, value_));
}

ManifoldNetwork::ManifoldNetwork(Rng& rng, int width, int depth) {
  int in = 3;
  for (int i = 0; i < depth; ++i) {
    hidden_.emplace_back(rng, in, width, std::sqrt(6.0 / in), 1.0 / std::sqrt(in));
    in = width;
  }
  output_ = nn::Linear(rng, in, 1, 1e-3, 0.0);
}

ad::Var ManifoldNetwork::evaluate_var(const ad::Var& points) const {
  ad::Var h = points;
  for (const auto& layer : hidden_) h = ad::softplus(layer(h));
  ad::Var radius = ad::sqrt(ad::add_scalar(ad::sum_cols(ad::square(points)), 1e-12));
  return ad::add(radius, output_(h));
}

void ManifoldNetwork::collect(nn::ParamList& out, const std::string& prefix) {
  for (std::size_t i = 0; i < hidden_.size(); ++i) hidden_[i].collect(out, prefix + ".hidden" + std::to_string(i));
  output_.collect(out, prefix + ".output");
}

IsoLevels::IsoLevels(std::vector<double> levels) : levels_(std::move(levels)) {
  if (levels_.empty()) throw DomainError("at least one iso level is required");
  for (std::size_t i = 0; i < levels_.size(); ++i) {
    if (!std::isfinite(levels_[i])) throw DomainError("iso levels must be finite");
    if (i > 0 && !(levels_[i] > levels_[i - 1])) throw DomainError("iso levels must be strictly increasing");
  }
}

IsoLevels IsoLevels::equally_spaced(double lo, double hi, int count) {
  if (count < 1) throw DomainError("level count must be >= 1");
  std::vector<double> v(static_cast<std::size_t>(count));
  if (count == 1) {
    v[0] = 0.5 * (lo + hi);
  } else {
    for (int i = 0; i < count; ++i) v[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (count - 1);
  }
  return IsoLevels(std::move(v));
}

Eigen::Matrix3d camera_rotation(const CameraPose& pose) {
  return (Eigen::AngleAxisd(pose.yaw, Vec3::UnitY()) * Eigen::AngleAxisd(-pose.pitch, Vec3::UnitX()) *
          Eigen::AngleAxisd(pose.roll, Vec3::UnitZ()))
      .toRotationMatrix();
}

std::vector<Ray> generate_rays(const CameraPose& pose, int width, int height, const Intrinsics& intr) {
  if (width < 1 || height < 1) throw DomainError("image resolution must be at least 1x1");
  const Eigen::Matrix3d rot = camera_rotation(pose);
  const Vec3 origin = rot * Vec3(0.0, 0.0, intr.orbit_radius);
  const double tan_half = std::tan(0.5 * intr.fov);
  const double aspect = static_cast<double>(width) / height;
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double u = (2.0 * (x + 0.5) / width - 1.0) * tan_half * aspect;
      const double v = (1.0 - 2.0 * (y + 0.5) / height) * tan_half;
      Ray r;
      r.origin = origin;
      r.direction = (rot * Vec3(u, v, -1.0)).normalized();
      r.near = intr.near;
      r.far = intr.far;
      rays.push_back(r);
    }
  }
  return rays;
}

std::vector<Bracket> find_brackets(const ScalarField& field, const IsoLevels& levels,
                                   std::span<const Ray> rays, int coarse_samples) {
  if (coarse_samples < 2) throw DomainError("coarse_samples must be >= 2");
  const auto n_rays = static_cast<Eigen::Index>(rays.size());
  const int s_count = coarse_samples;
  ad::Matrix points(n_rays * s_count, 3);
  std::vector<double> depths(static_cast<std::size_t>(n_rays * s_count));
  for (Eigen::Index r = 0; r < n_rays; ++r) {
    const Ray& ray = rays[static_cast<std::size_t>(r)];
    for (int s = 0; s < s_count; ++s) {
      const double t = ray.near + (ray.far - ray.near) * s / (s_count - 1);
      const Vec3 p = ray.at(t);
      const auto row = r * s_count + s;
      points.row(row) << p.x(), p.y(), p.z();
      depths[static_cast<std::size_t>(row)] = t;
    }
  }
  const Eigen::VectorXd f = field.evaluate(points);

  std::vector<Bracket> out;
  for (Eigen::Index r = 0; r < n_rays; ++r) {
    const auto base = r * s_count;
    for (int li = 0; li < levels.size(); ++li) {
      const double l = levels[li];
      for (int s = 0; s + 1 < s_count; ++s) {
        const double ga = f[base + s] - l;
        const double gb = f[base + s + 1] - l;
        const bool crosses = (ga <= 0.0 && gb >= 0.0) || (ga >= 0.0 && gb <= 0.0);
        if (!crosses) continue;
        // The first crossing decides; a flat bracket leaves the level invalid.
        if (f[base + s] != f[base + s + 1]) {
          out.push_back({static_cast<int>(r), li, depths[static_cast<std::size_t>(base + s)],
                         depths[static_cast<std::size_t>(base + s + 1)], f[base + s], f[base + s + 1]});
        }
        break;
      }
    }
  }
  return out;
}

double refine_depth(const Bracket& b, double level) {
  return b.t_a + (level - b.f_a) * (b.t_b - b.t_a) / (b.f_b - b.f_a);
}

namespace {

ManifoldIntersections assemble(const std::vector<Bracket>& brackets, std::size_t begin, std::size_t end,
                               const IsoLevels& levels, const Ray& ray) {
  ManifoldIntersections out;
  std::vector<bool> seen(static_cast<std::size_t>(levels.size()), false);
  for (std::size_t i = begin; i < end; ++i) {
    const Bracket& b = brackets[i];
    const double t = refine_depth(b, levels[b.level]);
    out.push_back({t, ray.at(t), b.level});
    seen[static_cast<std::size_t>(b.level)] = true;
  }
  std::stable_sort(out.begin(), out.end(), [](const Intersection& a, const Intersection& b) {
    return a.t < b.t || (a.t == b.t && a.level_index < b.level_index);
  });
  for (int li = 0; li < levels.size(); ++li) {
    if (!seen[static_cast<std::size_t>(li)]) {
      out.push_back({std::numeric_limits<double>::infinity(), std::nullopt, li});
    }
  }
  return out;
}

}  // namespace

ManifoldIntersections intersect_ray(const ScalarField& field, const IsoLevels& levels, const Ray& ray,
                                    int coarse_samples) {
  const auto brackets = find_brackets(field, levels, std::span<const Ray>(&ray, 1), coarse_samples);
  return assemble(brackets, 0, brackets.size(), levels, ray);
}

std::vector<ManifoldIntersections> intersect_rays(const ScalarField& field, const IsoLevels& levels,
                                                  std::span<const Ray> rays, int coarse_samples) {
  const auto brackets = find_brackets(field, levels, rays, coarse_samples);
  std::vector<ManifoldIntersections> out;
  out.reserve(rays.size());
  std::size_t at = 0;
  for (std::size_t r = 0; r < rays.size(); ++r) {
    std::size_t end = at;
    while (end < brackets.size() && brackets[end].ray == static_cast<int>(r)) ++end;
    out.push_back(assemble(brackets, at, end, levels, rays[r]));
    at = end;
  }
  return out;
}

ad::Var refine_depths(const ScalarField& field, const IsoLevels& levels, std::span<const Bracket> brackets,
                      std::span<const Ray> rays) {
  const auto m = static_cast<Eigen::Index>(brackets.size());
  ad::Matrix pa(m, 3);
  ad::Matrix pb(m, 3);
  ad::Matrix ta(m, 1);
  ad::Matrix dt(m, 1);
  ad::Matrix lv(m, 1);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Bracket& b = brackets[static_cast<std::size_t>(i)];
    const Ray& ray = rays[static_cast<std::size_t>(b.ray)];
    const Vec3 a = ray.at(b.t_a);
    const Vec3 c = ray.at(b.t_b);
    pa.row(i) << a.x(), a.y(), a.z();
    pb.row(i) << c.x(), c.y(), c.z();
    ta(i, 0) = b.t_a;
    dt(i, 0) = b.t_b - b.t_a;
    lv(i, 0) = levels[b.level];
  }
  if (m == 0) return ad::Var(ad::Matrix(0, 1));
  const ad::Var fa = field.evaluate_var(ad::Var(pa));
  const ad::Var fb = field.evaluate_var(ad::Var(pb));
  const ad::Var num = ad::mul(ad::sub(ad::Var(lv), fa), ad::Var(dt));
  return ad::add(ad::Var(ta), ad::div(num, ad::sub(fb, fa)));
}

}  // namespace sfe::manifold
