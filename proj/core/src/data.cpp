#include "sfe/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <nlohmann/json.hpp>

#include "sfe/errors.hpp"
#include "sfe/image_io.hpp"
#include "sfe/manifold.hpp"

namespace sfe::data {

namespace fs = std::filesystem;

Dataset Dataset::from_records(std::vector<DatasetRecord> records) {
  Dataset d;
  for (const auto& r : records) {
    d.stems_.push_back(r.stem);
    d.poses_.push_back(r.pose);
  }
  d.memory_ = std::move(records);
  return d;
}

DatasetRecord Dataset::record(std::size_t i) const {
  if (i >= size()) throw IndexError("dataset index " + std::to_string(i) + " out of range");
  if (!memory_.empty()) return memory_[i];
  const auto& stem = stems_[i];
  const fs::path image_path = root_ / "images" / (stem + ".png");
  const fs::path mask_path = root_ / "masks" / (stem + ".png");
  io::RgbImage img;
  io::LabelImage mask;
  try {
    img = io::decode_png(io::read_file(image_path));
  } catch (const IoError& e) {
    throw IoError(image_path.string() + ": " + e.what());
  }
  try {
    mask = io::decode_label_png(io::read_file(mask_path));
  } catch (const IoError& e) {
    throw IoError(mask_path.string() + ": " + e.what());
  }
  if (img.width != mask.width || img.height != mask.height) {
    throw IoError(mask_path.string() + ": mask size does not match " + image_path.string());
  }
  DatasetRecord r;
  r.stem = stem;
  r.width = img.width;
  r.height = img.height;
  r.image = io::to_unit(img);
  r.mask.assign(mask.labels.begin(), mask.labels.end());
  r.pose = poses_[i];
  return r;
}

Dataset Dataset::materialized() const {
  if (!memory_.empty() || empty()) return *this;
  std::vector<DatasetRecord> records;
  records.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) records.push_back(record(i));
  return from_records(std::move(records));
}

Dataset load_dataset(const fs::path& root) {
  Dataset d;
  d.root_ = root;
  const fs::path images = root / "images";
  if (!fs::is_directory(images)) return d;
  std::vector<std::string> stems;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") stems.push_back(entry.path().stem().string());
  }
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) return d;

  const fs::path pose_path = root / "poses.json";
  nlohmann::json poses;
  if (fs::exists(pose_path)) {
    const auto bytes = io::read_file(pose_path);
    try {
      poses = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
      throw IoError(pose_path.string() + ": " + e.what());
    }
  }
  for (const auto& stem : stems) {
    const fs::path image_path = images / (stem + ".png");
    const fs::path mask_path = root / "masks" / (stem + ".png");
    if (!fs::exists(mask_path)) {
      throw IoError(image_path.string() + ": missing mask " + mask_path.string());
    }
    if (!poses.is_object() || !poses.contains(stem)) {
      throw IoError(image_path.string() + ": missing pose for '" + stem + "' in " + pose_path.string());
    }
    const auto& p = poses.at(stem);
    if (!p.is_array() || p.size() != 3 || !p[0].is_number() || !p[1].is_number() || !p[2].is_number()) {
      throw IoError(image_path.string() + ": pose must be [pitch, yaw, roll]");
    }
    CameraPose pose;
    try {
      pose = CameraPose::checked(p[0].get<double>(), p[1].get<double>(), p[2].get<double>());
    } catch (const DomainError& e) {
      throw IoError(image_path.string() + ": " + e.what());
    }
    d.stems_.push_back(stem);
    d.poses_.push_back(pose);
  }
  return d;
}

std::vector<int> club_mask(std::span<const int> fine, int width, const semask::ClubbingMap& clubbing) {
  if (width < 1 || fine.size() % static_cast<std::size_t>(width) != 0) {
    throw ShapeError("mask size is not a multiple of the width");
  }
  std::vector<int> out(fine.size());
  for (std::size_t i = 0; i < fine.size(); ++i) {
    const int label = fine[i];
    if (label < 0 || label >= clubbing.classes()) {
      const auto x = i % static_cast<std::size_t>(width);
      const auto y = i / static_cast<std::size_t>(width);
      throw IndexError("label " + std::to_string(label) + " out of range at pixel (" + std::to_string(x) + ", " +
                       std::to_string(y) + ")");
    }
    out[i] = clubbing(label);
  }
  return out;
}

Vec3 SceneParams::albedo(int label) const {
  switch (label) {
    case kFace: return skin;
    case kHair: return hair;
    case kGarment: return garment;
    default: return background;
  }
}

SceneParams sample_scene(Rng& rng) {
  SceneParams s;
  s.head_radii = Vec3(0.5 * rng.uniform(0.9, 1.1), 0.65 * rng.uniform(0.9, 1.1), 0.55 * rng.uniform(0.9, 1.1));
  s.hair_thickness = rng.uniform(0.05, 0.12);
  s.hairline = s.head_radii.y() * rng.uniform(0.1, 0.5);
  const double half_width = rng.uniform(0.55, 0.8);
  s.garment_min = Vec3(-half_width, -1.3, -0.35);
  s.garment_max = Vec3(half_width, s.head_center.y() - s.head_radii.y() + rng.uniform(0.05, 0.15), 0.35);
  s.skin = Vec3(rng.uniform(0.55, 0.95), rng.uniform(0.4, 0.75), rng.uniform(0.3, 0.6));
  const double shade = rng.uniform(0.05, 0.8);
  s.hair = Vec3(shade, shade * rng.uniform(0.6, 0.9), shade * rng.uniform(0.3, 0.6));
  s.garment = Vec3(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9));
  s.background = Vec3::Constant(rng.uniform(0.3, 0.9));
  return s;
}

namespace {

constexpr double kEps = 1e-9;

// Roots of |(o + t d - c) / r| = 1, ascending; empty when the ray misses.
std::optional<std::pair<double, double>> ellipsoid_roots(const Vec3& c, const Vec3& r, const Ray& ray) {
  const Vec3 o = (ray.origin - c).cwiseQuotient(r);
  const Vec3 d = ray.direction.cwiseQuotient(r);
  const double a = d.squaredNorm();
  const double b = 2.0 * o.dot(d);
  const double cc = o.squaredNorm() - 1.0;
  const double disc = b * b - 4.0 * a * cc;
  if (disc < 0.0) return std::nullopt;
  const double sq = std::sqrt(disc);
  return std::make_pair((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a));
}

Vec3 ellipsoid_normal(const Vec3& c, const Vec3& r, const Vec3& p) {
  return (p - c).cwiseQuotient(r.cwiseProduct(r)).normalized();
}

}  // namespace

std::optional<SceneHit> trace_scene(const SceneParams& s, const Ray& ray) {
  SceneHit best;
  best.t = std::numeric_limits<double>::infinity();
  auto consider = [&](double t, int label, const Vec3& normal) {
    if (t > kEps && t < best.t) best = {label, t, normal};
  };

  if (auto roots = ellipsoid_roots(s.head_center, s.head_radii, ray)) {
    for (double t : {roots->first, roots->second}) {
      if (t > kEps) {
        consider(t, kFace, ellipsoid_normal(s.head_center, s.head_radii, ray.at(t)));
        break;
      }
    }
  }
  const Vec3 hr = s.hair_radii();
  if (auto roots = ellipsoid_roots(s.head_center, hr, ray)) {
    for (double t : {roots->first, roots->second}) {
      if (t > kEps && ray.at(t).y() > s.head_center.y() + s.hairline) {
        Vec3 n = ellipsoid_normal(s.head_center, hr, ray.at(t));
        if (n.dot(ray.direction) > 0.0) n = -n;
        consider(t, kHair, n);
        break;
      }
    }
  }
  {
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    int axis = -1;
    bool hit = true;
    for (int a = 0; a < 3 && hit; ++a) {
      const double o = ray.origin[a];
      const double d = ray.direction[a];
      if (std::abs(d) < 1e-15) {
        if (o < s.garment_min[a] || o > s.garment_max[a]) hit = false;
        continue;
      }
      double ta = (s.garment_min[a] - o) / d;
      double tb = (s.garment_max[a] - o) / d;
      if (ta > tb) std::swap(ta, tb);
      if (ta > t0) {
        t0 = ta;
        axis = a;
      }
      t1 = std::min(t1, tb);
      if (t0 > t1) hit = false;
    }
    if (hit && axis >= 0 && t0 > kEps) {
      Vec3 n = Vec3::Zero();
      n[axis] = ray.direction[axis] > 0.0 ? -1.0 : 1.0;
      consider(t0, kGarment, n);
    }
  }
  if (ray.direction.z() < 0.0) {
    consider((s.plane_z - ray.origin.z()) / ray.direction.z(), kBackground, Vec3::UnitZ());
  }
  if (!std::isfinite(best.t)) return std::nullopt;
  return best;
}

DatasetRecord render_scene(const SceneParams& scene, const CameraPose& pose, int width, int height,
                           const RenderConfig& camera, const std::string& stem) {
  const manifold::Intrinsics intr{camera.fov, camera.orbit_radius, camera.orbit_radius - camera.scene_bound,
                                  camera.orbit_radius + camera.scene_bound};
  const auto rays = manifold::generate_rays(pose, width, height, intr);
  const Vec3 light = Vec3(0.3, 0.5, 1.0).normalized();
  DatasetRecord r;
  r.stem = stem;
  r.width = width;
  r.height = height;
  r.pose = pose;
  r.image.resize(rays.size() * 3);
  r.mask.resize(rays.size());
  for (std::size_t i = 0; i < rays.size(); ++i) {
    const auto hit = trace_scene(scene, rays[i]);
    const int label = hit ? hit->label : kBackground;
    Vec3 color = scene.albedo(label);
    if (hit) color *= 0.35 + 0.65 * std::max(0.0, hit->normal.dot(light));
    r.mask[i] = label;
    for (int c = 0; c < 3; ++c) r.image[i * 3 + static_cast<std::size_t>(c)] = std::clamp(color[c], 0.0, 1.0);
  }
  return r;
}

Dataset synth_generate(const TrainConfig& config, std::uint64_t seed) {
  const auto& syn = config.data.synthetic;
  if (syn.identities < 0 || syn.views_per_identity < 0) throw ConfigError("data.synthetic", "counts must be >= 0");
  Rng rng(seed);
  std::vector<DatasetRecord> records;
  for (int id = 0; id < syn.identities; ++id) {
    const SceneParams scene = sample_scene(rng);
    for (int v = 0; v < syn.views_per_identity; ++v) {
      const CameraPose pose = sample_pose(rng, config.data.pose_prior);
      char stem[32];
      std::snprintf(stem, sizeof(stem), "id%04d_v%02d", id, v);
      records.push_back(render_scene(scene, pose, config.render.width, config.render.height, config.render, stem));
    }
  }
  return Dataset::from_records(std::move(records));
}

void write_dataset(const Dataset& dataset, const fs::path& root) {
  nlohmann::json poses = nlohmann::json::object();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const DatasetRecord r = dataset.record(i);
    const auto rgb = io::to_rgb8(r.image, r.width, r.height);
    io::write_file(root / "images" / (r.stem + ".png"), io::encode_png(rgb));
    io::LabelImage mask{r.width, r.height, {}};
    mask.labels.reserve(r.mask.size());
    for (int l : r.mask) {
      if (l < 0 || l > 255) throw DomainError("label does not fit in one byte");
      mask.labels.push_back(static_cast<std::uint8_t>(l));
    }
    io::write_file(root / "masks" / (r.stem + ".png"), io::encode_label_png(mask));
    poses[r.stem] = {r.pose.pitch, r.pose.yaw, r.pose.roll};
  }
  io::write_text(root / "poses.json", poses.dump(2) + "\n");
}

}  // namespace sfe::data
