#include "sfe/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "sfe/errors.hpp"

namespace sfe {

using nlohmann::json;

std::vector<int> default_celebamask_clubbing() {
  // 0 background, 1 skin, 2 l_brow, 3 r_brow, 4 l_eye, 5 r_eye, 6 eye_g,
  // 7 l_ear, 8 r_ear, 9 ear_r, 10 nose, 11 mouth, 12 u_lip, 13 l_lip,
  // 14 neck, 15 neck_l, 16 cloth, 17 hair, 18 hat
  return {0, 1, 1, 1, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1, 1, 0, 3, 2, 0};
}

std::string to_string(AppearanceSharing sharing) {
  switch (sharing) {
    case AppearanceSharing::kProposed:
      return "proposed";
    case AppearanceSharing::kNone:
      return "none";
    case AppearanceSharing::kFull:
      return "full";
  }
  return "proposed";
}

namespace {

AppearanceSharing sharing_from_string(const std::string& s) {
  if (s == "proposed") return AppearanceSharing::kProposed;
  if (s == "none") return AppearanceSharing::kNone;
  if (s == "full") return AppearanceSharing::kFull;
  throw ConfigError("model.appearance_sharing", "expected one of proposed|none|full, got '" + s + "'");
}

// Reads keys out of one JSON object, remembering which were consumed so that
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(name(key), std::string("wrong type: ") + e.what());
    }
  }

  Section child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    static const json kEmpty = json::object();
    return Section(it == j_.end() ? kEmpty : *it, name(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(name(it.key()), "unknown key");
    }
  }

  [[nodiscard]] std::string name(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_weights(Section s, StageWeights& w) {
  s.read("lambda_im", w.lambda_im);
  s.read("lambda_s", w.lambda_s);
  s.read("lambda_p", w.lambda_p);
  s.read("lambda_l", w.lambda_l);
  s.finish();
}

json weights_json(const StageWeights& w) {
  return {{"lambda_im", w.lambda_im}, {"lambda_s", w.lambda_s}, {"lambda_p", w.lambda_p},
          {"lambda_l", w.lambda_l}};
}

void require(bool ok, const std::string& key, const std::string& message) {
  if (!ok) throw ConfigError(key, message);
}

void require_lambda(double v, const std::string& key) {
  require(std::isfinite(v) && v >= 0.0, key, "weights must be finite and >= 0");
}

}  // namespace

void validate(TrainConfig& c) {
  auto& m = c.model;
  require(m.latent_dim >= 1, "model.latent_dim", "must be >= 1");
  require(m.num_classes >= 1, "model.num_classes", "must be >= 1");
  require(m.num_groups >= 1, "model.num_groups", "must be >= 1");
  require(m.num_groups <= m.num_classes, "model.num_groups", "n exceeds N_cls");
  if (m.clubbing.empty()) {
    if (m.num_classes == 19 && m.num_groups == 4) {
      m.clubbing = default_celebamask_clubbing();
    } else if (m.num_classes == m.num_groups) {
      m.clubbing.resize(static_cast<std::size_t>(m.num_classes));
      for (int i = 0; i < m.num_classes; ++i) m.clubbing[static_cast<std::size_t>(i)] = i;
    } else {
      throw ConfigError("model.clubbing", "required when num_classes != num_groups");
    }
  }
  require(static_cast<int>(m.clubbing.size()) == m.num_classes, "model.clubbing",
          "length must equal num_classes");
  std::vector<bool> hit(static_cast<std::size_t>(m.num_groups), false);
  for (int g : m.clubbing) {
    require(g >= 0 && g < m.num_groups, "model.clubbing", "group index out of range");
    hit[static_cast<std::size_t>(g)] = true;
  }
  for (bool h : hit) require(h, "model.clubbing", "every group needs at least one class");
  if (m.group_names.size() != static_cast<std::size_t>(m.num_groups)) {
    m.group_names.resize(static_cast<std::size_t>(m.num_groups));
    for (std::size_t i = 0; i < m.group_names.size(); ++i) {
      if (m.group_names[i].empty()) m.group_names[i] = "group" + std::to_string(i);
    }
  }
  require(m.background_class >= 0 && m.background_class < m.num_classes, "model.background_class",
          "out of range");
  require(m.num_levels >= 1, "model.num_levels", "K must be >= 1");
  require(m.level_min < m.level_max, "model.level_min", "must be below level_max");
  require(m.coarse_samples >= 2, "model.coarse_samples", "must be >= 2");
  require(m.manifold_width >= 1, "model.manifold_width", "must be >= 1");
  require(m.manifold_depth >= 1, "model.manifold_depth", "must be >= 1");
  require(m.geometry_depth >= 1, "model.geometry_depth", "must be >= 1");
  require(m.geometry_width >= 1, "model.geometry_width", "must be >= 1");
  require(m.descriptor_dim >= 1, "model.descriptor_dim", "must be >= 1");
  require(m.appearance_depth >= 1, "model.appearance_depth", "must be >= 1");
  require(m.appearance_width >= 1, "model.appearance_width", "must be >= 1");
  require(m.mapping_width >= 1, "model.mapping_width", "must be >= 1");
  require(m.mapping_layers >= 1, "model.mapping_layers", "must be >= 1");
  require(m.discriminator_channels >= 1, "model.discriminator_channels", "must be >= 1");

  auto& t = c.training;
  require(t.batch_size >= 1, "training.batch_size", "must be >= 1");
  require(t.generator_lr >= 0.0, "training.generator_lr", "must be >= 0");
  require(t.discriminator_lr >= 0.0, "training.discriminator_lr", "must be >= 0");
  require(t.stage1_iterations >= 0, "training.stage1_iterations", "must be >= 0");
  require(t.stage2_iterations >= 0, "training.stage2_iterations", "must be >= 0");
  for (const auto& [name, w] : {std::pair{"training.stage1", t.stage1}, std::pair{"training.stage2", t.stage2}}) {
    require_lambda(w.lambda_im, std::string(name) + ".lambda_im");
    require_lambda(w.lambda_s, std::string(name) + ".lambda_s");
    require_lambda(w.lambda_p, std::string(name) + ".lambda_p");
    require_lambda(w.lambda_l, std::string(name) + ".lambda_l");
  }
  require_lambda(t.inversion.lambda_s, "training.inversion.lambda_s");
  require_lambda(t.inversion.lambda_im, "training.inversion.lambda_im");
  require_lambda(t.inversion.lambda_vgg, "training.inversion.lambda_vgg");
  require(t.inversion.learning_rate >= 0.0, "training.inversion.learning_rate", "must be >= 0");
  require(t.inversion.steps >= 0, "training.inversion.steps", "must be >= 0");
  require(t.inversion.pivot_samples >= 1, "training.inversion.pivot_samples", "must be >= 1");
  require(t.checkpoint_every >= 1, "training.checkpoint_every", "must be >= 1");
  require(t.log_every >= 1, "training.log_every", "must be >= 1");

  const auto& p = c.data.pose_prior;
  for (double v : {p.pitch_mean, p.yaw_mean, p.roll_mean}) {
    require(std::isfinite(v), "data.pose_prior", "means must be finite");
  }
  for (double v : {p.pitch_std, p.yaw_std, p.roll_std}) {
    require(std::isfinite(v) && v >= 0.0, "data.pose_prior", "stddevs must be finite and >= 0");
  }
  require(c.data.synthetic.identities >= 1, "data.synthetic.identities", "must be >= 1");
  require(c.data.synthetic.views_per_identity >= 1, "data.synthetic.views_per_identity", "must be >= 1");

  require(c.render.width >= 1, "render.width", "must be >= 1");
  require(c.render.height >= 1, "render.height", "must be >= 1");
  require(c.render.fov > 0.0 && c.render.fov < 3.1, "render.fov", "must be in (0, pi)");
  require(c.render.scene_bound > 0.0, "render.scene_bound", "must be > 0");
  require(c.render.orbit_radius > c.render.scene_bound, "render.orbit_radius",
          "camera must sit outside the scene bound");
  require(c.service.port >= 0 && c.service.port < 65536, "service.port", "out of range");
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  if (j.is_null()) {
    validate(c);
    return c;
  }
  Section root(j, "");
  {
    Section s = root.child("model");
    auto& m = c.model;
    s.read("latent_dim", m.latent_dim);
    s.read("num_classes", m.num_classes);
    s.read("num_groups", m.num_groups);
    s.read("clubbing", m.clubbing);
    s.read("group_names", m.group_names);
    s.read("background_class", m.background_class);
    s.read("num_levels", m.num_levels);
    s.read("level_min", m.level_min);
    s.read("level_max", m.level_max);
    s.read("coarse_samples", m.coarse_samples);
    s.read("manifold_width", m.manifold_width);
    s.read("manifold_depth", m.manifold_depth);
    s.read("geometry_depth", m.geometry_depth);
    s.read("geometry_width", m.geometry_width);
    s.read("descriptor_dim", m.descriptor_dim);
    s.read("view_dependent_descriptor", m.view_dependent_descriptor);
    s.read("appearance_depth", m.appearance_depth);
    s.read("appearance_width", m.appearance_width);
    std::string sharing = to_string(m.appearance_sharing);
    s.read("appearance_sharing", sharing);
    m.appearance_sharing = sharing_from_string(sharing);
    s.read("mapping_width", m.mapping_width);
    s.read("mapping_layers", m.mapping_layers);
    s.read("film_base_frequency", m.film_base_frequency);
    s.read("film_frequency_scale", m.film_frequency_scale);
    s.read("discriminator_channels", m.discriminator_channels);
    s.finish();
  }
  {
    Section s = root.child("training");
    auto& t = c.training;
    s.read("batch_size", t.batch_size);
    s.read("generator_lr", t.generator_lr);
    s.read("discriminator_lr", t.discriminator_lr);
    s.read("adam_beta1", t.adam_beta1);
    s.read("adam_beta2", t.adam_beta2);
    s.read("adam_eps", t.adam_eps);
    s.read("stage1_iterations", t.stage1_iterations);
    s.read("stage2_iterations", t.stage2_iterations);
    read_weights(s.child("stage1"), t.stage1);
    read_weights(s.child("stage2"), t.stage2);
    {
      Section inv = s.child("inversion");
      inv.read("lambda_s", t.inversion.lambda_s);
      inv.read("lambda_im", t.inversion.lambda_im);
      inv.read("lambda_vgg", t.inversion.lambda_vgg);
      inv.read("learning_rate", t.inversion.learning_rate);
      inv.read("steps", t.inversion.steps);
      inv.read("pivot_samples", t.inversion.pivot_samples);
      inv.finish();
    }
    s.read("checkpoint_every", t.checkpoint_every);
    s.read("log_every", t.log_every);
    s.read("seed", t.seed);
    s.read("mixed_precision", t.mixed_precision);
    s.finish();
  }
  {
    Section s = root.child("data");
    s.read("root", c.data.root);
    {
      Section p = s.child("pose_prior");
      auto& pp = c.data.pose_prior;
      p.read("pitch_mean", pp.pitch_mean);
      p.read("pitch_std", pp.pitch_std);
      p.read("yaw_mean", pp.yaw_mean);
      p.read("yaw_std", pp.yaw_std);
      p.read("roll_mean", pp.roll_mean);
      p.read("roll_std", pp.roll_std);
      p.finish();
    }
    {
      Section syn = s.child("synthetic");
      syn.read("identities", c.data.synthetic.identities);
      syn.read("views_per_identity", c.data.synthetic.views_per_identity);
      syn.finish();
    }
    s.finish();
  }
  {
    Section s = root.child("render");
    s.read("width", c.render.width);
    s.read("height", c.render.height);
    s.read("fov", c.render.fov);
    s.read("orbit_radius", c.render.orbit_radius);
    s.read("scene_bound", c.render.scene_bound);
    s.finish();
  }
  {
    Section s = root.child("service");
    s.read("port", c.service.port);
    s.read("data_dir", c.service.data_dir);
    s.read("static_dir", c.service.static_dir);
    s.finish();
  }
  root.finish();
  validate(c);
  return c;
}

json to_json(const TrainConfig& c) {
  const auto& m = c.model;
  const auto& t = c.training;
  const auto& p = c.data.pose_prior;
  json j;
  j["model"] = {{"latent_dim", m.latent_dim},
                {"num_classes", m.num_classes},
                {"num_groups", m.num_groups},
                {"clubbing", m.clubbing},
                {"group_names", m.group_names},
                {"background_class", m.background_class},
                {"num_levels", m.num_levels},
                {"level_min", m.level_min},
                {"level_max", m.level_max},
                {"coarse_samples", m.coarse_samples},
                {"manifold_width", m.manifold_width},
                {"manifold_depth", m.manifold_depth},
                {"geometry_depth", m.geometry_depth},
                {"geometry_width", m.geometry_width},
                {"descriptor_dim", m.descriptor_dim},
                {"view_dependent_descriptor", m.view_dependent_descriptor},
                {"appearance_depth", m.appearance_depth},
                {"appearance_width", m.appearance_width},
                {"appearance_sharing", to_string(m.appearance_sharing)},
                {"mapping_width", m.mapping_width},
                {"mapping_layers", m.mapping_layers},
                {"film_base_frequency", m.film_base_frequency},
                {"film_frequency_scale", m.film_frequency_scale},
                {"discriminator_channels", m.discriminator_channels}};
  j["training"] = {{"batch_size", t.batch_size},
                   {"generator_lr", t.generator_lr},
                   {"discriminator_lr", t.discriminator_lr},
                   {"adam_beta1", t.adam_beta1},
                   {"adam_beta2", t.adam_beta2},
                   {"adam_eps", t.adam_eps},
                   {"stage1_iterations", t.stage1_iterations},
                   {"stage2_iterations", t.stage2_iterations},
                   {"stage1", weights_json(t.stage1)},
                   {"stage2", weights_json(t.stage2)},
                   {"inversion",
                    {{"lambda_s", t.inversion.lambda_s},
                     {"lambda_im", t.inversion.lambda_im},
                     {"lambda_vgg", t.inversion.lambda_vgg},
                     {"learning_rate", t.inversion.learning_rate},
                     {"steps", t.inversion.steps},
                     {"pivot_samples", t.inversion.pivot_samples}}},
                   {"checkpoint_every", t.checkpoint_every},
                   {"log_every", t.log_every},
                   {"seed", t.seed},
                   {"mixed_precision", t.mixed_precision}};
  j["data"] = {{"root", c.data.root},
               {"pose_prior",
                {{"pitch_mean", p.pitch_mean},
                 {"pitch_std", p.pitch_std},
                 {"yaw_mean", p.yaw_mean},
                 {"yaw_std", p.yaw_std},
                 {"roll_mean", p.roll_mean},
                 {"roll_std", p.roll_std}}},
               {"synthetic",
                {{"identities", c.data.synthetic.identities},
                 {"views_per_identity", c.data.synthetic.views_per_identity}}}};
  j["render"] = {{"width", c.render.width},
                 {"height", c.render.height},
                 {"fov", c.render.fov},
                 {"orbit_radius", c.render.orbit_radius},
                 {"scene_bound", c.render.scene_bound}};
  j["service"] = {{"port", c.service.port},
                  {"data_dir", c.service.data_dir},
                  {"static_dir", c.service.static_dir}};
  return j;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return config_from_json(json());
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("malformed JSON in ") + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void save_config(const TrainConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write config " + path.string());
  out << to_json(config).dump(2) << "\n";
}

}  // namespace sfe
