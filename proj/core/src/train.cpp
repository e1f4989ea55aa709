#include "sfe/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "sfe/errors.hpp"
#include "sfe/image_io.hpp"
#include "sfe/model_io.hpp"

namespace sfe::train {

namespace {

constexpr std::uint64_t kDiscSeedSalt = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kLoopSeedSalt = 0xbf58476d1ce4e5b9ULL;
constexpr std::uint64_t kSampleSeedSalt = 0x94d049bb133111ebULL;

ad::Var mean_softplus(const ad::Var& x) { return ad::mean(ad::softplus(x)); }

void set_trainable(const nn::ParamList& params, bool on) {
  for (const auto& [name, p] : params) p->set_requires_grad(on);
}

void check_finite(const ad::Var& loss, const std::vector<ad::Var>& grads, const char* what, std::int64_t iter) {
  if (!std::isfinite(loss.item())) {
    throw NumericalError(std::string("non-finite ") + what + " loss at iteration " + std::to_string(iter));
  }
  for (const auto& g : grads) {
    if (!g.value().allFinite()) {
      throw NumericalError(std::string("non-finite ") + what + " gradient at iteration " + std::to_string(iter));
    }
  }
}

}  // namespace

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

Discriminator::Discriminator(Rng& rng, int in_channels, int h, int w, int channels, int aux_outputs)
    : in_channels_(in_channels), height_(h), width_(w) {
  if (h < 1 || w < 1) throw DomainError("discriminator resolution must be positive");
  convs_.emplace_back(rng, in_channels, channels, 3, 1);
  int c = channels;
  nn::ImageShape shape{1, h, w};
  while (shape.height > 4 || shape.width > 4) {
    const int next = std::min(c * 2, channels * 4);
    convs_.emplace_back(rng, c, next, 3, 2);
    shape = convs_.back().output_shape(shape);
    c = next;
  }
  const int flat = c * shape.height * shape.width;
  score_ = nn::Linear(rng, flat, 1, std::sqrt(1.0 / flat), 0.0);
  aux_ = nn::Linear(rng, flat, aux_outputs, std::sqrt(1.0 / flat), 0.0);
}

Discriminator::Output Discriminator::operator()(const ad::Var& images, int batch) const {
  nn::ImageShape shape{batch, height_, width_};
  if (images.rows() != shape.pixels() || images.cols() != in_channels_) {
    throw ShapeError("discriminator input must be (" + std::to_string(shape.pixels()) + ", " +
                     std::to_string(in_channels_) + ")");
  }
  ad::Var h = images;
  for (const auto& conv : convs_) {
    h = ad::leaky_relu(conv(h, shape), 0.2);
    shape = conv.output_shape(shape);
  }
  const ad::Var flat = ad::reshape(h, batch, h.rows() / batch * h.cols());
  return {score_(flat), aux_(flat)};
}

void Discriminator::collect(nn::ParamList& out, const std::string& prefix) {
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, prefix + ".conv" + std::to_string(i));
  score_.collect(out, prefix + ".score");
  aux_.collect(out, prefix + ".aux");
}

ad::Matrix pose_matrix(std::span<const CameraPose> poses) {
  ad::Matrix m(static_cast<Eigen::Index>(poses.size()), 3);
  for (std::size_t i = 0; i < poses.size(); ++i) {
    m.row(static_cast<Eigen::Index>(i)) << poses[i].pitch, poses[i].yaw, poses[i].roll;
  }
  return m;
}

Batch make_batch(const std::vector<data::DatasetRecord>& records, const TrainConfig& config) {
  const int w = config.render.width;
  const int h = config.render.height;
  const int n_cls = config.model.num_classes;
  const Eigen::Index p = static_cast<Eigen::Index>(w) * h;
  Batch b;
  b.size = static_cast<int>(records.size());
  b.images.resize(p * b.size, 3);
  b.semantic = ad::Matrix::Zero(p * b.size, n_cls);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.width != w || r.height != h) {
      throw ShapeError("record '" + r.stem + "' is " + std::to_string(r.width) + "x" + std::to_string(r.height) +
                       ", training resolution is " + std::to_string(w) + "x" + std::to_string(h));
    }
    const Eigen::Index base = p * static_cast<Eigen::Index>(i);
    for (Eigen::Index k = 0; k < p; ++k) {
      for (int c = 0; c < 3; ++c) b.images(base + k, c) = r.image[static_cast<std::size_t>(k * 3 + c)];
      const int label = r.mask[static_cast<std::size_t>(k)];
      if (label < 0 || label >= n_cls) {
        throw IndexError("record '" + r.stem + "' has label " + std::to_string(label) + " at pixel (" +
                         std::to_string(k % w) + ", " + std::to_string(k / w) + ")");
      }
      b.semantic(base + k, label) = 1.0;
    }
    b.poses.push_back(r.pose);
  }
  return b;
}

Batch sample_batch(const data::Dataset& dataset, Rng& rng, const TrainConfig& config, int batch) {
  if (dataset.empty()) throw ConfigError("data.root", "dataset is empty");
  std::vector<data::DatasetRecord> records;
  records.reserve(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) records.push_back(dataset.record(rng.index(dataset.size())));
  return make_batch(records, config);
}

ad::Var r1_penalty(const Discriminator& disc, const ad::Matrix& inputs, int batch, double lambda) {
  const ad::Var x = ad::Var::parameter(inputs);
  const auto out = disc(x, batch);
  const auto g = ad::gradients(ad::sum(out.score), {x}, true)[0];
  return ad::scale(ad::sum(ad::square(g)), lambda / batch);
}

namespace {

struct RealPass {
  Discriminator::Output out;
  ad::Var r1;
};

// D(real) plus the R1 penalty from the same forward pass.
RealPass real_pass(const Discriminator& disc, const ad::Matrix& inputs, int batch, double lambda) {
  const ad::Var x = ad::Var::parameter(inputs);
  RealPass rp;
  rp.out = disc(x, batch);
  if (lambda > 0.0) {
    const auto g = ad::gradients(ad::sum(rp.out.score), {x}, true)[0];
    rp.r1 = ad::scale(ad::sum(ad::square(g)), lambda / batch);
  } else {
    rp.r1 = ad::Var::scalar(0.0);
  }
  return rp;
}

}  // namespace

LossTerms d_losses(const Discriminator& image_disc, const Discriminator& semantic_disc, const Batch& real,
                   const Fakes& fake, const StageWeights& w, bool use_semantic) {
  if (static_cast<int>(real.poses.size()) != real.size) throw ConfigError("data", "every real image needs a pose");
  const int b_real = real.size;
  const int b_fake = static_cast<int>(fake.poses.size());
  LossTerms t;

  const RealPass rc = real_pass(image_disc, real.images, b_real, w.lambda_im);
  const auto fc = image_disc(fake.images.detach(), b_fake);
  const ad::Var adv_c = ad::add(mean_softplus(ad::neg(rc.out.score)), mean_softplus(fc.score));
  const ad::Var pose_real = ad::mse(rc.out.aux, ad::Var(pose_matrix(real.poses)));
  const ad::Var pose_fake = ad::mse(fc.aux, ad::Var(pose_matrix(fake.poses)));
  ad::Var total = ad::add(ad::add(adv_c, rc.r1), ad::scale(ad::add(pose_real, pose_fake), w.lambda_p));
  t.adversarial = adv_c.item();
  t.r1 = rc.r1.item();
  t.pose_mse = pose_real.item();

  if (use_semantic) {
    const RealPass rs = real_pass(semantic_disc, real.semantic, b_real, w.lambda_s);
    const auto fs = semantic_disc(fake.semantic.detach(), b_fake);
    const ad::Var adv_s = ad::add(mean_softplus(ad::neg(rs.out.score)), mean_softplus(fs.score));
    const ad::Var latent = ad::mse(fs.aux, fake.latents.geometry.detach());
    total = ad::add(total, ad::add(ad::add(adv_s, rs.r1), ad::scale(latent, w.lambda_l)));
    t.adversarial += adv_s.item();
    t.r1 += rs.r1.item();
    t.latent_mse = latent.item();
  }
  t.total = total;
  return t;
}

LossTerms g_losses(const Discriminator& image_disc, const Discriminator& semantic_disc, const Fakes& fake,
                   const StageWeights& w, bool use_semantic) {
  const int b = static_cast<int>(fake.poses.size());
  LossTerms t;
  const auto fc = image_disc(fake.images, b);
  const ad::Var adv_c = mean_softplus(ad::neg(fc.score));
  const ad::Var pose = ad::mse(fc.aux, ad::Var(pose_matrix(fake.poses)));
  ad::Var total = ad::add(adv_c, ad::scale(pose, w.lambda_p));
  t.adversarial = adv_c.item();
  t.pose_mse = pose.item();
  if (use_semantic) {
    const auto fs = semantic_disc(fake.semantic, b);
    const ad::Var adv_s = mean_softplus(ad::neg(fs.score));
    const ad::Var latent = ad::mse(fs.aux, fake.latents.geometry.detach());
    total = ad::add(total, ad::add(adv_s, ad::scale(latent, w.lambda_l)));
    t.adversarial += adv_s.item();
    t.latent_mse = latent.item();
  }
  t.total = total;
  return t;
}

TrainState init_state(const TrainConfig& config) {
  TrainState s;
  s.config = config;
  validate(s.config);
  const auto& tc = s.config.training;
  const auto& m = s.config.model;
  s.generator = render::Generator(s.config, tc.seed);
  Rng disc_rng(tc.seed ^ kDiscSeedSalt);
  s.image_disc = Discriminator(disc_rng, 3, s.config.render.height, s.config.render.width, m.discriminator_channels, 3);
  s.semantic_disc = Discriminator(disc_rng, m.num_classes, s.config.render.height, s.config.render.width,
                                  m.discriminator_channels, m.latent_dim);
  s.g_opt = nn::Adam(tc.generator_lr, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
  s.dc_opt = nn::Adam(tc.discriminator_lr, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
  s.ds_opt = nn::Adam(tc.discriminator_lr, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
  s.rng = Rng(tc.seed ^ kLoopSeedSalt);
  s.stage = tc.stage1_iterations > 0 ? 1 : 2;
  return s;
}

nlohmann::json to_json(const StepMetrics& m) {
  return {{"iter", m.iter},   {"stage", m.stage},       {"loss_d", m.loss_d},        {"loss_g", m.loss_g},
          {"r1", m.r1},       {"pose_mse", m.pose_mse}, {"latent_mse", m.latent_mse}};
}

Fakes render_fakes(TrainState& state, int batch) {
  Fakes f;
  f.latents = render::sample_latents(state.rng, state.generator, batch);
  for (int i = 0; i < batch; ++i) f.poses.push_back(sample_pose(state.rng, state.config.data.pose_prior));
  const auto styles = render::map_latents(state.generator, f.latents);
  const auto result =
      render::render(state.generator, styles, f.poses, state.config.render.width, state.config.render.height);
  f.images = result.rgb;
  f.semantic = result.fine_probs;
  return f;
}

nn::ParamList generator_trainables(TrainState& state) {
  nn::ParamList params;
  if (state.stage == 1) {
    state.generator.collect(params);
  } else {
    state.generator.collect_appearance(params);
  }
  return params;
}

StepMetrics train_step(TrainState& state, const Batch& batch) {
  if (state.finished()) throw DomainError("training schedule already finished");
  const auto& tc = state.config.training;
  if (state.stage == 1 && state.iteration >= tc.stage1_iterations) {
    state.stage = 2;
    state.g_opt = nn::Adam(tc.generator_lr, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
  }
  const bool stage1 = state.stage == 1;
  const StageWeights& w = stage1 ? tc.stage1 : tc.stage2;

  nn::ParamList geometry_params;
  state.generator.collect_geometry(geometry_params);
  set_trainable(geometry_params, stage1);
  nn::ParamList dc_params;
  state.image_disc.collect(dc_params, "disc_c");
  nn::ParamList ds_params;
  state.semantic_disc.collect(ds_params, "disc_s");

  const int b = tc.batch_size;
  Fakes fakes = render_fakes(state, b);

  // Discriminator update on detached fakes.
  set_trainable(dc_params, true);
  set_trainable(ds_params, stage1);
  const LossTerms d = d_losses(state.image_disc, state.semantic_disc, batch, fakes, w, stage1);
  std::vector<ad::Var> d_inputs = nn::values(dc_params);
  if (stage1) {
    const auto s_vals = nn::values(ds_params);
    d_inputs.insert(d_inputs.end(), s_vals.begin(), s_vals.end());
  }
  auto d_grads = ad::gradients(d.total, d_inputs);
  check_finite(d.total, d_grads, "discriminator", state.iteration);

  // Generator loss through the same fakes, scored by the updated discriminators.
  state.dc_opt.step(nn::pointers(dc_params), {d_grads.begin(), d_grads.begin() + static_cast<std::ptrdiff_t>(dc_params.size())});
  if (stage1) {
    state.ds_opt.step(nn::pointers(ds_params), {d_grads.begin() + static_cast<std::ptrdiff_t>(dc_params.size()), d_grads.end()});
  }
  set_trainable(dc_params, false);
  set_trainable(ds_params, false);
  const LossTerms g = g_losses(state.image_disc, state.semantic_disc, fakes, w, stage1);
  nn::ParamList g_params = generator_trainables(state);
  const auto g_grads = ad::gradients(g.total, nn::values(g_params));
  set_trainable(dc_params, true);
  set_trainable(ds_params, true);
  check_finite(g.total, g_grads, "generator", state.iteration);
  state.g_opt.step(nn::pointers(g_params), g_grads);
  set_trainable(geometry_params, true);

  ++state.iteration;
  StepMetrics m;
  m.iter = state.iteration;
  m.stage = state.stage;
  m.loss_d = d.total.item();
  m.loss_g = g.total.item();
  m.r1 = d.r1;
  m.pose_mse = g.pose_mse;
  m.latent_mse = g.latent_mse;
  return m;
}

namespace {

void store_adam(ckpt::Container& c, const nn::Adam& opt, const std::string& prefix) {
  char buf[16];
  for (std::size_t i = 0; i < opt.first_moments().size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%05zu", i);
    c.put(prefix + "/m/" + buf, opt.first_moments()[i], ckpt::DType::kFloat64);
    c.put(prefix + "/v/" + buf, opt.second_moments()[i], ckpt::DType::kFloat64);
  }
  c.meta[prefix + "/steps"] = opt.steps();
}

void restore_adam(const ckpt::Container& c, nn::Adam& opt, const std::string& prefix) {
  opt.first_moments().clear();
  opt.second_moments().clear();
  char buf[16];
  for (std::size_t i = 0;; ++i) {
    std::snprintf(buf, sizeof(buf), "%05zu", i);
    const std::string m = prefix + "/m/" + buf;
    if (!c.contains(m)) break;
    opt.first_moments().push_back(c.at(m).value);
    opt.second_moments().push_back(c.at(prefix + "/v/" + buf).value);
  }
  opt.set_steps(c.meta.value(prefix + "/steps", std::int64_t{0}));
}

}  // namespace

ckpt::Container state_to_container(const TrainState& state) {
  auto& s = const_cast<TrainState&>(state);
  ckpt::Container c;
  store_generator(c, s.generator, ckpt::DType::kFloat64);
  c.config = sfe::to_json(s.config);
  nn::ParamList dc;
  s.image_disc.collect(dc, "disc_c");
  store_params(c, dc, "", ckpt::DType::kFloat64);
  nn::ParamList ds;
  s.semantic_disc.collect(ds, "disc_s");
  store_params(c, ds, "", ckpt::DType::kFloat64);
  c.meta["kind"] = "train_state";
  c.meta["iteration"] = s.iteration;
  c.meta["stage"] = s.stage;
  c.meta["rng"] = s.rng.state();
  store_adam(c, s.g_opt, "opt_g");
  store_adam(c, s.dc_opt, "opt_dc");
  store_adam(c, s.ds_opt, "opt_ds");
  return c;
}

TrainState state_from_container(const ckpt::Container& c) {
  if (c.meta.value("kind", std::string()) != "train_state") throw IoError("checkpoint is not a training state");
  TrainConfig config;
  try {
    config = config_from_json(c.config);
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint config is invalid: ") + e.what());
  }
  TrainState s = init_state(config);
  nn::ParamList gen;
  s.generator.collect(gen);
  restore_params(c, gen, "generator/");
  nn::ParamList dc;
  s.image_disc.collect(dc, "disc_c");
  restore_params(c, dc, "");
  nn::ParamList ds;
  s.semantic_disc.collect(ds, "disc_s");
  restore_params(c, ds, "");
  s.iteration = c.meta.value("iteration", std::int64_t{0});
  s.stage = c.meta.value("stage", 1);
  s.rng.restore(c.meta.value("rng", std::string()));
  restore_adam(c, s.g_opt, "opt_g");
  restore_adam(c, s.dc_opt, "opt_dc");
  restore_adam(c, s.ds_opt, "opt_ds");
  return s;
}

void save_state(const TrainState& state, const std::filesystem::path& path) { ckpt::save(state_to_container(state), path); }

TrainState load_state(const std::filesystem::path& path) { return state_from_container(ckpt::load(path)); }

std::string checkpoint_name(std::int64_t iteration) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%06lld.sfe", static_cast<long long>(iteration));
  return buf;
}

namespace {

void write_samples(const TrainState& state, const std::filesystem::path& path) {
  const auto& gen = state.generator;
  const int w = state.config.render.width;
  const int h = state.config.render.height;
  constexpr int kCount = 4;
  Rng rng(state.config.training.seed ^ kSampleSeedSalt);
  ad::NoGradGuard no_grad;
  const auto latents = render::sample_latents(rng, gen, kCount);
  const std::vector<CameraPose> poses(kCount);
  const auto result = render::render(gen, render::map_latents(gen, latents), poses, w, h);
  io::RgbImage grid{w * kCount, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * kCount * h * 3)};
  for (int i = 0; i < kCount; ++i) {
    const auto frame = render::to_frame(result, i);
    const auto img = io::to_rgb8(frame.rgb, w, h);
    for (int y = 0; y < h; ++y) {
      std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>(y) * w * 3, w * 3,
                  grid.pixels.begin() + (static_cast<std::ptrdiff_t>(y) * w * kCount + static_cast<std::ptrdiff_t>(i) * w) * 3);
    }
  }
  io::write_file(path, io::encode_png(grid));
}

}  // namespace

RunSummary run_training(const TrainConfig& config, const data::Dataset& dataset, const RunOptions& options) {
  TrainState state = options.resume ? load_state(*options.resume) : init_state(config);
  RunSummary summary;
  summary.final_iteration = state.iteration;
  if (state.finished()) {
    summary.nothing_to_do = true;
    return summary;
  }
  if (dataset.empty()) throw ConfigError("data.root", "dataset is empty");
  const data::Dataset data = dataset.materialized();
  std::filesystem::create_directories(options.out_dir);
  std::ofstream log(options.out_dir / "metrics.jsonl", std::ios::app);
  if (!log) throw IoError("cannot open " + (options.out_dir / "metrics.jsonl").string());

  const auto& tc = state.config.training;
  while (!state.finished() && (options.max_steps < 0 || summary.steps_run < options.max_steps)) {
    const Batch batch = sample_batch(data, state.rng, state.config, tc.batch_size);
    StepMetrics m;
    try {
      m = train_step(state, batch);
    } catch (const NumericalError&) {
      save_state(state, options.out_dir / "abort.sfe");
      throw;
    }
    ++summary.steps_run;
    if (options.on_step) options.on_step(m);
    const bool last = state.finished();
    if (m.iter == 1 || last || (tc.log_every > 0 && m.iter % tc.log_every == 0)) {
      log << to_json(m).dump() << "\n";
      log.flush();
    }
    if (last || (tc.checkpoint_every > 0 && m.iter % tc.checkpoint_every == 0)) {
      summary.last_checkpoint = options.out_dir / checkpoint_name(m.iter);
      save_state(state, summary.last_checkpoint);
      if (options.write_samples) {
        char name[32];
        std::snprintf(name, sizeof(name), "samples_%06lld.png", static_cast<long long>(m.iter));
        write_samples(state, options.out_dir / name);
      }
    }
  }
  summary.final_iteration = state.iteration;
  return summary;
}

}  // namespace sfe::train
