// sfe command-line tool. Human-readable output goes to stdout; failures are
// reported as one JSON object on stderr with exit codes 2 (config), 3
// (runtime or numerical) and 4 (I/O).

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <iostream>
#include <optional>

#include "sfe/data.hpp"
#include "sfe/image_io.hpp"
#include "sfe/invedit.hpp"
#include "sfe/metrics.hpp"
#include "sfe/model_io.hpp"
#include "sfe/service.hpp"
#include "sfe/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sfe;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kRuntime = 3, kIo = 4 };

struct PoseArgs {
  double pitch = 0.0;
  double yaw = 0.0;
  double roll = 0.0;
  void add(CLI::App* app) {
    app->add_option("--pitch", pitch, "Camera pitch (radians)");
    app->add_option("--yaw", yaw, "Camera yaw (radians)");
    app->add_option("--roll", roll, "Camera roll (radians)");
  }
  [[nodiscard]] CameraPose pose() const { return CameraPose::checked(pitch, yaw, roll); }
};

json pose_json(const CameraPose& p) { return {{"pitch", p.pitch}, {"yaw", p.yaw}, {"roll", p.roll}}; }

std::vector<LatentCode> sample_codes(std::uint64_t seed, int dim, int count) {
  Rng rng(seed);
  std::vector<LatentCode> out;
  for (int c = 0; c < count; ++c) {
    Eigen::VectorXd v(dim);
    for (int i = 0; i < dim; ++i) v[i] = rng.normal();
    out.emplace_back(std::move(v));
  }
  return out;
}

io::LabelImage label_image(const std::vector<int>& labels, int w, int h) {
  io::LabelImage img{w, h, std::vector<std::uint8_t>(labels.size())};
  for (std::size_t i = 0; i < labels.size(); ++i) img.labels[i] = static_cast<std::uint8_t>(labels[i]);
  return img;
}

std::vector<int> read_mask(const fs::path& path) {
  const auto img = io::decode_label_png(io::read_file(path));
  return {img.labels.begin(), img.labels.end()};
}

invedit::Target read_target(const fs::path& image, const fs::path& mask, const CameraPose& pose) {
  const auto img = io::decode_png(io::read_file(image));
  invedit::Target t;
  t.width = img.width;
  t.height = img.height;
  t.pose = pose;
  t.rgb = io::to_unit(img);
  t.labels = read_mask(mask);
  if (t.labels.size() != t.rgb.size() / 3) throw ShapeError("mask and image sizes differ");
  return t;
}

void write_frame(const render::RenderedFrame& f, const fs::path& rgb, const std::string& labels) {
  io::write_file(rgb, io::encode_png(io::to_rgb8(f.rgb, f.width, f.height)));
  if (!labels.empty()) io::write_file(labels, io::encode_label_png(label_image(f.labels, f.width, f.height)));
}

void write_trace(const fs::path& path, const std::vector<invedit::TraceEntry>& trace) {
  std::string text;
  for (const auto& e : trace) text += invedit::to_json(e).dump() + "\n";
  io::write_text(path, text);
}

metrics::Embeddings load_set(const fs::path& path, int side) {
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path)) {
      if (e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError(path.string() + " holds no PNG images");
    metrics::Embeddings out;
    for (std::size_t i = 0; i < files.size(); ++i) {
      const auto img = io::decode_png(io::read_file(files[i]));
      const auto e = metrics::embed_downsample(io::to_unit(img), img.width, img.height, side);
      if (i == 0) out.resize(static_cast<Eigen::Index>(files.size()), static_cast<Eigen::Index>(e.size()));
      for (std::size_t k = 0; k < e.size(); ++k) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = e[k];
    }
    return out;
  }
  return metrics::load_embeddings(path);
}

int fail(int code, const std::string& kind, const std::string& message, const json& extra = json::object()) {
  json j = {{"error", kind}, {"message", message}, {"exit_code", code}};
  j.update(extra);
  std::cerr << j.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D-aware face generation with mask-driven editing"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  bool seed_given = false;
  auto add_seed = [&](CLI::App* sub) {
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { seed = s, seed_given = true; }, "Random seed");
  };

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a generator");
  std::string config_path, resume_path, out_dir = "runs/latest", data_dir;
  int max_steps = -1;
  train_cmd->add_option("--config", config_path, "Config JSON")->required();
  train_cmd->add_option("--resume", resume_path, "Training checkpoint to resume from");
  train_cmd->add_option("--out", out_dir, "Output directory");
  train_cmd->add_option("--data", data_dir, "Dataset root (default: config data.root, else synthetic)");
  train_cmd->add_option("--max-steps", max_steps, "Stop after this many steps");
  add_seed(train_cmd);

  // render
  auto* render_cmd = app.add_subcommand("render", "Render one frame");
  std::string ckpt, out_png = "render.png", labels_png, inversion_path;
  int width = 0, height = 0;
  PoseArgs pose_args;
  render_cmd->add_option("--checkpoint", ckpt, "Generator or training checkpoint")->required();
  render_cmd->add_option("--out", out_png, "Output RGB PNG");
  render_cmd->add_option("--labels", labels_png, "Output label PNG");
  render_cmd->add_option("--inversion", inversion_path, "Render an inversion file instead of sampled latents");
  render_cmd->add_option("--width", width, "Width (default: config)");
  render_cmd->add_option("--height", height, "Height (default: config)");
  pose_args.add(render_cmd);
  add_seed(render_cmd);

  // invert
  auto* invert_cmd = app.add_subcommand("invert", "Invert an image and mask into offsets around the pivot");
  std::string image_path, mask_path, out_file = "inversion.sfe", trace_path;
  int steps = -1, pivot_samples = -1;
  std::optional<std::uint64_t> self_seed;
  invert_cmd->add_option("--checkpoint", ckpt, "Generator or training checkpoint")->required();
  invert_cmd->add_option("--image", image_path, "Target RGB PNG");
  invert_cmd->add_option("--mask", mask_path, "Target group mask PNG");
  invert_cmd->add_option("--self-seed", self_seed, "Invert a frame rendered by the checkpoint from this latent seed");
  invert_cmd->add_option("--out", out_file, "Output inversion file");
  invert_cmd->add_option("--trace", trace_path, "Output trace (JSON lines)");
  invert_cmd->add_option("--steps", steps, "Optimization steps");
  invert_cmd->add_option("--pivot-samples", pivot_samples, "Latents averaged into the pivot");
  pose_args.add(invert_cmd);
  add_seed(invert_cmd);

  // edit
  auto* edit_cmd = app.add_subcommand("edit", "Optimize an inversion toward an edited mask");
  std::string edited_path, region_path, after_png;
  edit_cmd->add_option("--checkpoint", ckpt)->required();
  edit_cmd->add_option("--inversion", inversion_path, "Inversion file")->required();
  edit_cmd->add_option("--image", image_path, "Inverted RGB PNG")->required();
  edit_cmd->add_option("--mask", mask_path, "Original group mask PNG")->required();
  edit_cmd->add_option("--edited-mask", edited_path, "Edited group mask PNG")->required();
  edit_cmd->add_option("--region", region_path, "Region PNG (nonzero = edited); default: mask difference");
  edit_cmd->add_option("--out", out_file, "Output inversion file");
  edit_cmd->add_option("--render", after_png, "Write the edited render here");
  edit_cmd->add_option("--trace", trace_path);
  edit_cmd->add_option("--steps", steps);
  pose_args.add(edit_cmd);
  add_seed(edit_cmd);

  // transfer
  auto* transfer_cmd = app.add_subcommand("transfer", "Transfer one group between two inversions");
  std::string source_path, target_path, mode = "appearance", src_image, src_mask, tgt_image, tgt_mask;
  int group = -1;
  transfer_cmd->add_option("--checkpoint", ckpt)->required();
  transfer_cmd->add_option("--source", source_path, "Source inversion")->required();
  transfer_cmd->add_option("--target", target_path, "Target inversion")->required();
  transfer_cmd->add_option("--group", group, "Group index")->required();
  transfer_cmd->add_option("--mode", mode, "appearance or geometry")->check(CLI::IsMember({"appearance", "geometry"}));
  transfer_cmd->add_option("--source-image", src_image);
  transfer_cmd->add_option("--source-mask", src_mask);
  transfer_cmd->add_option("--target-image", tgt_image);
  transfer_cmd->add_option("--target-mask", tgt_mask);
  transfer_cmd->add_option("--out", out_file);
  transfer_cmd->add_option("--steps", steps);
  pose_args.add(transfer_cmd);
  add_seed(transfer_cmd);

  // metrics
  auto* metrics_cmd = app.add_subcommand("metrics", "FID and KID between two image sets");
  std::string set_a, set_b;
  int side = 8, kid_subset = 100, kid_subsets = 50;
  metrics_cmd->add_option("--a", set_a, "PNG directory or embeddings file")->required();
  metrics_cmd->add_option("--b", set_b, "PNG directory or embeddings file")->required();
  metrics_cmd->add_option("--side", side, "Downsample side for PNG embeddings");
  metrics_cmd->add_option("--kid-subset", kid_subset);
  metrics_cmd->add_option("--kid-subsets", kid_subsets);
  add_seed(metrics_cmd);

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset");
  synth_cmd->add_option("--config", config_path, "Config JSON")->required();
  synth_cmd->add_option("--out", out_dir, "Dataset root")->required();
  add_seed(synth_cmd);

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");
  std::string serve_dir, static_dir;
  int port = -1;
  serve_cmd->add_option("--data-dir", serve_dir, "Data directory (default: $SFE_DATA_DIR or sfe_data)");
  serve_cmd->add_option("--port", port, "Port (default: $SFE_PORT or 8080)");
  serve_cmd->add_option("--static", static_dir, "UI asset directory served at /");
  add_seed(serve_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kConfig, "usage", e.what());
  }

  try {
    if (*train_cmd) {
      TrainConfig config = load_config(config_path);
      if (seed_given) config.training.seed = seed;
      data::Dataset dataset;
      const std::string root = data_dir.empty() ? config.data.root : data_dir;
      dataset = root.empty() ? data::synth_generate(config, config.training.seed) : data::load_dataset(root);
      train::RunOptions opts;
      opts.out_dir = out_dir;
      opts.max_steps = max_steps;
      if (!resume_path.empty()) opts.resume = resume_path;
      opts.on_step = [&](const train::StepMetrics& m) {
        if (m.iter % std::max(1, config.training.log_every) == 0) std::cout << train::to_json(m).dump() << std::endl;
      };
      const auto summary = train::run_training(config, dataset, opts);
      if (summary.nothing_to_do) {
        std::cout << "nothing to do: schedule already finished at iteration " << summary.final_iteration << "\n";
      } else {
        std::cout << "trained " << summary.steps_run << " steps, iteration " << summary.final_iteration;
        if (!summary.last_checkpoint.empty()) std::cout << ", checkpoint " << summary.last_checkpoint.string();
        std::cout << "\n";
      }
    } else if (*render_cmd) {
      const auto gen = load_generator(ckpt);
      const int w = width > 0 ? width : gen.config().render.width;
      const int h = height > 0 ? height : gen.config().render.height;
      render::RenderedFrame f;
      if (!inversion_path.empty()) {
        const auto inv = invedit::load_inversion(inversion_path);
        f = invedit::render_offset(gen, inv.pivot, inv.offset, pose_args.pose(), w, h);
      } else {
        const auto codes = sample_codes(seed, gen.model().latent_dim, 1 + gen.model().num_groups);
        f = render::render_frame(gen, codes[0], {codes.begin() + 1, codes.end()}, pose_args.pose(), w, h);
      }
      write_frame(f, out_png, labels_png);
      std::cout << "wrote " << out_png << "\n";
    } else if (*invert_cmd) {
      const auto gen = load_generator(ckpt);
      auto opts = invedit::options_from(gen.config().training.inversion);
      if (steps >= 0) opts.steps = steps;
      const int samples = pivot_samples > 0 ? pivot_samples : gen.config().training.inversion.pivot_samples;
      invedit::Target target;
      if (self_seed) {
        const auto codes = sample_codes(*self_seed, gen.model().latent_dim, 1 + gen.model().num_groups);
        const int w = gen.config().render.width;
        const int h = gen.config().render.height;
        const auto f = render::render_frame(gen, codes[0], {codes.begin() + 1, codes.end()}, pose_args.pose(), w, h);
        target = {w, h, pose_args.pose(), f.rgb, f.labels, {}};
      } else {
        if (image_path.empty() || mask_path.empty()) throw ConfigError("--image/--mask", "required without --self-seed");
        target = read_target(image_path, mask_path, pose_args.pose());
      }
      const auto pivot = invedit::compute_pivot(gen, samples, seed);
      const auto result = invedit::invert(gen, pivot, target, opts);
      invedit::save_inversion(
          {pivot, result.offset, {{"pose", pose_json(target.pose)}, {"width", target.width}, {"height", target.height}}},
          out_file);
      if (!trace_path.empty()) write_trace(trace_path, result.trace);
      for (const auto& w : result.warnings) std::cout << "warning: " << w << "\n";
      std::cout << "final mIoU " << result.final_miou << " after " << (result.trace.empty() ? 0 : result.trace.back().iter)
                << " steps; wrote " << out_file << "\n";
    } else if (*edit_cmd) {
      const auto gen = load_generator(ckpt);
      const auto inv = invedit::load_inversion(inversion_path);
      auto opts = invedit::options_from(gen.config().training.inversion);
      if (steps >= 0) opts.steps = steps;
      invedit::EditRequest req;
      req.original = read_target(image_path, mask_path, pose_args.pose());
      req.edited_labels = read_mask(edited_path);
      if (!region_path.empty()) req.region = io::decode_label_png(io::read_file(region_path)).labels;
      const auto result = invedit::edit(gen, inv.pivot, inv.offset, req, opts);
      auto meta = inv.meta;
      invedit::save_inversion({inv.pivot, result.offset, meta}, out_file);
      if (!trace_path.empty()) write_trace(trace_path, result.trace);
      if (!after_png.empty()) {
        write_frame(invedit::render_offset(gen, inv.pivot, result.offset, req.original.pose, req.original.width,
                                           req.original.height),
                    after_png, "");
      }
      std::cout << "edit finished, mIoU vs edited mask " << result.final_miou << "; wrote " << out_file << "\n";
    } else if (*transfer_cmd) {
      const auto gen = load_generator(ckpt);
      const auto src = invedit::load_inversion(source_path);
      const auto tgt = invedit::load_inversion(target_path);
      invedit::OptimizeResult result;
      if (mode == "appearance") {
        result.offset = invedit::transfer_appearance(src.offset, tgt.offset, group);
      } else {
        if (src_image.empty() || src_mask.empty() || tgt_image.empty() || tgt_mask.empty()) {
          throw ConfigError("--source-image/--source-mask/--target-image/--target-mask", "required for geometry mode");
        }
        auto opts = invedit::options_from(gen.config().training.inversion);
        if (steps >= 0) opts.steps = steps;
        result = invedit::transfer_geometry(gen, src.pivot, src.offset, read_target(src_image, src_mask, pose_args.pose()),
                                            read_target(tgt_image, tgt_mask, pose_args.pose()), group, opts);
      }
      for (const auto& w : result.warnings) std::cout << "warning: " << w << "\n";
      invedit::save_inversion({src.pivot, result.offset, src.meta}, out_file);
      std::cout << "wrote " << out_file << "\n";
    } else if (*metrics_cmd) {
      const auto a = load_set(set_a, side);
      const auto b = load_set(set_b, side);
      const auto f = metrics::fid(a, b);
      Rng rng(seed);
      const int subset = static_cast<int>(std::min<Eigen::Index>({kid_subset, a.rows(), b.rows()}));
      const double k = metrics::kid(a, b, subset, kid_subsets, rng);
      std::cout << json{{"fid", f.value}, {"fid_jitter", f.jitter}, {"kid", k}, {"count_a", a.rows()},
                        {"count_b", b.rows()}}
                       .dump()
                << "\n";
    } else if (*synth_cmd) {
      const TrainConfig config = load_config(config_path);
      const auto ds = data::synth_generate(config, seed_given ? seed : config.training.seed);
      data::write_dataset(ds, out_dir);
      std::cout << "wrote " << ds.size() << " records to " << out_dir << "\n";
    } else if (*serve_cmd) {
      service::ServiceOptions opts;
      int p = 8080;
      opts = service::options_from_env(opts, p);
      if (!serve_dir.empty()) opts.data_dir = serve_dir;
      if (port >= 0) p = port;
      if (!static_dir.empty()) opts.static_dir = static_dir;
      std::cout << "serving " << opts.data_dir.string() << " on port " << p << std::endl;
      service::serve(opts, p);
    }
  } catch (const ConfigError& e) {
    return fail(kConfig, "config", e.what(), {{"key", e.key()}});
  } catch (const IoError& e) {
    return fail(kIo, "io", e.what());
  } catch (const NumericalError& e) {
    return fail(kRuntime, "numerical", e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(kIo, "io", e.what());
  } catch (const std::exception& e) {
    return fail(kRuntime, "runtime", e.what());
  }
  return kOk;
}
