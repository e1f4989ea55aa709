#include "sfe/invedit.hpp"

#include <cmath>
#include <limits>

#include "sfe/errors.hpp"

namespace sfe::invedit {

namespace {

constexpr int kPivotChunk = 1024;

ad::Var row_var(const ad::Matrix& pivot, const ad::Var& offset) { return ad::add(ad::Var(pivot), offset); }

void check_group(const EditOffset& o, int group) {
  if (group < 0 || group >= static_cast<int>(o.appearance.size())) {
    throw IndexError("group " + std::to_string(group) + " out of range");
  }
}

ad::Matrix rows_of(std::span<const double> v, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(v.size()) != rows * cols) throw ShapeError("target buffer has the wrong size");
  return Eigen::Map<const ad::Matrix>(v.data(), rows, cols);
}

void check_target(const render::Generator& gen, const Target& t) {
  const auto p = static_cast<std::size_t>(t.width) * t.height;
  if (t.width < 1 || t.height < 1) throw DomainError("target resolution must be at least 1x1");
  if (t.rgb.size() != p * 3) throw ShapeError("target image does not match its resolution");
  if (t.labels.size() != p) throw ShapeError("target mask does not match the image resolution");
  const int n = gen.model().num_groups;
  for (std::size_t i = 0; i < p; ++i) {
    const int l = t.labels[i];
    if (l < 0 || l >= n) {
      throw IndexError("target label " + std::to_string(l) + " at pixel (" + std::to_string(i % t.width) + ", " +
                       std::to_string(i / t.width) + ") is not a group index");
    }
  }
  if (!t.group_probs.empty() && t.group_probs.size() != p * static_cast<std::size_t>(n)) {
    throw ShapeError("soft target does not match the image resolution");
  }
}

ad::Matrix semantic_target(const Target& t, int n) {
  const auto p = static_cast<Eigen::Index>(t.labels.size());
  if (!t.group_probs.empty()) return rows_of(t.group_probs, p, n);
  ad::Matrix m = ad::Matrix::Zero(p, n);
  for (Eigen::Index i = 0; i < p; ++i) m(i, t.labels[static_cast<std::size_t>(i)]) = 1.0;
  return m;
}

const PerceptualExtractor& extractor() {
  static const PerceptualExtractor e;
  return e;
}

// One evaluated iterate: the differentiable loss plus its parts.
struct Evaluation {
  ad::Var loss;
  TraceEntry entry;
};

class Objective {
 public:
  Objective(const render::Generator& gen, const Target& target, std::span<const double> pixel_weights,
            const LossWeights& weights)
      : gen_(gen), target_(target), weights_(weights), shape_{1, target.height, target.width} {
    check_target(gen, target);
    const auto p = shape_.pixels();
    image_ = rows_of(target.rgb, p, 3);
    semantic_ = semantic_target(target, gen.model().num_groups);
    mask_ = ad::Matrix::Ones(p, 3);
    if (!pixel_weights.empty()) {
      if (static_cast<Eigen::Index>(pixel_weights.size()) != p) throw ShapeError("region mask does not match the image");
      for (Eigen::Index i = 0; i < p; ++i) mask_.row(i).setConstant(pixel_weights[static_cast<std::size_t>(i)]);
    }
    if (weights_.lambda_vgg != 0.0) {
      ad::NoGradGuard guard;
      target_features_ = extractor().features(ad::Var(image_.cwiseProduct(mask_)), shape_).value();
    }
  }

  Evaluation operator()(const render::Styles& styles) const {
    const CameraPose pose = target_.pose;
    const auto r = render::render(gen_, styles, std::span<const CameraPose>(&pose, 1), target_.width, target_.height);
    Evaluation ev;
    const double p3 = static_cast<double>(shape_.pixels()) * 3.0;
    const ad::Var sem = ad::mse(r.group_probs, ad::Var(semantic_));
    const ad::Var diff = ad::sub(r.rgb, ad::Var(image_));
    const ad::Var img = ad::scale(ad::sum(ad::mul(ad::square(diff), ad::Var(mask_))), 1.0 / p3);
    ad::Var loss = ad::add(ad::scale(sem, weights_.lambda_s), ad::scale(img, weights_.lambda_im));
    ev.entry.semantic = sem.item();
    ev.entry.image = img.item();
    if (weights_.lambda_vgg != 0.0) {
      const ad::Var f = extractor().features(ad::mul(r.rgb, ad::Var(mask_)), shape_);
      const ad::Var perc = ad::mse(f, ad::Var(target_features_));
      loss = ad::add(loss, ad::scale(perc, weights_.lambda_vgg));
      ev.entry.perceptual = perc.item();
    }
    ev.loss = loss;
    ev.entry.loss = loss.item();
    ev.entry.image_mse = (r.rgb.value() - image_).squaredNorm() / p3;
    ev.entry.miou = miou(r.labels, target_.labels, gen_.model().num_groups).mean;
    return ev;
  }

 private:
  const render::Generator& gen_;
  const Target& target_;
  LossWeights weights_;
  nn::ImageShape shape_;
  ad::Matrix image_;
  ad::Matrix semantic_;
  ad::Matrix mask_;
  ad::Matrix target_features_;
};

OptimizeResult optimize(const render::Generator& gen, const PivotLatent& pivot, const EditOffset& start,
                        const Objective& objective, const OptimizeOptions& options) {
  if (!start.compatible(pivot)) throw ShapeError("offset shapes do not match the pivot");
  if (options.steps < 0) throw DomainError("step count must be >= 0");
  const auto& m = gen.model();
  ad::Var geo = options.optimize_geometry ? ad::Var::parameter(start.geometry) : ad::Var(start.geometry);
  std::vector<ad::Var> app;
  for (const auto& a : start.appearance) {
    app.push_back(options.optimize_appearance ? ad::Var::parameter(a) : ad::Var(a));
  }
  std::vector<ad::Var*> params;
  if (options.optimize_geometry) params.push_back(&geo);
  if (options.optimize_appearance) {
    for (auto& a : app) params.push_back(&a);
  }
  nn::Adam adam(options.learning_rate, 0.9, 0.999, 1e-8);

  auto current = [&] {
    EditOffset o;
    o.geometry = geo.value();
    for (const auto& a : app) o.appearance.push_back(a.value());
    return o;
  };

  OptimizeResult result;
  result.offset = start;
  double best = std::numeric_limits<double>::infinity();
  EditOffset best_offset = start;
  double best_miou = 0.0;

  for (int it = 0; it <= options.steps; ++it) {
    if (options.cancelled && options.cancelled()) {
      result.stopped_early = true;
      break;
    }
    render::Styles styles;
    styles.geometry = {row_var(pivot.geometry, geo), m.geometry_depth, m.geometry_width, nullptr};
    for (std::size_t g = 0; g < app.size(); ++g) {
      styles.appearance.push_back(
          {row_var(pivot.appearance[g], app[g]), gen.appearance().depth(), gen.appearance().width(), nullptr});
    }
    Evaluation ev;
    try {
      ev = objective(styles);
    } catch (const NumericalError& e) {
      result.warnings.push_back(std::string("stopped at iteration ") + std::to_string(it) + ": " + e.what());
      result.stopped_early = true;
      break;
    }
    ev.entry.iter = it;
    if (!std::isfinite(ev.entry.loss)) {
      result.warnings.push_back("non-finite loss at iteration " + std::to_string(it));
      result.stopped_early = true;
      break;
    }
    result.trace.push_back(ev.entry);
    if (options.on_step) options.on_step(ev.entry);
    result.offset = current();
    result.final_miou = ev.entry.miou;
    if (ev.entry.loss < best) {
      best = ev.entry.loss;
      best_offset = result.offset;
      best_miou = ev.entry.miou;
    }
    if (it == options.steps || params.empty()) break;

    std::vector<ad::Var> inputs;
    for (auto* p : params) inputs.push_back(*p);
    const auto grads = ad::gradients(ev.loss, inputs);
    bool finite = true;
    for (const auto& g : grads) finite = finite && g.value().allFinite();
    if (!finite) {
      result.warnings.push_back("non-finite gradient at iteration " + std::to_string(it));
      result.stopped_early = true;
      break;
    }
    adam.step(params, grads);
  }
  if (result.stopped_early && !result.trace.empty()) {
    result.offset = best_offset;
    result.final_miou = best_miou;
  }
  return result;
}

}  // namespace

PivotLatent compute_pivot(const render::Generator& gen, int sample_count, std::uint64_t seed) {
  if (sample_count < 1) throw DomainError("pivot needs at least one sample");
  ad::NoGradGuard guard;
  Rng rng(seed);
  PivotLatent p;
  const int n = gen.model().num_groups;
  for (int done = 0; done < sample_count;) {
    const int chunk = std::min(kPivotChunk, sample_count - done);
    const auto styles = render::map_latents(gen, render::sample_latents(rng, gen, chunk));
    const ad::Matrix g = styles.geometry.values.value().colwise().sum();
    p.geometry = p.geometry.size() ? ad::Matrix(p.geometry + g) : g;
    if (p.appearance.empty()) p.appearance.resize(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
      const ad::Matrix a = styles.appearance[static_cast<std::size_t>(k)].values.value().colwise().sum();
      auto& acc = p.appearance[static_cast<std::size_t>(k)];
      acc = acc.size() ? ad::Matrix(acc + a) : a;
    }
    done += chunk;
  }
  p.geometry /= sample_count;
  for (auto& a : p.appearance) a /= sample_count;
  return p;
}

EditOffset EditOffset::zeros(const PivotLatent& pivot) {
  EditOffset o;
  o.geometry = ad::Matrix::Zero(pivot.geometry.rows(), pivot.geometry.cols());
  for (const auto& a : pivot.appearance) o.appearance.push_back(ad::Matrix::Zero(a.rows(), a.cols()));
  return o;
}

bool EditOffset::compatible(const PivotLatent& pivot) const {
  if (geometry.rows() != pivot.geometry.rows() || geometry.cols() != pivot.geometry.cols()) return false;
  if (appearance.size() != pivot.appearance.size()) return false;
  for (std::size_t i = 0; i < appearance.size(); ++i) {
    if (appearance[i].rows() != pivot.appearance[i].rows() || appearance[i].cols() != pivot.appearance[i].cols()) {
      return false;
    }
  }
  return true;
}

render::Styles make_styles(const render::Generator& gen, const PivotLatent& pivot, const EditOffset& offset) {
  if (!offset.compatible(pivot)) throw ShapeError("offset shapes do not match the pivot");
  const auto& m = gen.model();
  if (pivot.geometry.cols() != 2L * m.geometry_depth * m.geometry_width ||
      static_cast<int>(pivot.appearance.size()) != m.num_groups) {
    throw ShapeError("pivot does not match the generator");
  }
  render::Styles s;
  s.geometry = {ad::Var(pivot.geometry + offset.geometry), m.geometry_depth, m.geometry_width, nullptr};
  for (std::size_t g = 0; g < pivot.appearance.size(); ++g) {
    s.appearance.push_back({ad::Var(pivot.appearance[g] + offset.appearance[g]), gen.appearance().depth(),
                            gen.appearance().width(), nullptr});
  }
  return s;
}

render::RenderedFrame render_offset(const render::Generator& gen, const PivotLatent& pivot, const EditOffset& offset,
                                    const CameraPose& pose, int width, int height) {
  ad::NoGradGuard guard;
  const auto r = render::render(gen, make_styles(gen, pivot, offset), std::span<const CameraPose>(&pose, 1), width,
                                height);
  return render::to_frame(r, 0);
}

MiouResult miou(std::span<const int> pred, std::span<const int> gt, int n) {
  if (pred.size() != gt.size()) throw ShapeError("label maps differ in size");
  if (n < 1) throw DomainError("class count must be >= 1");
  std::vector<std::int64_t> inter(static_cast<std::size_t>(n), 0);
  std::vector<std::int64_t> uni(static_cast<std::size_t>(n), 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int a = pred[i];
    const int b = gt[i];
    if (a < 0 || a >= n || b < 0 || b >= n) throw IndexError("label out of range at index " + std::to_string(i));
    if (a == b) {
      ++inter[static_cast<std::size_t>(a)];
      ++uni[static_cast<std::size_t>(a)];
    } else {
      ++uni[static_cast<std::size_t>(a)];
      ++uni[static_cast<std::size_t>(b)];
    }
  }
  MiouResult r;
  r.per_class.assign(static_cast<std::size_t>(n), std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < n; ++c) {
    const auto u = uni[static_cast<std::size_t>(c)];
    if (u == 0) continue;
    r.per_class[static_cast<std::size_t>(c)] = static_cast<double>(inter[static_cast<std::size_t>(c)]) / u;
    sum += r.per_class[static_cast<std::size_t>(c)];
    ++present;
  }
  r.mean = present ? sum / present : 1.0;
  return r;
}

PerceptualExtractor::PerceptualExtractor(std::uint64_t seed) {
  Rng rng(seed);
  conv1_ = nn::Conv2d(rng, 3, 8, 3, 1);
  conv2_ = nn::Conv2d(rng, 8, 16, 3, 2);
}

ad::Var PerceptualExtractor::features(const ad::Var& images, const nn::ImageShape& shape) const {
  const ad::Var h1 = ad::leaky_relu(conv1_(images, shape), 0.2);
  const ad::Var h2 = ad::leaky_relu(conv2_(h1, conv1_.output_shape(shape)), 0.2);
  return ad::concat_cols({ad::reshape(h1, 1, h1.rows() * h1.cols()), ad::reshape(h2, 1, h2.rows() * h2.cols())});
}

nlohmann::json to_json(const TraceEntry& e) {
  return {{"iter", e.iter},
          {"loss", e.loss},
          {"semantic", e.semantic},
          {"image", e.image},
          {"perceptual", e.perceptual},
          {"image_mse", e.image_mse},
          {"miou", e.miou}};
}

OptimizeOptions options_from(const InversionConfig& c) {
  OptimizeOptions o;
  o.weights = {c.lambda_s, c.lambda_im, c.lambda_vgg};
  o.learning_rate = c.learning_rate;
  o.steps = c.steps;
  return o;
}

TraceEntry evaluate_loss(const render::Generator& gen, const PivotLatent& pivot, const EditOffset& offset,
                         const Target& target, std::span<const double> pixel_weights, const LossWeights& weights) {
  ad::NoGradGuard guard;
  const Objective objective(gen, target, pixel_weights, weights);
  return objective(make_styles(gen, pivot, offset)).entry;
}

OptimizeResult invert(const render::Generator& gen, const PivotLatent& pivot, const Target& target,
                      const OptimizeOptions& options, const std::optional<EditOffset>& start) {
  const Objective objective(gen, target, {}, options.weights);
  return optimize(gen, pivot, start ? *start : EditOffset::zeros(pivot), objective, options);
}

std::vector<std::uint8_t> label_diff(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw ShapeError("label maps differ in size");
  std::vector<std::uint8_t> r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] != b[i] ? 1 : 0;
  return r;
}

OptimizeResult edit(const render::Generator& gen, const PivotLatent& pivot, const EditOffset& inverted,
                    const EditRequest& request, const OptimizeOptions& options) {
  const auto& original = request.original;
  if (request.edited_labels.size() != original.labels.size()) {
    throw ShapeError("edited mask does not match the original mask");
  }
  const auto region = request.region ? *request.region : label_diff(original.labels, request.edited_labels);
  if (region.size() != original.labels.size()) throw ShapeError("region mask does not match the image");
  bool any = false;
  for (auto v : region) any = any || v != 0;
  if (!any && request.edited_labels == original.labels) {
    OptimizeResult r;
    r.offset = inverted;
    r.final_miou = 1.0;
    return r;
  }
  Target target = original;
  target.labels = request.edited_labels;
  target.group_probs.clear();
  std::vector<double> weights(region.size());
  for (std::size_t i = 0; i < region.size(); ++i) weights[i] = region[i] ? 0.0 : 1.0;
  const Objective objective(gen, target, weights, options.weights);
  return optimize(gen, pivot, inverted, objective, options);
}

EditOffset transfer_appearance(const EditOffset& source, const EditOffset& target, int group) {
  check_group(source, group);
  check_group(target, group);
  EditOffset out = source;
  out.appearance[static_cast<std::size_t>(group)] = target.appearance[static_cast<std::size_t>(group)];
  return out;
}

void swap_appearance(EditOffset& a, EditOffset& b, int group) {
  check_group(a, group);
  check_group(b, group);
  std::swap(a.appearance[static_cast<std::size_t>(group)], b.appearance[static_cast<std::size_t>(group)]);
}

OptimizeResult transfer_geometry(const render::Generator& gen, const PivotLatent& pivot, const EditOffset& source,
                                 const Target& source_target, const Target& target_target, int group,
                                 const OptimizeOptions& options) {
  check_group(source, group);
  if (source_target.width != target_target.width || source_target.height != target_target.height) {
    throw ShapeError("source and target resolutions differ");
  }
  check_target(gen, source_target);
  check_target(gen, target_target);
  Target composite = source_target;
  composite.group_probs.clear();
  bool any = false;
  for (std::size_t i = 0; i < composite.labels.size(); ++i) {
    if (target_target.labels[i] != group) continue;
    any = true;
    composite.labels[i] = group;
    for (int c = 0; c < 3; ++c) composite.rgb[i * 3 + c] = target_target.rgb[i * 3 + c];
  }
  if (!any) {
    OptimizeResult r;
    r.offset = source;
    r.warnings.push_back("target has no pixels of group " + std::to_string(group) + "; nothing transferred");
    return r;
  }
  OptimizeOptions geo_only = options;
  geo_only.optimize_geometry = true;
  geo_only.optimize_appearance = false;
  const Objective objective(gen, composite, {}, options.weights);
  return optimize(gen, pivot, source, objective, geo_only);
}

namespace {

void put_rows(ckpt::Container& c, const std::string& prefix, const ad::Matrix& geometry,
              const std::vector<ad::Matrix>& appearance) {
  c.put(prefix + "/geometry", geometry, ckpt::DType::kFloat64);
  for (std::size_t g = 0; g < appearance.size(); ++g) {
    c.put(prefix + "/appearance/" + std::to_string(g), appearance[g], ckpt::DType::kFloat64);
  }
}

void get_rows(const ckpt::Container& c, const std::string& prefix, ad::Matrix& geometry,
              std::vector<ad::Matrix>& appearance) {
  if (!c.contains(prefix + "/geometry")) throw IoError("missing tensor " + prefix + "/geometry");
  geometry = c.at(prefix + "/geometry").value;
  appearance.clear();
  for (std::size_t g = 0; c.contains(prefix + "/appearance/" + std::to_string(g)); ++g) {
    appearance.push_back(c.at(prefix + "/appearance/" + std::to_string(g)).value);
  }
}

}  // namespace

void save_pivot(const PivotLatent& pivot, const std::filesystem::path& path) {
  ckpt::Container c;
  c.meta["kind"] = "pivot";
  put_rows(c, "pivot", pivot.geometry, pivot.appearance);
  ckpt::save(c, path);
}

PivotLatent load_pivot(const std::filesystem::path& path) {
  const auto c = ckpt::load(path);
  PivotLatent p;
  get_rows(c, "pivot", p.geometry, p.appearance);
  return p;
}

void save_inversion(const InversionArtifact& a, const std::filesystem::path& path) {
  if (!a.offset.compatible(a.pivot)) throw ShapeError("offset shapes do not match the pivot");
  ckpt::Container c;
  c.meta = a.meta;
  c.meta["kind"] = "inversion";
  put_rows(c, "pivot", a.pivot.geometry, a.pivot.appearance);
  put_rows(c, "offset", a.offset.geometry, a.offset.appearance);
  ckpt::save(c, path);
}

InversionArtifact load_inversion(const std::filesystem::path& path) {
  const auto c = ckpt::load(path);
  if (c.meta.value("kind", std::string()) != "inversion") throw IoError(path.string() + " is not an inversion file");
  InversionArtifact a;
  a.meta = c.meta;
  get_rows(c, "pivot", a.pivot.geometry, a.pivot.appearance);
  get_rows(c, "offset", a.offset.geometry, a.offset.appearance);
  if (!a.offset.compatible(a.pivot)) throw IoError(path.string() + ": offset shapes do not match the pivot");
  return a;
}

}  // namespace sfe::invedit
