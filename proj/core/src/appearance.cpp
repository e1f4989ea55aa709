#include "sfe/appearance.hpp"

#include <cmath>

#include "sfe/errors.hpp"

namespace sfe::appearance {

AppearanceNetwork::AppearanceNetwork(Rng& rng, const ModelConfig& c) : sharing_(c.appearance_sharing) {
  const int n = c.num_groups;
  const int in0 = c.descriptor_dim + 3;
  const int backbone_count = sharing_ == AppearanceSharing::kNone ? n : 1;
  const int head_count = sharing_ == AppearanceSharing::kFull ? 1 : n;
  for (int g = 0; g < n; ++g) {
    mappings_.emplace_back(rng, c.latent_dim, c.mapping_width, c.mapping_layers, c.appearance_depth,
                           c.appearance_width, c.film_base_frequency, c.film_frequency_scale);
  }
  for (int b = 0; b < backbone_count; ++b) {
    std::vector<nn::Linear> layers;
    int in = in0;
    for (int i = 0; i < c.appearance_depth; ++i) {
      layers.push_back(nn::siren_layer(rng, in, c.appearance_width, c.film_base_frequency, i == 0));
      in = c.appearance_width;
    }
    backbones_.push_back(std::move(layers));
  }
  const double head_bound = std::sqrt(6.0 / c.appearance_width) / c.film_base_frequency * 10.0;
  for (int h = 0; h < head_count; ++h) heads_.emplace_back(rng, c.appearance_width, 3, head_bound, 0.0);
}

int AppearanceNetwork::depth() const { return static_cast<int>(backbones_.front().size()); }
int AppearanceNetwork::width() const { return backbones_.front().front().out(); }

const nn::MappingNetwork& AppearanceNetwork::mapping(int group) const {
  if (group < 0 || group >= groups()) throw IndexError("appearance group " + std::to_string(group) + " out of range");
  return mappings_[static_cast<std::size_t>(group)];
}

const std::vector<nn::Linear>& AppearanceNetwork::backbone(int group) const {
  return backbones_.size() == 1 ? backbones_.front() : backbones_[static_cast<std::size_t>(group)];
}

const nn::Linear& AppearanceNetwork::head(int group) const {
  return heads_.size() == 1 ? heads_.front() : heads_[static_cast<std::size_t>(group)];
}

nn::FilmParams AppearanceNetwork::map(int group, const ad::Var& z) const { return mapping(group)(z); }

ad::Var AppearanceNetwork::forward_group(int group, const nn::FilmParams& film, const ad::Var& descriptors,
                                         const ad::Var& directions) const {
  if (group < 0 || group >= groups()) throw IndexError("appearance group " + std::to_string(group) + " out of range");
  const auto& layers = backbone(group);
  if (film.layers != static_cast<int>(layers.size()) || film.width != layers.front().out()) {
    throw ShapeError("FiLM parameters do not match the appearance backbone");
  }
  if (directions.cols() != 3 || directions.rows() != descriptors.rows()) {
    throw ShapeError("appearance needs one 3-vector direction per descriptor");
  }
  if (film.batch() != descriptors.rows()) throw ShapeError("FiLM rows must match descriptor rows");
  ad::Var h = ad::concat_cols({descriptors, directions});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    h = nn::film_sine(layers[l], h, film, static_cast<int>(l));
    if (!h.value().allFinite()) throw NumericalError("non-finite appearance activation", static_cast<int>(l));
  }
  return ad::sigmoid(head(group)(h));
}

ad::Var AppearanceNetwork::forward(const semask::SemanticGrouping& grouping, const ad::Var& descriptors,
                                   const ad::Var& directions, const std::vector<nn::FilmParams>& films,
                                   const std::vector<std::int64_t>& frame_of_point) const {
  const auto m = descriptors.rows();
  if (static_cast<int>(grouping.collections.size()) != groups()) {
    throw ShapeError("grouping has " + std::to_string(grouping.collections.size()) + " collections, network has " +
                     std::to_string(groups()));
  }
  if (static_cast<Eigen::Index>(frame_of_point.size()) != m) throw ShapeError("frame_of_point length mismatch");
  ad::Var rgb = ad::Var::zeros(m, 3);
  for (int g = 0; g < groups(); ++g) {
    const auto& rows = grouping.collections[static_cast<std::size_t>(g)];
    if (rows.empty()) continue;
    if (g >= static_cast<int>(films.size()) || !films[static_cast<std::size_t>(g)].values.defined()) {
      throw ConfigError("appearance latents", "no latent code for non-empty group " + std::to_string(g));
    }
    const nn::FilmParams& film = films[static_cast<std::size_t>(g)];
    std::vector<std::int64_t> frames;
    frames.reserve(rows.size());
    for (auto r : rows) {
      const auto f = frame_of_point[static_cast<std::size_t>(r)];
      if (f < 0 || f >= film.batch()) throw IndexError("frame index out of range for group FiLM parameters");
      frames.push_back(f);
    }
    const auto point_idx = ad::make_index(rows);
    const ad::Var d = ad::gather(descriptors, point_idx);
    const ad::Var v = ad::gather(directions, point_idx);
    const ad::Var c = forward_group(g, film.gather_rows(ad::make_index(std::move(frames))), d, v);
    rgb = ad::add(rgb, ad::scatter_add(c, point_idx, m));
  }
  return rgb;
}

void AppearanceNetwork::collect(nn::ParamList& out, const std::string& prefix) {
  for (std::size_t g = 0; g < mappings_.size(); ++g) mappings_[g].collect(out, prefix + ".mapping" + std::to_string(g));
  for (std::size_t b = 0; b < backbones_.size(); ++b) {
    for (std::size_t l = 0; l < backbones_[b].size(); ++l) {
      backbones_[b][l].collect(out, prefix + ".backbone" + std::to_string(b) + ".layer" + std::to_string(l));
    }
  }
  for (std::size_t h = 0; h < heads_.size(); ++h) heads_[h].collect(out, prefix + ".head" + std::to_string(h));
}

}  // namespace sfe::appearance
