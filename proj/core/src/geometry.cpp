#include "sfe/geometry.hpp"

#include <cmath>

#include "sfe/errors.hpp"

namespace sfe::geometry {

namespace {

void check_finite(const ad::Var& v, const char* what, int layer) {
  if (!v.value().allFinite()) throw NumericalError(std::string("non-finite ") + what, layer);
}

}  // namespace

GeometryNetwork::GeometryNetwork(Rng& rng, const ModelConfig& c) : view_dependent_(c.view_dependent_descriptor) {
  mapping_ = nn::MappingNetwork(rng, c.latent_dim, c.mapping_width, c.mapping_layers, c.geometry_depth,
                                c.geometry_width, c.film_base_frequency, c.film_frequency_scale);
  int in = 3;
  for (int i = 0; i < c.geometry_depth; ++i) {
    layers_.push_back(nn::siren_layer(rng, in, c.geometry_width, c.film_base_frequency, i == 0));
    in = c.geometry_width;
  }
  const double head_bound = std::sqrt(6.0 / in) / c.film_base_frequency * 10.0;
  sigma_head_ = nn::Linear(rng, in, 1, head_bound, 0.0);
  semantic_head_ = nn::Linear(rng, in, c.num_classes, head_bound, 0.0);
  const int desc_in = in + (view_dependent_ ? 3 : 0);
  descriptor_head_ = nn::Linear(rng, desc_in, c.descriptor_dim, std::sqrt(6.0 / desc_in), 0.0);
}

nn::FilmParams GeometryNetwork::map(const ad::Var& z) const { return mapping_(z); }

GeometryOutput GeometryNetwork::forward(const nn::FilmParams& film, const ad::Var& positions,
                                        const ad::Var& directions) const {
  if (positions.cols() != 3) throw ShapeError("geometry positions must have 3 columns");
  if (film.layers != depth() || film.width != width()) {
    throw ShapeError("FiLM parameters do not match the geometry backbone");
  }
  if (film.batch() != positions.rows()) throw ShapeError("FiLM rows must match position rows");
  if (!positions.value().allFinite()) throw NumericalError("non-finite positions");

  // Finiteness is checked once at the heads; on failure the stored trunk
  // activations locate the first bad layer.
  std::vector<ad::Var> trunk;
  trunk.reserve(static_cast<std::size_t>(depth()));
  ad::Var h = positions;
  for (int l = 0; l < depth(); ++l) {
    h = nn::film_sine(layers_[static_cast<std::size_t>(l)], h, film, l);
    trunk.push_back(h);
  }
  GeometryOutput out;
  out.sigma = ad::sigmoid(sigma_head_(h));
  out.sem_logits = semantic_head_(h);
  if (view_dependent_) {
    if (!directions.defined() || directions.rows() != positions.rows()) {
      throw ShapeError("view-dependent descriptor needs one direction per point");
    }
    out.descriptor = descriptor_head_(ad::concat_cols({h, directions}));
  } else {
    out.descriptor = descriptor_head_(h);
  }
  if (!out.sigma.value().allFinite() || !out.sem_logits.value().allFinite() ||
      !out.descriptor.value().allFinite()) {
    for (int l = 0; l < depth(); ++l) check_finite(trunk[static_cast<std::size_t>(l)], "geometry activation", l);
    throw NumericalError("non-finite geometry head output", depth());
  }
  return out;
}

void GeometryNetwork::collect(nn::ParamList& out, const std::string& prefix) {
  mapping_.collect(out, prefix + ".mapping");
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(out, prefix + ".layer" + std::to_string(i));
  sigma_head_.collect(out, prefix + ".sigma_head");
  semantic_head_.collect(out, prefix + ".semantic_head");
  descriptor_head_.collect(out, prefix + ".descriptor_head");
}

}  // namespace sfe::geometry
