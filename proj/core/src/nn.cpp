#include "sfe/nn.hpp"

#include <cmath>

#include "sfe/errors.hpp"

namespace sfe::nn {

Matrix uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

Linear::Linear(Rng& rng, int in, int out, double weight_bound, double bias_bound)
    : weight(Var::parameter(uniform_matrix(rng, in, out, weight_bound))),
      bias(Var::parameter(uniform_matrix(rng, 1, out, bias_bound))) {}

void Linear::collect(ParamList& out, const std::string& prefix) {
  out.emplace_back(prefix + ".weight", &weight);
  out.emplace_back(prefix + ".bias", &bias);
}

MappingNetwork::MappingNetwork(Rng& rng, int latent_dim, int hidden_width, int hidden_layers,
                               int film_layers_, int film_width_, double base_frequency_,
                               double frequency_scale_)
    : film_layers(film_layers_),
      film_width(film_width_),
      base_frequency(base_frequency_),
      frequency_scale(frequency_scale_) {
  int in = latent_dim;
  for (int i = 0; i < hidden_layers; ++i) {
    const double bound = std::sqrt(6.0 / in) / std::sqrt(1.0 + 0.2 * 0.2);
    hidden.emplace_back(rng, in, hidden_width, bound, 1.0 / std::sqrt(in));
    in = hidden_width;
  }
  // Small output layer so that initial frequencies sit near the base value.
  output = Linear(rng, in, 2 * film_layers * film_width, 0.25 * std::sqrt(1.0 / in), 0.0);
}

FilmParams MappingNetwork::operator()(const Var& z) const {
  if (z.cols() != latent_dim()) {
    throw ShapeError("mapping network expects latent dim " + std::to_string(latent_dim()) + ", got " +
                     std::to_string(z.cols()));
  }
  Var h = z;
  for (const auto& layer : hidden) h = ad::leaky_relu(layer(h), 0.2);
  Var raw = output(h);
  // Frequencies get base + scale * raw; phases pass through.
  Matrix scale_row(1, raw.cols());
  Matrix shift_row(1, raw.cols());
  for (int l = 0; l < film_layers; ++l) {
    scale_row.middleCols(2L * l * film_width, film_width).setConstant(frequency_scale);
    shift_row.middleCols(2L * l * film_width, film_width).setConstant(base_frequency);
    scale_row.middleCols((2L * l + 1) * film_width, film_width).setConstant(1.0);
    shift_row.middleCols((2L * l + 1) * film_width, film_width).setConstant(0.0);
  }
  Var values = ad::add(ad::mul(raw, Var(std::move(scale_row))), Var(std::move(shift_row)));
  return {values, film_layers, film_width, nullptr};
}

FilmParams FilmParams::gather_rows(const ad::IndexTablePtr& selection) const {
  if (!rows) return {values, layers, width, selection};
  std::vector<std::int64_t> composed;
  composed.reserve(selection->indices.size());
  for (auto i : selection->indices) {
    if (i < 0 || i >= static_cast<std::int64_t>(rows->indices.size())) throw IndexError("FiLM row out of range");
    composed.push_back(rows->indices[static_cast<std::size_t>(i)]);
  }
  return {values, layers, width, ad::make_index(std::move(composed))};
}

void MappingNetwork::collect(ParamList& out, const std::string& prefix) {
  for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i].collect(out, prefix + ".hidden" + std::to_string(i));
  output.collect(out, prefix + ".output");
}

Var film_sine(const Linear& layer, const Var& x, const FilmParams& film, int l) {
  if (l < 0 || l >= film.layers) throw IndexError("FiLM layer " + std::to_string(l) + " out of range");
  if (layer.out() != film.width) throw ShapeError("FiLM width does not match layer width");
  if (film.batch() != x.rows()) throw ShapeError("FiLM rows must match input rows");
  const Eigen::Index w = film.width;
  const Eigen::Index g_off = 2L * l * w;
  const Eigen::Index b_off = (2L * l + 1) * w;
  const Eigen::Index m = x.rows();
  const auto rows = film.rows;
  auto source = [rows](Eigen::Index r) { return rows ? rows->indices[static_cast<std::size_t>(r)] : r; };

  struct Saved {
    Matrix pre;
    Matrix arg;
  };
  auto saved = std::make_shared<Saved>();
  saved->pre.noalias() = x.value() * layer.weight.value();
  saved->pre.rowwise() += layer.bias.value().row(0);
  saved->arg.resize(m, w);
  const Matrix& values = film.values.value();
  for (Eigen::Index r = 0; r < m; ++r) {
    const auto f = source(r);
    saved->arg.row(r) = values.row(f).segment(g_off, w).cwiseProduct(saved->pre.row(r)) + values.row(f).segment(b_off, w);
  }
  Matrix out = saved->arg.array().sin();

  const Var weight = layer.weight;
  const Var values_var = film.values;
  return ad::make_result(std::move(out), {x, layer.weight, layer.bias, film.values},
                         [saved, x, weight, values_var, rows, source, g_off, b_off, w](const Var& g) {
    if (ad::grad_enabled()) throw std::logic_error("FiLM sine layers have no second-order backward");
    const Matrix& vals = values_var.value();
    const Eigen::Index m = saved->pre.rows();
    Matrix g_arg = g.value().array() * saved->arg.array().cos();
    Matrix g_vals = Matrix::Zero(vals.rows(), vals.cols());
    Matrix g_pre(m, w);
    for (Eigen::Index r = 0; r < m; ++r) {
      const auto f = source(r);
      g_vals.row(f).segment(g_off, w) += g_arg.row(r).cwiseProduct(saved->pre.row(r));
      g_vals.row(f).segment(b_off, w) += g_arg.row(r);
      g_pre.row(r) = g_arg.row(r).cwiseProduct(vals.row(f).segment(g_off, w));
    }
    Var gx;
    if (x.requires_grad()) gx = Var(Matrix(g_pre * weight.value().transpose()));
    Var gw;
    if (weight.requires_grad()) gw = Var(Matrix(x.value().transpose() * g_pre));
    Var gb(Matrix(g_pre.colwise().sum()));
    return std::vector<Var>{gx, gw, gb, Var(std::move(g_vals))};
  });
}

Linear siren_layer(Rng& rng, int in, int out, double frequency, bool first) {
  const double bound = first ? 1.0 / in : std::sqrt(6.0 / in) / frequency;
  return Linear(rng, in, out, bound, 1.0 / std::sqrt(static_cast<double>(in)) / frequency);
}

void Adam::step(const std::vector<Var*>& params, const std::vector<Var>& grads) {
  if (params.size() != grads.size()) throw ShapeError("Adam: params/grads length mismatch");
  if (m_.size() != params.size()) {
    m_.clear();
    v_.clear();
    for (const auto* p : params) {
      m_.push_back(Matrix::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = grads[i].value();
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    if (lr_ == 0.0) continue;
    Matrix& w = params[i]->mutable_value();
    w.array() -= lr_ * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
  }
}

std::vector<Var*> pointers(const ParamList& params) {
  std::vector<Var*> out;
  out.reserve(params.size());
  for (const auto& [name, p] : params) out.push_back(p);
  return out;
}

std::vector<Var> values(const ParamList& params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const auto& [name, p] : params) out.push_back(*p);
  return out;
}

}  // namespace sfe::nn
