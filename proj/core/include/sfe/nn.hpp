#pragma once

// Small neural-network building blocks on top of the autodiff engine:
// affine layers, FiLM-conditioned sine layers, mapping networks and Adam.

#include <string>
#include <utility>
#include <vector>

#include "sfe/autodiff.hpp"
#include "sfe/sampling.hpp"

namespace sfe::nn {

using ad::Matrix;
using ad::Var;

/// Named references to trainable leaves; rebuilt on demand, never stored.
using ParamList = std::vector<std::pair<std::string, Var*>>;

Matrix uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double bound);

struct Linear {
  Var weight;  // (in, out)
  Var bias;    // (1, out)

  Linear() = default;
  Linear(Rng& rng, int in, int out, double weight_bound, double bias_bound);

  [[nodiscard]] int in() const { return static_cast<int>(weight.rows()); }
  [[nodiscard]] int out() const { return static_cast<int>(weight.cols()); }
  [[nodiscard]] Var operator()(const Var& x) const { return ad::add(ad::matmul(x, weight), bias); }
  void collect(ParamList& out, const std::string& prefix);
};

/// Per-row frequencies and phase shifts for a stack of FiLM sine layers.
/// Columns are laid out [gamma_0 | beta_0 | gamma_1 | beta_1 | ...]. When
/// `rows` is set, each output row r reads values row rows[r]; slicing happens
/// before the row selection so gradients stay at the size of `values`.
struct FilmParams {
  Var values;
  int layers = 0;
  int width = 0;
  ad::IndexTablePtr rows;

  [[nodiscard]] Var gamma(int layer) const { return select(ad::slice_cols(values, 2L * layer * width, width)); }
  [[nodiscard]] Var beta(int layer) const {
    return select(ad::slice_cols(values, (2L * layer + 1) * width, width));
  }
  [[nodiscard]] Eigen::Index batch() const { return rows ? rows->rows() : values.rows(); }
  /// Rows selected per point; -1 entries are not allowed.
  [[nodiscard]] FilmParams gather_rows(const ad::IndexTablePtr& selection) const;
  [[nodiscard]] FilmParams detached() const { return {values.detach(), layers, width, rows}; }

 private:
  [[nodiscard]] Var select(const Var& v) const { return rows ? ad::gather(v, rows) : v; }
};

/// z -> FiLM parameters: `hidden_layers` affine+leaky-ReLU(0.2) layers and a
/// final affine layer. Frequencies are base + scale * raw.
struct MappingNetwork {
  std::vector<Linear> hidden;
  Linear output;
  int film_layers = 0;
  int film_width = 0;
  double base_frequency = 30.0;
  double frequency_scale = 15.0;

  MappingNetwork() = default;
  MappingNetwork(Rng& rng, int latent_dim, int hidden_width, int hidden_layers, int film_layers,
                 int film_width, double base_frequency, double frequency_scale);

  /// z has one latent per row.
  [[nodiscard]] FilmParams operator()(const Var& z) const;
  [[nodiscard]] int latent_dim() const { return hidden.empty() ? output.in() : hidden.front().in(); }
  void collect(ParamList& out, const std::string& prefix);
};

/// sin(gamma_l * (x W + b) + beta_l) with gamma_l, beta_l read from the FiLM
/// row assigned to each row of x. First-order differentiable only.
Var film_sine(const Linear& layer, const Var& x, const FilmParams& film, int l);

/// SIREN-style initialisation for a hidden sine layer.
Linear siren_layer(Rng& rng, int in, int out, double frequency, bool first);

class Adam {
 public:
  Adam() = default;
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Applies one update. Slots are created lazily and matched by position.
  void step(const std::vector<Var*>& params, const std::vector<Var>& grads);

  [[nodiscard]] double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  [[nodiscard]] std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }
  [[nodiscard]] std::vector<Matrix>& first_moments() { return m_; }
  [[nodiscard]] std::vector<Matrix>& second_moments() { return v_; }
  [[nodiscard]] const std::vector<Matrix>& first_moments() const { return m_; }
  [[nodiscard]] const std::vector<Matrix>& second_moments() const { return v_; }

 private:
  double lr_ = 1e-3;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::int64_t steps_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

std::vector<Var*> pointers(const ParamList& params);
std::vector<Var> values(const ParamList& params);

}  // namespace sfe::nn
