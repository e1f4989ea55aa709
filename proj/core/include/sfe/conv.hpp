#pragma once

// 2-D convolution on images stored one pixel per row: rows are ordered
// (batch, y, x) and columns are channels. Implemented as gather (im2col)
// followed by a matrix product, so it supports higher-order gradients.

#include "sfe/autodiff.hpp"
#include "sfe/nn.hpp"

namespace sfe::nn {

struct ImageShape {
  int batch = 1;
  int height = 1;
  int width = 1;
  [[nodiscard]] Eigen::Index pixels() const { return static_cast<Eigen::Index>(batch) * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// Output shape of a k x k convolution with zero padding k/2.
ImageShape conv_output_shape(const ImageShape& in, int kernel, int stride);
/// im2col table: one row per output pixel, k*k source rows (-1 for padding).
ad::IndexTablePtr conv_index(const ImageShape& in, int kernel, int stride);

struct Conv2d {
  Linear linear;  // (k*k*in_channels) -> out_channels
  int kernel = 3;
  int stride = 1;

  Conv2d() = default;
  Conv2d(Rng& rng, int in_channels, int out_channels, int kernel, int stride);

  [[nodiscard]] Var operator()(const Var& x, const ImageShape& in) const;
  [[nodiscard]] ImageShape output_shape(const ImageShape& in) const { return conv_output_shape(in, kernel, stride); }
  void collect(ParamList& out, const std::string& prefix) { linear.collect(out, prefix); }
};

}  // namespace sfe::nn
