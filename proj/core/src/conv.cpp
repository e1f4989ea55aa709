#include "sfe/conv.hpp"

#include <cmath>

#include "sfe/errors.hpp"

namespace sfe::nn {

ImageShape conv_output_shape(const ImageShape& in, int kernel, int stride) {
  if (kernel < 1 || kernel % 2 == 0) throw DomainError("convolution kernel must be odd");
  if (stride < 1) throw DomainError("convolution stride must be >= 1");
  return {in.batch, (in.height - 1) / stride + 1, (in.width - 1) / stride + 1};
}

ad::IndexTablePtr conv_index(const ImageShape& in, int kernel, int stride) {
  const ImageShape out = conv_output_shape(in, kernel, stride);
  const int half = kernel / 2;
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(out.pixels()) * kernel * kernel);
  for (int b = 0; b < out.batch; ++b) {
    for (int oy = 0; oy < out.height; ++oy) {
      for (int ox = 0; ox < out.width; ++ox) {
        for (int ky = 0; ky < kernel; ++ky) {
          for (int kx = 0; kx < kernel; ++kx) {
            const int y = oy * stride + ky - half;
            const int x = ox * stride + kx - half;
            if (y < 0 || y >= in.height || x < 0 || x >= in.width) {
              idx.push_back(-1);
            } else {
              idx.push_back((static_cast<std::int64_t>(b) * in.height + y) * in.width + x);
            }
          }
        }
      }
    }
  }
  return ad::make_index(std::move(idx), static_cast<Eigen::Index>(kernel) * kernel);
}

Conv2d::Conv2d(Rng& rng, int in_channels, int out_channels, int kernel_, int stride_)
    : kernel(kernel_), stride(stride_) {
  const int fan_in = kernel * kernel * in_channels;
  linear = Linear(rng, fan_in, out_channels, std::sqrt(6.0 / fan_in), 0.0);
}

Var Conv2d::operator()(const Var& x, const ImageShape& in) const {
  if (x.rows() != in.pixels()) throw ShapeError("convolution input rows do not match the image shape");
  if (x.cols() * kernel * kernel != linear.in()) throw ShapeError("convolution channel mismatch");
  return linear(ad::gather(x, conv_index(in, kernel, stride)));
}

}  // namespace sfe::nn
