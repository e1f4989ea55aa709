#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "sfe/autodiff.hpp"
#include "sfe/sampling.hpp"

namespace sfe::metrics {

/// count x dim, one embedding per row.
using Embeddings = ad::Matrix;

struct FidResult {
  double value = 0.0;
  /// Diagonal jitter added to both covariances; 0 when none was needed.
  double jitter = 0.0;
};

/// Frechet distance between Gaussian fits of two embedding sets. Throws
/// ShapeError on a dimension mismatch or fewer than two rows.
FidResult fid(const Embeddings& a, const Embeddings& b);

/// Unbiased MMD^2 with kernel (x.y / dim + 1)^3 over all rows of a and b.
double mmd2_unbiased(const Embeddings& a, const Embeddings& b);

/// Mean unbiased MMD^2 over `subsets` random subsets of `subset_size` rows
/// drawn without replacement from each set.
double kid(const Embeddings& a, const Embeddings& b, int subset_size, int subsets, Rng& rng);

/// Box-filter downsample of an H*W*3 image to side x side, flattened.
std::vector<double> embed_downsample(std::span<const double> rgb, int width, int height, int side = 8);
Embeddings embed_images(const std::vector<std::vector<double>>& images, int width, int height, int side = 8);

/// Raw float32 little-endian rows plus "<path>.json" with {"count", "dim", "dtype"}.
void save_embeddings(const Embeddings& e, const std::filesystem::path& path);
Embeddings load_embeddings(const std::filesystem::path& path);

}  // namespace sfe::metrics
