#include "sfe/metrics.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include <nlohmann/json.hpp>

#include "sfe/errors.hpp"
#include "sfe/image_io.hpp"

namespace sfe::metrics {

namespace {

using Dense = Eigen::MatrixXd;

void check_pair(const Embeddings& a, const Embeddings& b, Eigen::Index min_rows) {
  if (a.cols() != b.cols()) {
    throw ShapeError("embedding dimensions differ: " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
  }
  if (a.rows() < min_rows || b.rows() < min_rows) {
    throw ShapeError("need at least " + std::to_string(min_rows) + " embeddings per set");
  }
  if (!a.allFinite() || !b.allFinite()) throw DomainError("embeddings must be finite");
}

Dense covariance(const Embeddings& x, const Eigen::RowVectorXd& mean) {
  const Dense centered = x.rowwise() - mean;
  return (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
}

Dense symmetric_sqrt(const Dense& m) {
  Eigen::SelfAdjointEigenSolver<Dense> es(m);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double kernel_sum(const Dense& k, bool skip_diagonal) {
  double s = k.sum();
  if (skip_diagonal) s -= k.trace();
  return s;
}

}  // namespace

FidResult fid(const Embeddings& a, const Embeddings& b) {
  check_pair(a, b, 2);
  const Eigen::RowVectorXd mu_a = a.colwise().mean();
  const Eigen::RowVectorXd mu_b = b.colwise().mean();
  Dense sa = covariance(a, mu_a);
  Dense sb = covariance(b, mu_b);
  FidResult out;
  const auto min_eig = [](const Dense& m) { return Eigen::SelfAdjointEigenSolver<Dense>(m, Eigen::EigenvaluesOnly).eigenvalues().minCoeff(); };
  if (min_eig(sa) <= 1e-12 || min_eig(sb) <= 1e-12) {
    out.jitter = 1e-6;
    sa.diagonal().array() += out.jitter;
    sb.diagonal().array() += out.jitter;
  }
  // tr((Sa Sb)^1/2) = tr((Sa^1/2 Sb Sa^1/2)^1/2), which is symmetric PSD.
  const Dense ra = symmetric_sqrt(sa);
  Dense inner = ra * sb * ra;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Dense> es(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  out.value = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  return out;
}

double mmd2_unbiased(const Embeddings& a, const Embeddings& b) {
  check_pair(a, b, 2);
  const double dim = static_cast<double>(a.cols());
  auto kernel = [dim](const Embeddings& x, const Embeddings& y) {
    Dense k = (x * y.transpose()).array() / dim + 1.0;
    return Dense(k.array().cube());
  };
  const double m = static_cast<double>(a.rows());
  const double n = static_cast<double>(b.rows());
  const double xx = kernel_sum(kernel(a, a), true) / (m * (m - 1.0));
  const double yy = kernel_sum(kernel(b, b), true) / (n * (n - 1.0));
  const double xy = kernel_sum(kernel(a, b), false) / (m * n);
  return xx + yy - 2.0 * xy;
}

double kid(const Embeddings& a, const Embeddings& b, int subset_size, int subsets, Rng& rng) {
  if (subset_size < 2) throw DomainError("KID subset size must be >= 2");
  if (subsets < 1) throw DomainError("KID needs at least one subset");
  check_pair(a, b, subset_size);
  auto draw = [&](const Embeddings& x) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.rows()));
    std::iota(idx.begin(), idx.end(), 0);
    // Partial Fisher-Yates.
    for (int i = 0; i < subset_size; ++i) {
      const auto j = i + static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(x.rows() - i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    Embeddings s(subset_size, x.cols());
    for (int i = 0; i < subset_size; ++i) s.row(i) = x.row(idx[static_cast<std::size_t>(i)]);
    return s;
  };
  double total = 0.0;
  for (int s = 0; s < subsets; ++s) {
    const Embeddings sa = draw(a);
    const Embeddings sb = draw(b);
    total += mmd2_unbiased(sa, sb);
  }
  return total / subsets;
}

std::vector<double> embed_downsample(std::span<const double> rgb, int width, int height, int side) {
  if (width < 1 || height < 1 || side < 1) throw DomainError("image and embedding sizes must be positive");
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3) throw ShapeError("image buffer size mismatch");
  std::vector<double> out(static_cast<std::size_t>(side) * side * 3, 0.0);
  for (int oy = 0; oy < side; ++oy) {
    const int y0 = oy * height / side;
    const int y1 = std::max(y0 + 1, (oy + 1) * height / side);
    for (int ox = 0; ox < side; ++ox) {
      const int x0 = ox * width / side;
      const int x1 = std::max(x0 + 1, (ox + 1) * width / side);
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int y = y0; y < y1; ++y) {
          for (int x = x0; x < x1; ++x) s += rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
        }
        out[(static_cast<std::size_t>(oy) * side + ox) * 3 + c] = s / ((y1 - y0) * (x1 - x0));
      }
    }
  }
  return out;
}

Embeddings embed_images(const std::vector<std::vector<double>>& images, int width, int height, int side) {
  Embeddings e(static_cast<Eigen::Index>(images.size()), side * side * 3);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto v = embed_downsample(images[i], width, height, side);
    for (std::size_t j = 0; j < v.size(); ++j) e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[j];
  }
  return e;
}

void save_embeddings(const Embeddings& e, const std::filesystem::path& path) {
  io::Bytes bytes(static_cast<std::size_t>(e.size()) * 4);
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    const auto f = static_cast<float>(e.data()[i]);
    std::memcpy(bytes.data() + i * 4, &f, 4);
  }
  io::write_file(path, bytes);
  const nlohmann::json meta = {{"count", e.rows()}, {"dim", e.cols()}, {"dtype", "float32"}};
  io::write_text(path.string() + ".json", meta.dump() + "\n");
}

Embeddings load_embeddings(const std::filesystem::path& path) {
  const auto meta_bytes = io::read_file(path.string() + ".json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_bytes.begin(), meta_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ".json: " + e.what());
  }
  const auto count = meta.value("count", std::int64_t{-1});
  const auto dim = meta.value("dim", std::int64_t{-1});
  if (count < 0 || dim < 1 || meta.value("dtype", std::string("float32")) != "float32") {
    throw IoError(path.string() + ".json: expected {count, dim, dtype: float32}");
  }
  const auto bytes = io::read_file(path);
  if (bytes.size() != static_cast<std::size_t>(count * dim * 4)) {
    throw IoError(path.string() + ": size does not match the sidecar shape");
  }
  Embeddings e(count, dim);
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    float f = 0.0F;
    std::memcpy(&f, bytes.data() + i * 4, 4);
    e.data()[i] = f;
  }
  return e;
}

}  // namespace sfe::metrics
