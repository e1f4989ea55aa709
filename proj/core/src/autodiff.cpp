#include "sfe/autodiff.hpp"

#include <optional>
#include <unordered_map>
#include <unordered_set>

#include "sfe/errors.hpp"

namespace sfe::ad {

namespace {

thread_local bool g_grad_enabled = true;

std::string shape_str(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

void broadcast_shape(const Matrix& a, const Matrix& b, Eigen::Index& rows, Eigen::Index& cols) {
  auto pick = [](Eigen::Index x, Eigen::Index y, bool& ok) {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    ok = false;
    return x;
  };
  bool ok = true;
  rows = pick(a.rows(), b.rows(), ok);
  cols = pick(a.cols(), b.cols(), ok);
  if (!ok) throw ShapeError("incompatible broadcast " + shape_str(a) + " vs " + shape_str(b));
}

Matrix broadcast_value(const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  if (m.rows() == 1 && m.cols() == 1) return Matrix::Constant(rows, cols, m(0, 0));
  if (m.rows() == 1) return m.replicate(rows, 1);
  return m.replicate(1, cols);
}

template <typename Op>
Matrix binary_value(const Matrix& a, const Matrix& b, Op op) {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  broadcast_shape(a, b, rows, cols);
  if (a.rows() == b.rows() && a.cols() == b.cols()) return op(a.array(), b.array()).matrix();
  const Matrix ab = broadcast_value(a, rows, cols);
  const Matrix bb = broadcast_value(b, rows, cols);
  return op(ab.array(), bb.array()).matrix();
}

Var pad_cols(const Var& g, Eigen::Index start, Eigen::Index total);

}  // namespace

// ---- Var -------------------------------------------------------------------

Var::Var(Matrix value) : node_(std::make_shared<Node>()) { node_->value = std::move(value); }

Var Var::parameter(Matrix value) {
  Var v(std::move(value));
  v.node_->requires_grad = true;
  return v;
}

void Var::set_requires_grad(bool on) {
  if (!node_->parents.empty()) throw std::logic_error("set_requires_grad is only valid on leaves");
  node_->requires_grad = on;
}

Var Var::scalar(double v) { return Var(Matrix::Constant(1, 1, v)); }

Var Var::zeros(Eigen::Index rows, Eigen::Index cols) { return Var(Matrix::Zero(rows, cols)); }

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw ShapeError("item() on non-scalar " + shape_str(value()));
  return value()(0, 0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
EnableGradGuard::EnableGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { g_grad_enabled = previous_; }

Var make_result(Matrix value, const std::vector<Var>& parents, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool needed = false;
    for (const auto& p : parents) needed = needed || p.requires_grad();
    if (needed) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (const auto& p : parents) node->parents.push_back(p.node());
      node->backward = std::move(backward);
    }
  }
  return Var(std::move(node));
}

std::vector<Var> gradients(const Var& output, const std::vector<Var>& inputs, bool create_graph) {
  if (output.rows() != 1 || output.cols() != 1) {
    throw ShapeError("gradients() needs a scalar output, got " + shape_str(output.value()));
  }
  std::vector<Node*> order;
  if (output.requires_grad()) {
    std::unordered_set<Node*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(output.node().get(), 0);
    visited.insert(output.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* parent = node->parents[next++].get();
        if (parent && parent->requires_grad && visited.insert(parent).second) {
          stack.emplace_back(parent, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_set<Node*> wanted;
  for (const auto& in : inputs) wanted.insert(in.node().get());

  std::optional<NoGradGuard> no_grad;
  std::optional<EnableGradGuard> with_grad;
  if (create_graph) {
    with_grad.emplace();
  } else {
    no_grad.emplace();
  }

  std::unordered_map<Node*, Var> grads;
  std::unordered_map<Node*, Var> results;
  if (output.requires_grad()) grads[output.node().get()] = Var(Matrix::Ones(1, 1));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    Var g = found->second;
    grads.erase(found);
    if (wanted.count(node)) results[node] = g;
    if (!node->backward) continue;
    std::vector<Var> parent_grads = node->backward(g);
    for (std::size_t i = 0; i < node->parents.size() && i < parent_grads.size(); ++i) {
      Node* parent = node->parents[i].get();
      if (!parent || !parent->requires_grad || !parent_grads[i].defined()) continue;
      auto slot = grads.find(parent);
      if (slot == grads.end()) {
        grads.emplace(parent, parent_grads[i]);
      } else {
        slot->second = add(slot->second, parent_grads[i]);
      }
    }
  }

  std::vector<Var> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto found = results.find(in.node().get());
    if (found != results.end()) {
      out.push_back(found->second);
    } else {
      out.push_back(Var::zeros(in.rows(), in.cols()));
    }
  }
  return out;
}

IndexTablePtr make_index(std::vector<std::int64_t> indices, Eigen::Index width) {
  if (width < 1 || indices.size() % static_cast<std::size_t>(width) != 0) {
    throw ShapeError("index table size is not a multiple of its width");
  }
  auto t = std::make_shared<IndexTable>();
  t->indices = std::move(indices);
  t->width = width;
  return t;
}

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  Matrix v;
  if (b.rows() == 1 && a.cols() == b.cols() && a.rows() > 1) {
    v = a.value();
    v.rowwise() += b.value().row(0);
  } else {
    v = binary_value(a.value(), b.value(), [](const auto& x, const auto& y) { return x + y; });
  }
  const auto ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return make_result(std::move(v), {a, b}, [a, b, ar, ac, br, bc](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? reduce_to(g, ar, ac) : Var(),
                            b.requires_grad() ? reduce_to(g, br, bc) : Var()};
  });
}

Var sub(const Var& a, const Var& b) {
  Matrix v = binary_value(a.value(), b.value(), [](const auto& x, const auto& y) { return x - y; });
  const auto ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return make_result(std::move(v), {a, b}, [a, b, ar, ac, br, bc](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? reduce_to(g, ar, ac) : Var(),
                            b.requires_grad() ? reduce_to(neg(g), br, bc) : Var()};
  });
}

Var mul(const Var& a, const Var& b) {
  Matrix v = binary_value(a.value(), b.value(), [](const auto& x, const auto& y) { return x * y; });
  return make_result(std::move(v), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? reduce_to(mul(g, b), a.rows(), a.cols()) : Var(),
                            b.requires_grad() ? reduce_to(mul(g, a), b.rows(), b.cols()) : Var()};
  });
}

Var div(const Var& a, const Var& b) {
  Matrix v = binary_value(a.value(), b.value(), [](const auto& x, const auto& y) { return x / y; });
  return make_result(std::move(v), {a, b}, [a, b](const Var& g) {
    Var ga;
    Var gb;
    if (a.requires_grad()) ga = reduce_to(div(g, b), a.rows(), a.cols());
    if (b.requires_grad()) gb = reduce_to(neg(div(mul(g, a), mul(b, b))), b.rows(), b.cols());
    return std::vector<Var>{ga, gb};
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](const Var& g) { return std::vector<Var>{scale(g, s)}; });
}

Var add_scalar(const Var& a, double s) {
  Matrix v = a.value().array() + s;
  return make_result(std::move(v), {a}, [](const Var& g) { return std::vector<Var>{g}; });
}

Var sin(const Var& a) {
  Matrix v = a.value().array().sin();
  return make_result(std::move(v), {a}, [a](const Var& g) { return std::vector<Var>{mul(g, cos(a))}; });
}

Var cos(const Var& a) {
  Matrix v = a.value().array().cos();
  return make_result(std::move(v), {a},
                     [a](const Var& g) { return std::vector<Var>{neg(mul(g, sin(a)))}; });
}

Var exp(const Var& a) {
  Matrix v = a.value().array().exp();
  return make_result(std::move(v), {a}, [a](const Var& g) { return std::vector<Var>{mul(g, exp(a))}; });
}

Var log(const Var& a) {
  Matrix v = a.value().array().log();
  return make_result(std::move(v), {a}, [a](const Var& g) { return std::vector<Var>{div(g, a)}; });
}

Var sqrt(const Var& a) {
  Matrix v = a.value().array().sqrt();
  return make_result(std::move(v), {a},
                     [a](const Var& g) { return std::vector<Var>{div(scale(g, 0.5), sqrt(a))}; });
}

Var square(const Var& a) {
  Matrix v = a.value().array().square();
  return make_result(std::move(v), {a},
                     [a](const Var& g) { return std::vector<Var>{scale(mul(g, a), 2.0)}; });
}

Var sigmoid(const Var& a) {
  Matrix v = (1.0 + (-a.value().array()).exp()).inverse();
  return make_result(std::move(v), {a}, [a](const Var& g) {
    Var s = sigmoid(a);
    return std::vector<Var>{mul(g, sub(s, square(s)))};
  });
}

Var softplus(const Var& a) {
  const auto x = a.value().array();
  // log(1 + e) instead of log1p(e) keeps the expression vectorized; e <= 1 so
  // the absolute error stays at rounding level.
  Matrix v = x.max(0.0) + (1.0 + (-x.abs()).exp()).log();
  return make_result(std::move(v), {a},
                     [a](const Var& g) { return std::vector<Var>{mul(g, sigmoid(a))}; });
}

Var leaky_relu(const Var& a, double slope) {
  Matrix v = (a.value().array() > 0.0).select(a.value().array(), slope * a.value().array());
  return make_result(std::move(v), {a}, [a, slope](const Var& g) {
    Matrix mask = (a.value().array() > 0.0).select(Matrix::Ones(a.rows(), a.cols()).array(), slope);
    return std::vector<Var>{mul(g, Var(std::move(mask)))};
  });
}

// ---- linear algebra and shape ----------------------------------------------

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  const Eigen::Index inner_a = ta ? a.rows() : a.cols();
  const Eigen::Index inner_b = tb ? b.cols() : b.rows();
  if (inner_a != inner_b) {
    throw ShapeError("matmul inner dimension mismatch " + shape_str(a.value()) +
                     (ta ? "^T" : "") + " x " + shape_str(b.value()) + (tb ? "^T" : ""));
  }
  Matrix v;
  if (!ta && !tb) {
    v.noalias() = a.value() * b.value();
  } else if (ta && !tb) {
    v.noalias() = a.value().transpose() * b.value();
  } else if (!ta && tb) {
    v.noalias() = a.value() * b.value().transpose();
  } else {
    v.noalias() = a.value().transpose() * b.value().transpose();
  }
  return make_result(std::move(v), {a, b}, [a, b, ta, tb](const Var& g) {
    Var ga;
    Var gb;
    if (a.requires_grad()) ga = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
    if (b.requires_grad()) gb = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
    return std::vector<Var>{ga, gb};
  });
}

Var transpose(const Var& a) {
  Matrix v = a.value().transpose();
  return make_result(std::move(v), {a}, [](const Var& g) { return std::vector<Var>{transpose(g)}; });
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.rows() * a.cols()) {
    throw ShapeError("reshape " + shape_str(a.value()) + " to " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  Matrix v = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  const auto ar = a.rows(), ac = a.cols();
  return make_result(std::move(v), {a},
                     [ar, ac](const Var& g) { return std::vector<Var>{reshape(g, ar, ac)}; });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols row mismatch");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  Eigen::Index at = 0;
  std::vector<Eigen::Index> offsets;
  for (const auto& p : parts) {
    offsets.push_back(at);
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_result(std::move(v), parts, [parts, offsets](const Var& g) {
    std::vector<Var> out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      out.push_back(parts[i].requires_grad() ? slice_cols(g, offsets[i], parts[i].cols()) : Var());
    }
    return out;
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols out of range");
  Matrix v = a.value().middleCols(start, count);
  const auto total = a.cols();
  return make_result(std::move(v), {a}, [start, total](const Var& g) {
    return std::vector<Var>{pad_cols(g, start, total)};
  });
}

namespace {
Var pad_cols(const Var& g, Eigen::Index start, Eigen::Index total) {
  Matrix v = Matrix::Zero(g.rows(), total);
  v.middleCols(start, g.cols()) = g.value();
  const auto count = g.cols();
  return make_result(std::move(v), {g}, [start, count](const Var& gg) {
    return std::vector<Var>{slice_cols(gg, start, count)};
  });
}
}  // namespace

Var expand(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if ((a.rows() != rows && a.rows() != 1) || (a.cols() != cols && a.cols() != 1)) {
    throw ShapeError("cannot expand " + shape_str(a.value()));
  }
  Matrix v = broadcast_value(a.value(), rows, cols);
  const auto ar = a.rows(), ac = a.cols();
  return make_result(std::move(v), {a},
                     [ar, ac](const Var& g) { return std::vector<Var>{reduce_to(g, ar, ac)}; });
}

Var reduce_to(const Var& g, Eigen::Index rows, Eigen::Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  Var r = g;
  if (rows == 1 && r.rows() != 1) r = sum_rows(r);
  if (cols == 1 && r.cols() != 1) r = sum_cols(r);
  if (r.rows() != rows || r.cols() != cols) throw ShapeError("reduce_to shape mismatch");
  return r;
}

// ---- reductions ------------------------------------------------------------

Var sum(const Var& a) {
  const auto ar = a.rows(), ac = a.cols();
  return make_result(Matrix::Constant(1, 1, a.value().sum()), {a},
                     [ar, ac](const Var& g) { return std::vector<Var>{expand(g, ar, ac)}; });
}

Var mean(const Var& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.rows() * a.cols()));
}

Var sum_rows(const Var& a) {
  Matrix v = a.value().colwise().sum();
  const auto ar = a.rows(), ac = a.cols();
  return make_result(std::move(v), {a},
                     [ar, ac](const Var& g) { return std::vector<Var>{expand(g, ar, ac)}; });
}

Var sum_cols(const Var& a) {
  Matrix v = a.value().rowwise().sum();
  const auto ar = a.rows(), ac = a.cols();
  return make_result(std::move(v), {a},
                     [ar, ac](const Var& g) { return std::vector<Var>{expand(g, ar, ac)}; });
}

Var softmax_rows(const Var& a) {
  Matrix v = a.value();
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double m = v.row(r).maxCoeff();
    v.row(r) = (v.row(r).array() - m).exp();
    v.row(r) /= v.row(r).sum();
  }
  return make_result(std::move(v), {a}, [a](const Var& g) {
    Var s = softmax_rows(a);
    return std::vector<Var>{mul(s, sub(g, sum_cols(mul(g, s))))};
  });
}

// ---- gather / scatter ------------------------------------------------------

Var gather(const Var& a, const IndexTablePtr& idx) {
  const Eigen::Index rows = idx->rows();
  const Eigen::Index width = idx->width;
  const Eigen::Index c = a.cols();
  Matrix v = Matrix::Zero(rows, width * c);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index t = 0; t < width; ++t) {
      const auto src = idx->indices[static_cast<std::size_t>(r * width + t)];
      if (src < 0) continue;
      if (src >= a.rows()) throw IndexError("gather index out of range");
      v.block(r, t * c, 1, c) = a.value().row(src);
    }
  }
  const auto ar = a.rows();
  return make_result(std::move(v), {a},
                     [idx, ar](const Var& g) { return std::vector<Var>{scatter_add(g, idx, ar)}; });
}

Var scatter_add(const Var& a, const IndexTablePtr& idx, Eigen::Index out_rows) {
  const Eigen::Index rows = idx->rows();
  const Eigen::Index width = idx->width;
  if (a.rows() != rows || a.cols() % width != 0) throw ShapeError("scatter_add shape mismatch");
  const Eigen::Index c = a.cols() / width;
  Matrix v = Matrix::Zero(out_rows, c);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index t = 0; t < width; ++t) {
      const auto dst = idx->indices[static_cast<std::size_t>(r * width + t)];
      if (dst < 0) continue;
      if (dst >= out_rows) throw IndexError("scatter index out of range");
      v.row(dst) += a.value().block(r, t * c, 1, c);
    }
  }
  return make_result(std::move(v), {a}, [idx](const Var& g) { return std::vector<Var>{gather(g, idx)}; });
}

Var mse(const Var& a, const Var& b) { return mean(square(sub(a, b))); }

}  // namespace sfe::ad
