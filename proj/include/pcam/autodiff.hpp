#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 tensors.
//
// A Tensor is a shared handle to a graph node. Ops build new nodes; a node
// records a backward closure only when one of its inputs requires a gradient,
// so values computed from constants alone carry no graph. Every op checks its
// output for NaN/Inf and throws NumericError.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pcam/error.hpp"
#include "pcam/geometry.hpp"

namespace pcam::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out + "]";
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values) { return make_leaf(std::move(shape), std::move(values), false); }

  static Tensor variable(Shape shape, std::vector<double> values) { return make_leaf(std::move(shape), std::move(values), true); }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v) { return constant({}, {v}); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> values() const { return node_->value; }
  /// Raw storage of a leaf; used by optimizers and checkpoint loading.
  std::vector<double>& mutable_values() { return node_->value; }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * dim(1) + c]; }

  /// Accumulated gradient (all zeros if nothing has flowed here yet).
  std::vector<double> grad() const {
    return node_->grad.empty() ? std::vector<double>(numel(), 0.0) : node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, cut from the graph.
  Tensor detach() const { return constant(shape(), node_->value); }

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  static Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    if (numel_of(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " given " + std::to_string(values.size()) + " values");
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  std::shared_ptr<Node> node_;
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}  // namespace detail

/// While alive, ops on this thread record no graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value produced");
  }
}

/// Builds the result node. `backward` receives the result node; its grad is
/// populated when called. Inputs that do not require grad are skipped by the
/// closures via `wants_grad`.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  check_finite(value, op);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (no_grad_depth == 0) {
    for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  }
  if (n->requires_grad) {
    for (auto& in : inputs) n->parents.push_back(in.node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline bool wants_grad(const Node& n, std::size_t i) { return n.parents[i]->requires_grad; }

inline std::vector<double>& pgrad(Node& n, std::size_t i) { return n.parents[i]->grad_buffer(); }

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

inline bool is_scalar_like(const Tensor& a) { return a.numel() == 1; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const auto n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(n * m);
  detail::Map(out.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m)).noalias() =
      detail::MapC(a.values().data(), n, k) * detail::MapC(b.values().data(), k, m);
  return detail::make_result("matmul", {n, m}, std::move(out), {a, b}, [n, k, m](Node& self) {
    const detail::MapC g(self.grad.data(), n, m);
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (detail::wants_grad(self, 0)) {
      detail::Map(detail::pgrad(self, 0).data(), n, k).noalias() += g * detail::MapC(bv.data(), k, m).transpose();
    }
    if (detail::wants_grad(self, 1)) {
      detail::Map(detail::pgrad(self, 1).data(), k, m).noalias() += detail::MapC(av.data(), n, k).transpose() * g;
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const auto n = a.dim(0), m = a.dim(1);
  std::vector<double> out(n * m);
  detail::Map(out.data(), m, n) = detail::MapC(a.values().data(), n, m).transpose();
  return detail::make_result("transpose", {m, n}, std::move(out), {a}, [n, m](Node& self) {
    detail::Map(detail::pgrad(self, 0).data(), n, m) += detail::MapC(self.grad.data(), m, n).transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise. Binary ops accept equal shapes, or one operand with a single
// element which is broadcast.

enum class Elementwise { add, sub, mul };

namespace detail {

inline Tensor binary(const Tensor& a, const Tensor& b, Elementwise kind) {
  const char* name = kind == Elementwise::add ? "add" : kind == Elementwise::sub ? "sub" : "mul";
  const bool sa = is_scalar_like(a) && !is_scalar_like(b);
  const bool sb = is_scalar_like(b) && !is_scalar_like(a);
  if (!sa && !sb && a.shape() != b.shape()) {
    if (!(is_scalar_like(a) && is_scalar_like(b))) {
      throw ShapeError(std::string(name) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
  }
  const Shape shape = sa ? b.shape() : a.shape();
  const auto n = numel_of(shape);
  const auto av = a.values();
  const auto bv = b.values();
  auto ai = [&](std::size_t i) { return sa ? av[0] : av[i]; };
  auto bi = [&](std::size_t i) { return sb ? bv[0] : bv[i]; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case Elementwise::add: out[i] = ai(i) + bi(i); break;
      case Elementwise::sub: out[i] = ai(i) - bi(i); break;
      case Elementwise::mul: out[i] = ai(i) * bi(i); break;
    }
  }
  return make_result(name, shape, std::move(out), {a, b}, [kind, sa, sb, n](Node& self) {
    const auto& g = self.grad;
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (wants_grad(self, 0)) {
      auto& ga = pgrad(self, 0);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = kind == Elementwise::mul ? g[i] * (sb ? bv[0] : bv[i]) : g[i];
        ga[sa ? 0 : i] += d;
      }
    }
    if (wants_grad(self, 1)) {
      auto& gb = pgrad(self, 1);
      for (std::size_t i = 0; i < n; ++i) {
        double d = g[i];
        if (kind == Elementwise::sub) d = -d;
        if (kind == Elementwise::mul) d *= sa ? av[0] : av[i];
        gb[sb ? 0 : i] += d;
      }
    }
  });
}

/// Unary op given f and f' expressed through (x, y = f(x)).
template <class F, class DF>
Tensor unary(const char* name, const Tensor& a, F f, DF df) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_result(name, a.shape(), std::move(out), {a}, [df](Node& self) {
    const auto& x = self.parents[0]->value;
    auto& ga = pgrad(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += self.grad[i] * df(x[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, Elementwise::add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, Elementwise::sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, Elementwise::mul); }

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

/// c * a + shift
inline Tensor affine(const Tensor& a, double c, double shift) {
  return detail::unary(
      "affine", a, [c, shift](double x) { return c * x + shift; }, [c](double, double) { return c; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      "sigmoid", a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline constexpr double kLogFloor = 1e-30;

/// log(max(x, 1e-30)); zero gradient where the floor is active.
inline Tensor log(const Tensor& a) {
  return detail::unary(
      "log", a, [](double x) { return std::log(std::max(x, kLogFloor)); },
      [](double x, double) { return x > kLogFloor ? 1.0 / x : 0.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return detail::make_result("sum", {}, {s}, {a}, [](Node& self) {
    auto& ga = detail::pgrad(self, 0);
    for (double& g : ga) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

/// Same values viewed with a new shape of equal element count.
inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {a}, [](Node& self) {
    auto& ga = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

/// out[i] = a[entries[i].first, entries[i].second]
inline Tensor pick(const Tensor& a, std::span<const std::pair<std::size_t, std::size_t>> entries) {
  detail::require_matrix(a, "pick");
  const auto cols = a.dim(1);
  std::vector<std::size_t> flat;
  flat.reserve(entries.size());
  for (auto [r, c] : entries) {
    if (r >= a.dim(0) || c >= cols) throw ShapeError("pick: entry out of range");
    flat.push_back(r * cols + c);
  }
  std::vector<double> out;
  out.reserve(flat.size());
  for (auto f : flat) out.push_back(a.values()[f]);
  return detail::make_result("pick", {flat.size()}, std::move(out), {a}, [flat](Node& self) {
    auto& ga = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < flat.size(); ++i) ga[flat[i]] += self.grad[i];
  });
}

/// Per-row Euclidean norm, n x d -> n. Subgradient 0 at a zero row.
inline Tensor row_norms(const Tensor& a) {
  detail::require_matrix(a, "row_norms");
  const auto n = a.dim(0), d = a.dim(1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += a.values()[i * d + j] * a.values()[i * d + j];
    out[i] = std::sqrt(s);
  }
  return detail::make_result("row_norms", {n}, std::move(out), {a}, [n, d](Node& self) {
    const auto& x = self.parents[0]->value;
    auto& ga = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (self.value[i] == 0.0) continue;
      const double f = self.grad[i] / self.value[i];
      for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += f * x[i * d + j];
    }
  });
}

/// Adds a length-d bias along the last axis of `a`.
inline Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
  const auto d = bias.numel();
  if (a.rank() == 0 || a.shape().back() != d) {
    throw ShapeError("add_row_bias: " + shape_str(a.shape()) + " + bias " + shape_str(bias.shape()));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.values()[i % d];
  return detail::make_result("add_row_bias", a.shape(), std::move(out), {a, bias}, [d](Node& self) {
    if (detail::wants_grad(self, 0)) {
      auto& ga = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& gb = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % d] += self.grad[i];
    }
  });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "concat_cols");
  detail::require_matrix(b, "concat_cols");
  const auto n = a.dim(0), c1 = a.dim(1), c2 = b.dim(1);
  if (b.dim(0) != n) throw ShapeError("concat_cols: row counts differ");
  const auto c = c1 + c2;
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(i * c1), c1, out.begin() + static_cast<std::ptrdiff_t>(i * c));
    std::copy_n(b.values().begin() + static_cast<std::ptrdiff_t>(i * c2), c2, out.begin() + static_cast<std::ptrdiff_t>(i * c + c1));
  }
  return detail::make_result("concat_cols", {n, c}, std::move(out), {a, b}, [n, c1, c2, c](Node& self) {
    if (detail::wants_grad(self, 0)) {
      auto& ga = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c1; ++j) ga[i * c1 + j] += self.grad[i * c + j];
    }
    if (detail::wants_grad(self, 1)) {
      auto& gb = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c2; ++j) gb[i * c2 + j] += self.grad[i * c + c1 + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax family. The temperature divides the logits; the row (or column)
// maximum is subtracted before exponentiation.

namespace detail {

/// Softmax (or log-softmax) of a[n x m]/s along rows when `along_rows`,
/// along columns otherwise.
inline Tensor softmax_impl(const Tensor& a, double s, bool along_rows, bool log_space) {
  require_matrix(a, "softmax");
  if (!(s > 0.0)) throw ParameterError("softmax: temperature must be positive");
  const auto n = a.dim(0), m = a.dim(1);
  // Outer loop runs over groups (rows or columns), inner over members.
  const std::size_t groups = along_rows ? n : m;
  const std::size_t members = along_rows ? m : n;
  auto idx = [=](std::size_t g, std::size_t k) { return along_rows ? g * m + k : k * m + g; };
  const auto av = a.values();
  std::vector<double> out(n * m);
  for (std::size_t g = 0; g < groups; ++g) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < members; ++k) mx = std::max(mx, av[idx(g, k)] / s);
    double z = 0.0;
    for (std::size_t k = 0; k < members; ++k) z += std::exp(av[idx(g, k)] / s - mx);
    const double lz = std::log(z);
    for (std::size_t k = 0; k < members; ++k) {
      const double shifted = av[idx(g, k)] / s - mx;
      out[idx(g, k)] = log_space ? shifted - lz : std::exp(shifted) / z;
    }
  }
  const char* name = log_space ? "log_softmax" : "softmax";
  return make_result(name, {n, m}, std::move(out), {a}, [=](Node& self) {
    auto& ga = pgrad(self, 0);
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t gr = 0; gr < groups; ++gr) {
      if (log_space) {
        // d/dx_k = (g_k - softmax_k * sum_j g_j) / s
        double gs = 0.0;
        for (std::size_t k = 0; k < members; ++k) gs += g[idx(gr, k)];
        for (std::size_t k = 0; k < members; ++k) {
          const auto i = idx(gr, k);
          ga[i] += (g[i] - std::exp(y[i]) * gs) / s;
        }
      } else {
        // d/dx_k = y_k (g_k - sum_j g_j y_j) / s
        double dot = 0.0;
        for (std::size_t k = 0; k < members; ++k) dot += g[idx(gr, k)] * y[idx(gr, k)];
        for (std::size_t k = 0; k < members; ++k) {
          const auto i = idx(gr, k);
          ga[i] += y[i] * (g[i] - dot) / s;
        }
      }
    }
  });
}

}  // namespace detail

inline Tensor softmax_rows(const Tensor& a, double s = 1.0) { return detail::softmax_impl(a, s, true, false); }
inline Tensor softmax_cols(const Tensor& a, double s = 1.0) { return detail::softmax_impl(a, s, false, false); }
inline Tensor log_softmax_rows(const Tensor& a, double s = 1.0) { return detail::softmax_impl(a, s, true, true); }
inline Tensor log_softmax_cols(const Tensor& a, double s = 1.0) { return detail::softmax_impl(a, s, false, true); }

/// Divides each row by max(|row|_2, eps).
inline Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12) {
  detail::require_matrix(a, "l2_normalize_rows");
  const auto n = a.dim(0), d = a.dim(1);
  std::vector<double> denom(n);
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += a.values()[i * d + j] * a.values()[i * d + j];
    denom[i] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a.values()[i * d + j] / denom[i];
  }
  return detail::make_result("l2_normalize_rows", {n, d}, std::move(out), {a}, [n, d, eps, denom](Node& self) {
    auto& ga = detail::pgrad(self, 0);
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = denom[i];
      if (r > eps) {
        // y = x/|x|: dx = (g - y (g.y)) / |x|
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += g[i * d + j] * y[i * d + j];
        for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += (g[i * d + j] - y[i * d + j] * dot) / r;
      } else {
        for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += g[i * d + j] / eps;
      }
    }
  });
}

/// a_ij / sum_j a_ij. Throws NumericError when a row sums below 1e-30.
inline Tensor normalize_row_sums(const Tensor& a) {
  detail::require_matrix(a, "normalize_row_sums");
  const auto n = a.dim(0), m = a.dim(1);
  std::vector<double> sums(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) sums[i] += a.values()[i * m + j];
    if (!(sums[i] >= kLogFloor)) {
      throw NumericError("row " + std::to_string(i) + " has vanishing mass");
    }
  }
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = a.values()[i * m + j] / sums[i];
  return detail::make_result("normalize_row_sums", {n, m}, std::move(out), {a}, [n, m, sums](Node& self) {
    auto& ga = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += self.grad[i * m + j] * self.value[i * m + j];
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += (self.grad[i * m + j] - dot) / sums[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Neighborhood ops

/// out[i, j, :] = a[idx(i, j), :]; backward scatter-adds.
inline Tensor gather_rows(const Tensor& a, const IndexMatrix& idx) {
  detail::require_matrix(a, "gather_rows");
  const auto n = a.dim(0), d = a.dim(1);
  for (auto v : idx.data) {
    if (v >= n) throw ShapeError("gather_rows: index " + std::to_string(v) + " out of range " + std::to_string(n));
  }
  const auto m = idx.rows, k = idx.cols;
  std::vector<double> out(m * k * d);
  for (std::size_t r = 0; r < m * k; ++r) {
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(idx.data[r] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  return detail::make_result("gather_rows", {m, k, d}, std::move(out), {a}, [idx, d](Node& self) {
    auto& ga = detail::pgrad(self, 0);
    for (std::size_t r = 0; r < idx.data.size(); ++r) {
      const auto base = static_cast<std::size_t>(idx.data[r]) * d;
      for (std::size_t c = 0; c < d; ++c) ga[base + c] += self.grad[r * d + c];
    }
  });
}

enum class Reduce { max, mean };

/// m x k x d -> m x d over the k axis. Max routes the gradient to the first
/// index attaining the maximum.
inline Tensor reduce_neighborhood(const Tensor& a, Reduce mode) {
  if (a.rank() != 3) throw ShapeError("reduce_neighborhood: expected rank 3, got " + shape_str(a.shape()));
  const auto m = a.dim(0), k = a.dim(1), d = a.dim(2);
  if (k == 0) throw ShapeError("reduce_neighborhood: empty neighborhood");
  const auto av = a.values();
  std::vector<double> out(m * d);
  std::vector<std::uint32_t> arg;
  if (mode == Reduce::max) arg.resize(m * d);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      if (mode == Reduce::mean) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += av[(i * k + j) * d + c];
        out[i * d + c] = s / static_cast<double>(k);
      } else {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j) {
          if (av[(i * k + j) * d + c] > av[(i * k + best) * d + c]) best = j;
        }
        out[i * d + c] = av[(i * k + best) * d + c];
        arg[i * d + c] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return detail::make_result("reduce_neighborhood", {m, d}, std::move(out), {a}, [m, k, d, mode, arg](Node& self) {
    auto& ga = detail::pgrad(self, 0);
    const double inv = 1.0 / static_cast<double>(k);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t c = 0; c < d; ++c) {
        const double g = self.grad[i * d + c];
        if (mode == Reduce::mean) {
          for (std::size_t j = 0; j < k; ++j) ga[(i * k + j) * d + c] += g * inv;
        } else {
          ga[(i * k + arg[i * d + c]) * d + c] += g;
        }
      }
    }
  });
}

/// Per-channel normalization over the n points of one cloud, followed by
/// the learned affine correction gamma_c * x_hat + beta_c.
inline Tensor instance_norm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  detail::require_matrix(a, "instance_norm_rows");
  const auto n = a.dim(0), d = a.dim(1);
  if (n == 0) throw ShapeError("instance_norm_rows: no points");
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("instance_norm_rows: affine size mismatch");
  const auto av = a.values();
  std::vector<double> mu(d, 0.0), inv_std(d, 0.0), xhat(n * d), out(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) mu[c] += av[i * d + c];
  for (auto& v : mu) v /= static_cast<double>(n);
  for (std::size_t c = 0; c < d; ++c) {
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (av[i * d + c] - mu[c]) * (av[i * d + c] - mu[c]);
    inv_std[c] = 1.0 / std::sqrt(var / static_cast<double>(n) + eps);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      xhat[i * d + c] = (av[i * d + c] - mu[c]) * inv_std[c];
      out[i * d + c] = xhat[i * d + c] * gamma.values()[c] + beta.values()[c];
    }
  }
  return detail::make_result(
      "instance_norm_rows", {n, d}, std::move(out), {a, gamma, beta}, [n, d, inv_std, xhat](Node& self) {
        const auto& g = self.grad;
        const auto& gam = self.parents[1]->value;
        if (detail::wants_grad(self, 1)) {
          auto& gg = detail::pgrad(self, 1);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < d; ++c) gg[c] += g[i * d + c] * xhat[i * d + c];
        }
        if (detail::wants_grad(self, 2)) {
          auto& gb = detail::pgrad(self, 2);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < d; ++c) gb[c] += g[i * d + c];
        }
        if (detail::wants_grad(self, 0)) {
          auto& ga = detail::pgrad(self, 0);
          const double nn = static_cast<double>(n);
          for (std::size_t c = 0; c < d; ++c) {
            double sg = 0.0, sgx = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
              const double gh = g[i * d + c] * gam[c];
              sg += gh;
              sgx += gh * xhat[i * d + c];
            }
            for (std::size_t i = 0; i < n; ++i) {
              const double gh = g[i * d + c] * gam[c];
              ga[i * d + c] += inv_std[c] / nn * (nn * gh - sg - xhat[i * d + c] * sgx);
            }
          }
        }
      });
}

/// Fused neighborhood aggregation:
///   out[i, :] = mean_j relu(u[idx(i, j), :] - center[i, :])
/// Equal to reduce_neighborhood(relu(gather_rows(u, idx) - gather_rows(center, self)), mean)
/// without materializing the m x k x d intermediates.
inline Tensor neighbor_relu_mean(const Tensor& u, const Tensor& center, const IndexMatrix& idx) {
  detail::require_matrix(u, "neighbor_relu_mean");
  detail::require_matrix(center, "neighbor_relu_mean");
  const auto n = u.dim(0), d = u.dim(1), m = idx.rows, k = idx.cols;
  if (center.dim(0) != m || center.dim(1) != d) throw ShapeError("neighbor_relu_mean: center shape mismatch");
  if (k == 0) throw ShapeError("neighbor_relu_mean: empty neighborhood");
  for (auto v : idx.data) {
    if (v >= n) throw ShapeError("neighbor_relu_mean: index out of range");
  }
  const auto uv = u.values();
  const auto cv = center.values();
  const double inv = 1.0 / static_cast<double>(k);
  std::vector<double> out(m * d, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * d;
    const double* c = cv.data() + i * d;
    for (std::size_t j = 0; j < k; ++j) {
      const double* x = uv.data() + static_cast<std::size_t>(idx.data[i * k + j]) * d;
      for (std::size_t ch = 0; ch < d; ++ch) {
        const double v = x[ch] - c[ch];
        o[ch] += v > 0.0 ? v : 0.0;
      }
    }
    for (std::size_t ch = 0; ch < d; ++ch) o[ch] *= inv;
  }
  return detail::make_result("neighbor_relu_mean", {m, d}, std::move(out), {u, center}, [idx, m, k, d, inv](Node& self) {
    const auto& uv = self.parents[0]->value;
    const auto& cv = self.parents[1]->value;
    const bool gu_on = detail::wants_grad(self, 0);
    const bool gc_on = detail::wants_grad(self, 1);
    double* gu = gu_on ? detail::pgrad(self, 0).data() : nullptr;
    double* gc = gc_on ? detail::pgrad(self, 1).data() : nullptr;
    for (std::size_t i = 0; i < m; ++i) {
      const double* g = self.grad.data() + i * d;
      const double* c = cv.data() + i * d;
      for (std::size_t j = 0; j < k; ++j) {
        const auto base = static_cast<std::size_t>(idx.data[i * k + j]) * d;
        const double* x = uv.data() + base;
        for (std::size_t ch = 0; ch < d; ++ch) {
          if (x[ch] - c[ch] > 0.0) {
            const double t = g[ch] * inv;
            if (gu) gu[base + ch] += t;
            if (gc) gc[i * d + ch] -= t;
          }
        }
      }
    }
  });
}

/// Elementwise clamp to [lo, hi]; zero gradient outside.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return x >= lo && x <= hi ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------

/// Reverse traversal from a scalar loss; gradients accumulate into every
/// reachable node that requires one.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Interior gradients are scratch; release them so a second backward over
  // a shared subgraph starts clean. Leaves keep theirs.
  for (Node* n : order) {
    if (n->backward) n->grad.clear();
  }
}

}  // namespace pcam::ad
