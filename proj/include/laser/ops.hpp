// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "laser/errors.hpp"
#include "laser/graph.hpp"
#include "laser/tensor.hpp"

namespace laser {

namespace fault {
/// Test fixture: negates the row_softmax backward rule. Used to prove that the
/// gradient checks detect a broken derivative; never set in normal operation.
inline std::atomic<bool> flip_softmax_backward{false};
}  // namespace fault

namespace detail {

template <Real T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <Real T>
Eigen::Map<RowMat<T>> as_mat(Tensor<T>& t) {
  return Eigen::Map<RowMat<T>>(t.data().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols()));
}

template <Real T>
Eigen::Map<const RowMat<T>> as_mat(const Tensor<T>& t) {
  return Eigen::Map<const RowMat<T>>(t.data().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols()));
}

template <Real T>
void require_same_graph(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.graph != b.graph) throw ContractError(std::string(op) + ": operands live on different graphs");
}

template <Real T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require_same_graph(a, b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

template <Real T>
void require_rowvec(const Var<T>& x, const Var<T>& r, const char* op) {
  require_same_graph(x, r, op);
  if (r.rows() != 1 || r.cols() != x.cols()) {
    throw DimensionError(std::string(op) + ": expected a 1x" + std::to_string(x.cols()) +
                         " row vector, got " + shape_str(r.shape()));
  }
}

template <Real T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <Real T>
T stable_softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

inline bool is_masked(double m) { return m == -std::numeric_limits<double>::infinity(); }

template <Real T>
void accumulate_colsum(Tensor<T>& acc, const Tensor<T>& src) {
  const std::size_t r = src.rows(), c = src.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) acc[j] += src(i, j);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m x k] * b[k x n].
template <Real T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_graph(a, b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ (" + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + ")");
  }
  Tensor<T> out = Tensor<T>::uninitialized({a.rows(), b.cols()});
  detail::as_mat(out).noalias() = detail::as_mat(a.value()) * detail::as_mat(b.value());
  return a.graph->record("matmul", std::move(out), {a.id, b.id},
                         [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                           if (auto* ga = ctx.grad(0))
                             detail::as_mat(*ga).noalias() += detail::as_mat(g) * detail::as_mat(ctx.in(1)).transpose();
                           if (auto* gb = ctx.grad(1))
                             detail::as_mat(*gb).noalias() += detail::as_mat(ctx.in(0)).transpose() * detail::as_mat(g);
                         });
}

/// a[m x k] * b[n x k]^T, the shape of Q K^T.
template <Real T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  detail::require_same_graph(a, b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner dimensions differ (" + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T)");
  }
  Tensor<T> out = Tensor<T>::uninitialized({a.rows(), b.rows()});
  detail::as_mat(out).noalias() = detail::as_mat(a.value()) * detail::as_mat(b.value()).transpose();
  return a.graph->record("matmul_nt", std::move(out), {a.id, b.id},
                         [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                           if (auto* ga = ctx.grad(0))
                             detail::as_mat(*ga).noalias() += detail::as_mat(g) * detail::as_mat(ctx.in(1));
                           if (auto* gb = ctx.grad(1))
                             detail::as_mat(*gb).noalias() += detail::as_mat(g).transpose() * detail::as_mat(ctx.in(0));
                         });
}

template <Real T>
Var<T> transpose(const Var<T>& a) {
  Tensor<T> out = Tensor<T>::uninitialized({a.cols(), a.rows()});
  detail::as_mat(out) = detail::as_mat(a.value()).transpose();
  return a.graph->record("transpose", std::move(out), {a.id},
                         [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                           if (auto* ga = ctx.grad(0)) detail::as_mat(*ga) += detail::as_mat(g).transpose();
                         });
}

// ---------------------------------------------------------------------------
// Elementwise binary ops (identical shapes)

template <Real T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.graph->record("add", std::move(out), {a.id, b.id},
                         [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                           for (std::size_t k = 0; k < 2; ++k)
                             if (auto* gk = ctx.grad(k))
                               for (std::size_t i = 0; i < g.size(); ++i) (*gk)[i] += g[i];
                         });
}

template <Real T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.graph->record("sub", std::move(out), {a.id, b.id},
                         [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                           if (auto* ga = ctx.grad(0))
                             for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                           if (auto* gb = ctx.grad(1))
                             for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
                         });
}

/// Hadamard product.
template <Real T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.graph->record("mul", std::move(out), {a.id, b.id},
                         [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                           if (auto* ga = ctx.grad(0))
                             for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * ctx.in(1)[i];
                           if (auto* gb = ctx.grad(1))
                             for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * ctx.in(0)[i];
                         });
}

/// Multiplication by a constant.
template <Real T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= c;
  return a.graph->record("scale", std::move(out), {a.id},
                         [c](const Tensor<T>& g, BackwardContext<T>& ctx) {
                           if (auto* ga = ctx.grad(0))
                             for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += c * g[i];
                         });
}

/// Multiplication by a differentiable 1 x 1 scalar.
template <Real T>
Var<T> scale_by(const Var<T>& a, const Var<T>& s) {
  detail::require_same_graph(a, s, "scale_by");
  if (s.value().size() != 1) throw DimensionError("scale_by: factor must be 1x1, got " + shape_str(s.shape()));
  const T c = s.value()[0];
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= c;
  return a.graph->record("scale_by", std::move(out), {a.id, s.id},
                         [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                           const T c = ctx.in(1)[0];
                           if (auto* ga = ctx.grad(0))
                             for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += c * g[i];
                           if (auto* gs = ctx.grad(1)) {
                             T acc = 0;
                             for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * ctx.in(0)[i];
                             (*gs)[0] += acc;
                           }
                         });
}

// ---------------------------------------------------------------------------
// Row-vector broadcasts: r is 1 x n and applies to every row of x (m x n).

template <Real T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& r) {
  detail::require_rowvec(x, r, "add_rowvec");
  Tensor<T> out = x.value();
  const std::size_t m = out.rows(), n = out.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += r.value()[j];
  return x.graph->record("add_rowvec", std::move(out), {x.id, r.id},
                         [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                           if (auto* gx = ctx.grad(0))
                             for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                           if (auto* gr = ctx.grad(1)) detail::accumulate_colsum(*gr, g);
                         });
}

template <Real T>
Var<T> sub_rowvec(const Var<T>& x, const Var<T>& r) {
  detail::require_rowvec(x, r, "sub_rowvec");
  Tensor<T> out = x.value();
  const std::size_t m = out.rows(), n = out.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) -= r.value()[j];
  return x.graph->record("sub_rowvec", std::move(out), {x.id, r.id},
                         [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                           if (auto* gx = ctx.grad(0))
                             for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                           if (auto* gr = ctx.grad(1)) {
                             Tensor<T> cs(gr->shape());
                             detail::accumulate_colsum(cs, g);
                             for (std::size_t j = 0; j < cs.size(); ++j) (*gr)[j] -= cs[j];
                           }
                         });
}

template <Real T>
Var<T> mul_rowvec(const Var<T>& x, const Var<T>& r) {
  detail::require_rowvec(x, r, "mul_rowvec");
  Tensor<T> out = x.value();
  const std::size_t m = out.rows(), n = out.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) *= r.value()[j];
  return x.graph->record("mul_rowvec", std::move(out), {x.id, r.id},
                         [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                           const Tensor<T>& xv = ctx.in(0);
                           const Tensor<T>& rv = ctx.in(1);
                           const std::size_t m = g.rows(), n = g.cols();
                           if (auto* gx = ctx.grad(0))
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) (*gx)(i, j) += g(i, j) * rv[j];
                           if (auto* gr = ctx.grad(1))
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) (*gr)[j] += g(i, j) * xv(i, j);
                         });
}

// ---------------------------------------------------------------------------
// Elementwise unary maps

enum class Unary { exp, log, sigmoid, softplus, relu };

/// Elementwise map with its exact derivative. log rejects non-positive input.
template <Real T>
Var<T> elementwise(Unary kind, const Var<T>& x) {
  Tensor<T> out = x.value();
  switch (kind) {
    case Unary::exp:
      for (auto& v : out.data()) v = std::exp(v);
      return x.graph->record("exp", std::move(out), {x.id},
                             [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                               if (auto* gx = ctx.grad(0))
                                 for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * ctx.out()[i];
                             });
    case Unary::log:
      for (auto& v : out.data()) {
        if (v <= T(0)) throw DomainError("log of non-positive value " + std::to_string(v));
        v = std::log(v);
      }
      return x.graph->record("log", std::move(out), {x.id},
                             [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                               if (auto* gx = ctx.grad(0))
                                 for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] / ctx.in(0)[i];
                             });
    case Unary::sigmoid:
      for (auto& v : out.data()) v = detail::stable_sigmoid(v);
      return x.graph->record("sigmoid", std::move(out), {x.id},
                             [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                               if (auto* gx = ctx.grad(0))
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                   const T s = ctx.out()[i];
                                   (*gx)[i] += g[i] * s * (T(1) - s);
                                 }
                             });
    case Unary::softplus:
      for (auto& v : out.data()) v = detail::stable_softplus(v);
      return x.graph->record("softplus", std::move(out), {x.id},
                             [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                               if (auto* gx = ctx.grad(0))
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   (*gx)[i] += g[i] * detail::stable_sigmoid(ctx.in(0)[i]);
                             });
    case Unary::relu:
      for (auto& v : out.data()) v = v > T(0) ? v : T(0);
      return x.graph->record("relu", std::move(out), {x.id},
                             [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                               if (auto* gx = ctx.grad(0))
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   if (ctx.in(0)[i] > T(0)) (*gx)[i] += g[i];
                             });
  }
  throw ContractError("unknown elementwise kind");
}

template <Real T> Var<T> exp(const Var<T>& x) { return elementwise(Unary::exp, x); }
template <Real T> Var<T> log(const Var<T>& x) { return elementwise(Unary::log, x); }
template <Real T> Var<T> sigmoid(const Var<T>& x) { return elementwise(Unary::sigmoid, x); }
template <Real T> Var<T> softplus(const Var<T>& x) { return elementwise(Unary::softplus, x); }
template <Real T> Var<T> relu(const Var<T>& x) { return elementwise(Unary::relu, x); }

/// log without the domain check: log(0) = -inf, log(inf) = inf, NaN passes
/// through. Only for code paths whose contract is to expose non-finite values.
template <Real T>
Var<T> log_unchecked(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = std::log(v);
  return x.graph->record("log_unchecked", std::move(out), {x.id},
                         [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                           if (auto* gx = ctx.grad(0))
                             for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] / ctx.in(0)[i];
                         });
}

// ---------------------------------------------------------------------------
// Softmax

/// Row-wise softmax of `logits + mask`. Mask entries must be 0 or -inf and
/// every row must keep at least one finite entry. The row maximum is
/// subtracted before exponentiation, masked positions come out as exact 0.
template <Real T>
Var<T> row_softmax(const Var<T>& logits, const Tensor<T>* mask = nullptr) {
  const std::size_t n = logits.rows(), c = logits.cols();
  if (mask) {
    if (mask->shape() != logits.shape()) {
      throw DimensionError("row_softmax: mask shape " + shape_str(mask->shape()) + " does not match logits " +
                           shape_str(logits.shape()));
    }
    for (T m : mask->data()) {
      if (m != T(0) && !detail::is_masked(m)) throw ContractError("row_softmax: mask entries must be 0 or -inf");
    }
  }
  const Tensor<T>& x = logits.value();
  Tensor<T> out({n, c});
  auto X = detail::as_mat(x);
  auto O = detail::as_mat(out);
  for (std::size_t i = 0; i < n; ++i) {
    // Rows whose visible entries form a prefix are handled with vector ops.
    std::size_t l = c;
    bool prefix = true;
    if (mask) {
      l = 0;
      while (l < c && (*mask)(i, l) == T(0)) ++l;
      for (std::size_t j = l; j < c; ++j)
        if ((*mask)(i, j) == T(0)) prefix = false;
    }
    if (prefix) {
      if (l == 0) throw DegenerateRowError("row_softmax: row " + std::to_string(i) + " is fully masked");
      const auto xr = X.row(Eigen::Index(i)).head(Eigen::Index(l)).array();
      auto orow = O.row(Eigen::Index(i)).head(Eigen::Index(l)).array();
      orow = (xr - xr.maxCoeff()).exp();
      orow /= orow.sum();
      continue;
    }
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < c; ++j) {
      if (detail::is_masked((*mask)(i, j))) continue;
      any = true;
      mx = std::max(mx, x(i, j));
    }
    if (!any) throw DegenerateRowError("row_softmax: row " + std::to_string(i) + " is fully masked");
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (detail::is_masked((*mask)(i, j))) continue;
      const T e = std::exp(x(i, j) - mx);
      out(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < c; ++j) out(i, j) /= sum;
  }
  return logits.graph->record("row_softmax", std::move(out), {logits.id},
                              [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                                auto* gx = ctx.grad(0);
                                if (!gx) return;
                                const Tensor<T>& a = ctx.out();
                                const T sign = fault::flip_softmax_backward.load() ? T(-1) : T(1);
                                auto A = detail::as_mat(a);
                                auto G = detail::as_mat(g);
                                auto GX = detail::as_mat(*gx);
                                for (Eigen::Index i = 0; i < A.rows(); ++i) {
                                  const T dot = A.row(i).dot(G.row(i));
                                  GX.row(i).array() += sign * A.row(i).array() * (G.row(i).array() - dot);
                                }
                              });
}

// ---------------------------------------------------------------------------
// Reductions and normalization

/// Column-wise maximum as a 1 x d row, recorded as a constant so no gradient
/// flows through it.
template <Real T>
Var<T> column_max_stopped(const Var<T>& v) {
  const std::size_t n = v.rows(), d = v.cols();
  if (n == 0) throw ContractError("column_max_stopped: empty input");
  Tensor<T> m({1, d});
  for (std::size_t j = 0; j < d; ++j) {
    T best = v.value()(0, j);
    for (std::size_t i = 1; i < n; ++i) best = std::max(best, v.value()(i, j));
    m[j] = best;
  }
  return v.graph->constant(std::move(m));
}

namespace detail {

/// Visible prefix length of every row when each row of `mask` is a prefix
/// of zeros followed by -inf and the lengths never decrease (the causal
/// pattern, or no mask at all); nullopt otherwise.
template <Real T>
std::optional<std::vector<std::size_t>> monotone_prefix_lengths(const Tensor<T>* mask, std::size_t n, std::size_t nk) {
  std::vector<std::size_t> len(n, nk);
  if (!mask) return len;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t l = 0;
    while (l < nk && (*mask)(i, l) == T(0)) ++l;
    for (std::size_t j = l; j < nk; ++j)
      if ((*mask)(i, j) == T(0)) return std::nullopt;
    if (i > 0 && l < len[i - 1]) return std::nullopt;
    len[i] = l;
  }
  return len;
}

/// exp(min(V[0:e] - shift, 0)) with the shift broadcast over rows. The
/// difference and exp are taken in double, where the difference of two
/// floats is exact, so each entry is rounded once.
template <typename VMap, typename Row>
auto shifted_exp(const VMap& v, const Row& shift, std::size_t e) {
  using T = typename VMap::Scalar;
  if constexpr (std::is_same_v<T, double>) {
    RowMat<T> out = v.topRows(Eigen::Index(e));
    for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) -= shift;
    out = out.array().min(T(0)).exp().matrix();
    return out;
  } else {
    RowMat<double> wide = v.topRows(Eigen::Index(e)).template cast<double>();
    const auto s = shift.template cast<double>().eval();
    for (Eigen::Index i = 0; i < wide.rows(); ++i) wide.row(i) -= s;
    RowMat<T> out = wide.array().min(0.0).exp().matrix().template cast<T>();
    return out;
  }
}

/// Row block size of the blocked evaluation.
inline constexpr std::size_t kLwseBlock = 32;

/// Saved forward state of log_weighted_sum_exp.
template <Real T>
struct LwseState {
  bool blocked = false;
  std::vector<std::size_t> len;  // blocked: visible prefix length per row
  Tensor<T> mask;                // generic path only
  Tensor<T> shift;               // m_ic
  Tensor<T> weight;              // sum_j p_ij exp(v_jc - m_ic)
  std::vector<std::pair<std::size_t, std::size_t>> fixups;  // (i, c) not covered by the block product
};

/// Cache of exp(v_jc - m) for one column and shift, extended lazily in j.
template <Real T>
struct ExpColumn {
  std::vector<T> e;
  T shift = std::numeric_limits<T>::quiet_NaN();
  std::size_t valid = 0;
  std::size_t column = std::size_t(-1);

  const T* get(const Tensor<T>& v, std::size_t c, T m, std::size_t upto) {
    if (c != column || !(m == shift)) {
      column = c;
      shift = m;
      valid = 0;
    }
    e.resize(std::max(e.size(), upto));
    for (; valid < upto; ++valid) e[valid] = T(std::exp(double(v(valid, c)) - double(m)));
    return e.data();
  }
};

}  // namespace detail

/// log(P exp(V)) for a row-stochastic P, computed as
/// log(sum_j p_ij exp(v_jc - m_ic)) + m_ic where m_ic is the maximum of
/// column c over the positions row i can see (mask entry 0, or every
/// position when no mask is given). Without a mask this is the column max;
/// under a causal mask it is the prefix max, so row i never reads a later
/// row. The shift cancels exactly and receives no gradient.
///
/// For causal or absent masks the rows are processed in blocks: one GEMM
/// per block with the shift of the block's first row, after which the few
/// (row, column) pairs whose prefix max grew inside the block are redone
/// with their own shift.
template <Real T>
Var<T> log_weighted_sum_exp(const Var<T>& probs, const Var<T>& v, const Tensor<T>* mask = nullptr) {
  using Mat = detail::RowMat<T>;
  const std::size_t n = probs.rows(), nk = probs.cols(), d = v.cols();
  if (nk != v.rows()) {
    throw DimensionError("log_weighted_sum_exp: " + shape_str(probs.shape()) + " by " + shape_str(v.shape()));
  }
  if (mask && (mask->rows() != n || mask->cols() != nk)) {
    throw DimensionError("log_weighted_sum_exp: mask " + shape_str(mask->shape()));
  }
  const Tensor<T>& p = probs.value();
  const Tensor<T>& vv = v.value();
  auto st = std::make_shared<detail::LwseState<T>>();
  st->shift = Tensor<T>::uninitialized({n, d});
  st->weight = Tensor<T>::uninitialized({n, d});
  Tensor<T>& shift = st->shift;
  Tensor<T>& weight = st->weight;
  detail::ExpColumn<T> cache;

  if (auto len = detail::monotone_prefix_lengths(mask, n, nk)) {
    st->blocked = true;
    st->len = std::move(*len);
    const auto& L = st->len;
    for (std::size_t i = 0; i < n; ++i)
      if (L[i] == 0) throw DegenerateRowError("log_weighted_sum_exp: row " + std::to_string(i) + " sees nothing");
    // Running maximum over the visible prefix.
    std::vector<T> run(d, -std::numeric_limits<T>::infinity());
    for (std::size_t i = 0, seen = 0; i < n; ++i) {
      for (; seen < L[i]; ++seen)
        for (std::size_t c = 0; c < d; ++c) run[c] = std::max(run[c], vv(seen, c));
      for (std::size_t c = 0; c < d; ++c) shift(i, c) = run[c];
    }
    auto P = detail::as_mat(p);
    auto V = detail::as_mat(vv);
    auto S = detail::as_mat(shift);
    auto W = detail::as_mat(weight);
    for (std::size_t a = 0; a < n; a += detail::kLwseBlock) {
      const std::size_t rows = std::min(detail::kLwseBlock, n - a), e = L[a + rows - 1];
      const Mat E = detail::shifted_exp(V, S.row(a), e);
      W.middleRows(a, rows).noalias() = P.block(a, 0, rows, e) * E;
      for (std::size_t c = 0; c < d; ++c)
        for (std::size_t i = a + 1; i < a + rows; ++i) {
          if (shift(i, c) == shift(a, c)) continue;
          st->fixups.emplace_back(i, c);
          const T* ec = cache.get(vv, c, shift(i, c), L[i]);
          double w = 0;
          for (std::size_t j = 0; j < L[i]; ++j) w += double(p(i, j)) * double(ec[j]);
          weight(i, c) = T(w);
        }
    }
  } else {
    st->mask = *mask;
    for (std::size_t i = 0; i < n; ++i) {
      bool any = false;
      for (std::size_t c = 0; c < d; ++c) {
        T m = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < nk; ++j)
          if ((*mask)(i, j) == T(0)) {
            m = std::max(m, vv(j, c));
            any = true;
          }
        shift(i, c) = m;
      }
      if (!any) throw DegenerateRowError("log_weighted_sum_exp: row " + std::to_string(i) + " sees nothing");
    }
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t i = 0; i < n; ++i) {
        const T* ec = cache.get(vv, c, shift(i, c), nk);
        double w = 0;
        for (std::size_t j = 0; j < nk; ++j)
          if ((*mask)(i, j) == T(0)) w += double(p(i, j)) * double(ec[j]);
        weight(i, c) = T(w);
      }
  }

  Tensor<T> out = Tensor<T>::uninitialized({n, d});
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (!(weight[k] > T(0))) throw DegenerateRowError("laser attention: a weighted row sum is zero");
    out[k] = T(std::log(double(weight[k])) + double(shift[k]));
  }

  return probs.graph->record(
      "log_weighted_sum_exp", std::move(out), {probs.id, v.id}, [st](const Tensor<T>& g, BackwardContext<T>& ctx) {
        Tensor<T>* gp = ctx.grad(0);
        Tensor<T>* gv = ctx.grad(1);
        if (!gp && !gv) return;
        const Tensor<T>& pv = ctx.in(0);
        const Tensor<T>& vv = ctx.in(1);
        const std::size_t n = pv.rows(), nk = pv.cols(), d = vv.cols();
        // dL/dW_ic = g_ic / W_ic.
        Tensor<T> G = Tensor<T>::uninitialized({n, d});
        for (std::size_t k = 0; k < G.size(); ++k) G[k] = g[k] / st->weight[k];
        detail::ExpColumn<T> cache;

        auto fixup = [&](std::size_t i, std::size_t c, std::size_t upto, const Tensor<T>* mask) {
          const T gi = G(i, c);
          if (gi == T(0)) return;
          const T* ec = cache.get(vv, c, st->shift(i, c), upto);
          for (std::size_t j = 0; j < upto; ++j) {
            if (mask && (*mask)(i, j) != T(0)) continue;
            if (gp) (*gp)(i, j) += gi * ec[j];
            if (gv) (*gv)(j, c) += gi * pv(i, j) * ec[j];
          }
        };

        if (!st->blocked) {
          for (std::size_t c = 0; c < d; ++c)
            for (std::size_t i = 0; i < n; ++i) fixup(i, c, nk, &st->mask);
          return;
        }
        using Mat = detail::RowMat<T>;
        const auto& L = st->len;
        Tensor<T> Gb = G;
        for (auto [i, c] : st->fixups) Gb(i, c) = T(0);
        auto P = detail::as_mat(pv);
        auto V = detail::as_mat(vv);
        auto S = detail::as_mat(st->shift);
        auto GB = detail::as_mat(Gb);
        for (std::size_t a = 0; a < n; a += detail::kLwseBlock) {
          const std::size_t rows = std::min(detail::kLwseBlock, n - a), e = L[a + rows - 1];
          const Mat E = detail::shifted_exp(V, S.row(a), e);
          if (gp) detail::as_mat(*gp).block(a, 0, rows, e).noalias() += GB.middleRows(a, rows) * E.transpose();
          if (gv) {
            const Mat t = P.block(a, 0, rows, e).transpose() * GB.middleRows(a, rows);
            detail::as_mat(*gv).topRows(e) += t.cwiseProduct(E);
          }
        }
        std::vector<std::pair<std::size_t, std::size_t>> order = st->fixups;
        std::sort(order.begin(), order.end(),
                  [](auto x, auto y) { return x.second != y.second ? x.second < y.second : x.first < y.first; });
        for (auto [i, c] : order) fixup(i, c, L[i], nullptr);
      });
}

/// Sum of all entries as a 1 x 1 tensor.
template <Real T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().data()) acc += v;
  return x.graph->record("sum", Tensor<T>::scalar(acc), {x.id},
                         [](const Tensor<T>& g, BackwardContext<T>& ctx) {
                           if (auto* gx = ctx.grad(0))
                             for (auto& v : gx->data()) v += g[0];
                         });
}

template <Real T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / T(x.value().size()));
}

/// Per-row (x - mean) / sqrt(var + eps) * gain + bias, with biased variance.
template <Real T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-6)) {
  detail::require_rowvec(x, gain, "layer_norm");
  detail::require_rowvec(x, bias, "layer_norm");
  const std::size_t n = x.rows(), d = x.cols();
  if (d < 2) throw DimensionError("layer_norm: feature width must be at least 2");
  Tensor<T> out({n, d});
  Tensor<T> xhat({n, d});
  Tensor<T> inv_std({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += x.value()(i, j);
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T c = x.value()(i, j) - mu;
      var += c * c;
    }
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (x.value()(i, j) - mu) * is;
      out(i, j) = xhat(i, j) * gain.value()[j] + bias.value()[j];
    }
  }
  return x.graph->record(
      "layer_norm", std::move(out), {x.id, gain.id, bias.id},
      [xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor<T>& g, BackwardContext<T>& ctx) {
        const std::size_t n = g.rows(), d = g.cols();
        const Tensor<T>& gain = ctx.in(1);
        if (auto* gx = ctx.grad(0)) {
          for (std::size_t i = 0; i < n; ++i) {
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = g(i, j) * gain[j];
              m1 += dxh;
              m2 += dxh * xhat(i, j);
            }
            m1 /= T(d);
            m2 /= T(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = g(i, j) * gain[j];
              (*gx)(i, j) += inv_std[i] * (dxh - m1 - xhat(i, j) * m2);
            }
          }
        }
        if (auto* gg = ctx.grad(1))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += g(i, j) * xhat(i, j);
        if (auto* gb = ctx.grad(2)) detail::accumulate_colsum(*gb, g);
      });
}

// ---------------------------------------------------------------------------
// Slicing and assembly

/// Copy of the block rows [r0, r0+nr) x cols [c0, c0+nc).
template <Real T>
Var<T> slice(const Var<T>& x, std::size_t r0, std::size_t nr, std::size_t c0, std::size_t nc) {
  if (r0 + nr > x.rows() || c0 + nc > x.cols()) {
    throw DimensionError("slice: block exceeds shape " + shape_str(x.shape()));
  }
  Tensor<T> out({nr, nc});
  for (std::size_t i = 0; i < nr; ++i)
    for (std::size_t j = 0; j < nc; ++j) out(i, j) = x.value()(r0 + i, c0 + j);
  return x.graph->record("slice", std::move(out), {x.id},
                         [r0, c0](const Tensor<T>& g, BackwardContext<T>& ctx) {
                           if (auto* gx = ctx.grad(0))
                             for (std::size_t i = 0; i < g.rows(); ++i)
                               for (std::size_t j = 0; j < g.cols(); ++j) (*gx)(r0 + i, c0 + j) += g(i, j);
                         });
}

/// Horizontal concatenation of matrices with equal row counts.
template <Real T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    detail::require_same_graph(parts[0], p, "concat_cols");
    if (p.rows() != n) throw DimensionError("concat_cols: row counts differ");
    total += p.cols();
    ids.push_back(p.id);
  }
  Tensor<T> out({n, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p.value()(i, j);
    off += p.cols();
  }
  return parts[0].graph->record("concat_cols", std::move(out), std::move(ids),
                                [k = parts.size()](const Tensor<T>& g, BackwardContext<T>& ctx) {
                                  std::size_t off = 0;
                                  for (std::size_t p = 0; p < k; ++p) {
                                    const std::size_t w = ctx.in(p).cols();
                                    if (auto* gp = ctx.grad(p))
                                      for (std::size_t i = 0; i < g.rows(); ++i)
                                        for (std::size_t j = 0; j < w; ++j) (*gp)(i, j) += g(i, off + j);
                                    off += w;
                                  }
                                });
}

/// Vertical concatenation of matrices with equal column counts.
template <Real T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    detail::require_same_graph(parts[0], p, "concat_rows");
    if (p.cols() != c) throw DimensionError("concat_rows: column counts differ");
    total += p.rows();
    ids.push_back(p.id);
  }
  std::vector<T> data;
  data.reserve(total * c);
  for (const auto& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  return parts[0].graph->record("concat_rows", Tensor<T>({total, c}, std::move(data)), std::move(ids),
                                [k = parts.size()](const Tensor<T>& g, BackwardContext<T>& ctx) {
                                  std::size_t off = 0;
                                  for (std::size_t p = 0; p < k; ++p) {
                                    const std::size_t sz = ctx.in(p).size();
                                    if (auto* gp = ctx.grad(p))
                                      for (std::size_t i = 0; i < sz; ++i) (*gp)[i] += g[off + i];
                                    off += sz;
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Language-model specific

/// Rows of `table` selected by token id.
template <Real T>
Var<T> embedding(const Var<T>& table, std::span<const int> tokens) {
  const std::size_t vocab = table.rows(), d = table.cols();
  Tensor<T> out({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || std::size_t(tokens[i]) >= vocab) {
      throw InputError("token " + std::to_string(tokens[i]) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    for (std::size_t j = 0; j < d; ++j) out(i, j) = table.value()(std::size_t(tokens[i]), j);
  }
  return table.graph->record("embedding", std::move(out), {table.id},
                             [ids = std::vector<int>(tokens.begin(), tokens.end())](const Tensor<T>& g,
                                                                                    BackwardContext<T>& ctx) {
                               auto* gt = ctx.grad(0);
                               if (!gt) return;
                               for (std::size_t i = 0; i < ids.size(); ++i)
                                 for (std::size_t j = 0; j < g.cols(); ++j) (*gt)(std::size_t(ids[i]), j) += g(i, j);
                             });
}

/// Mean over rows of -log softmax(logits)[target]. Rows with target < 0 are
/// skipped; at least one row must be scored.
template <Real T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets) {
  const std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n) throw DimensionError("cross_entropy: one target per row required");
  const Tensor<T>& x = logits.value();
  std::size_t counted = 0;
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0) continue;
    if (std::size_t(targets[i]) >= v) throw InputError("cross_entropy: target outside vocabulary");
    T mx = x(i, 0);
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x(i, j));
    T s = 0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(x(i, j) - mx);
    total += std::log(s) + mx - x(i, std::size_t(targets[i]));
    ++counted;
  }
  if (counted == 0) throw ContractError("cross_entropy: no scored positions");
  return logits.graph->record(
      "cross_entropy", Tensor<T>::scalar(total / T(counted)), {logits.id},
      [tg = std::vector<int>(targets.begin(), targets.end()), counted](const Tensor<T>& g, BackwardContext<T>& ctx) {
        auto* gx = ctx.grad(0);
        if (!gx) return;
        const Tensor<T>& x = ctx.in(0);
        const std::size_t n = x.rows(), v = x.cols();
        const T w = g[0] / T(counted);
        for (std::size_t i = 0; i < n; ++i) {
          if (tg[i] < 0) continue;
          T mx = x(i, 0);
          for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x(i, j));
          T s = 0;
          for (std::size_t j = 0; j < v; ++j) s += std::exp(x(i, j) - mx);
          for (std::size_t j = 0; j < v; ++j) {
            const T p = std::exp(x(i, j) - mx) / s;
            (*gx)(i, j) += w * (p - (int(j) == tg[i] ? T(1) : T(0)));
          }
        }
      });
}

}  // namespace laser
