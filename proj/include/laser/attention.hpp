// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "laser/errors.hpp"
#include "laser/graph.hpp"
#include "laser/ops.hpp"
#include "laser/tensor.hpp"

namespace laser {

enum class Variant { standard, laser, laser_naive, diff, diff_laser };

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::standard: return "standard";
    case Variant::laser: return "laser";
    case Variant::laser_naive: return "laser_naive";
    case Variant::diff: return "diff";
    case Variant::diff_laser: return "diff_laser";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (Variant v : {Variant::standard, Variant::laser, Variant::laser_naive, Variant::diff, Variant::diff_laser})
    if (variant_name(v) == s) return v;
  throw ConfigError("unknown attention variant '" + std::string(s) + "'");
}

/// Which attention mechanism to run and how its logits are formed.
///
/// Logits are Q K^T / (tau * sqrt(s)) with s the head size. per_dim_temp
/// inserts D = diag(softplus(p)) between Q and K^T, qk_norm layer-normalizes
/// Q and K per head first. Both modifiers apply to standard and laser only.
struct AttentionSpec {
  Variant variant = Variant::standard;
  double tau = 1.0;
  bool per_dim_temp = false;
  bool qk_norm = false;
  bool causal = true;
  double lambda_init = 0.5;  // diff variants

  bool is_diff() const { return variant == Variant::diff || variant == Variant::diff_laser; }

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("attention tau must be positive");
    if ((per_dim_temp || qk_norm) && variant != Variant::standard && variant != Variant::laser) {
      throw ConfigError("per_dim_temp and qk_norm compose only with the standard and laser variants");
    }
    if (!std::isfinite(lambda_init)) throw ConfigError("attention lambda_init must be finite");
  }
};

/// N x N mask: 0 on and below the diagonal, -inf above it.
template <Real T>
Tensor<T> causal_mask(std::size_t n) {
  if (n == 0) throw ContractError("causal_mask: length must be at least 1");
  Tensor<T> m({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m(i, j) = -std::numeric_limits<T>::infinity();
  return m;
}

template <Real T>
bool is_causal_pattern(const Tensor<T>& mask) {
  const std::size_t n = mask.rows();
  if (mask.cols() != n) return false;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const bool masked = mask(i, j) == -std::numeric_limits<T>::infinity();
      if (masked != (j > i)) return false;
    }
  return true;
}

/// Trainable logit modifiers; only the ones enabled by the spec are read.
template <Real T>
struct LogitModifiers {
  std::optional<Var<T>> temp_p;  // 1 x s, per_dim_temp
  std::optional<Var<T>> q_gain, q_bias, k_gain, k_bias;  // 1 x s each, qk_norm
};

/// Projected queries, keys and values for one sequence. Each is N x (h*s),
/// the row-major layout of an N x h x s array: head k owns columns
/// [k*s, (k+1)*s).
template <Real T>
struct AttentionInputs {
  Var<T> q, k, v;
  std::size_t heads = 1;
  std::optional<Tensor<T>> mask;
  LogitModifiers<T> mods;
};

/// Two query/key projections sharing one value projection.
template <Real T>
struct DualAttentionInputs {
  Var<T> q1, k1, q2, k2, v;
  std::size_t heads = 1;
  std::optional<Tensor<T>> mask;
};

/// Receives every attention probability matrix computed (head index, map
/// index within the head, N x N probabilities).
template <Real T>
using ProbabilitySink = std::function<void(std::size_t head, std::size_t map, const Tensor<T>& probs)>;

namespace detail {

template <Real T>
std::size_t head_size(const Var<T>& x, std::size_t heads, const char* what) {
  if (heads == 0 || x.cols() % heads != 0) {
    throw DimensionError(std::string(what) + ": width " + std::to_string(x.cols()) + " not divisible into " +
                         std::to_string(heads) + " heads");
  }
  return x.cols() / heads;
}

template <Real T>
const Tensor<T>* resolve_mask(const std::optional<Tensor<T>>& mask, std::size_t n, bool causal,
                              std::optional<Tensor<T>>& storage) {
  if (mask) {
    if (mask->rows() != n || mask->cols() != n) {
      throw DimensionError("attention mask must be " + std::to_string(n) + "x" + std::to_string(n));
    }
    if (causal && !is_causal_pattern(*mask)) throw ContractError("non-causal mask passed with a causal spec");
    return &*mask;
  }
  if (!causal) return nullptr;
  storage = causal_mask<T>(n);
  return &*storage;
}

template <Real T>
void check_qkv(const Var<T>& q, const Var<T>& k, const Var<T>& v, const char* what) {
  if (q.shape() != k.shape() || q.rows() != v.rows() || v.cols() != q.cols()) {
    throw DimensionError(std::string(what) + ": Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) +
                         ", V " + shape_str(v.shape()) + " must share N, h and s");
  }
}

/// Attention probabilities of one head.
template <Real T>
Var<T> head_probs(Var<T> qh, Var<T> kh, const AttentionSpec& spec, const LogitModifiers<T>& mods,
                  const Tensor<T>* mask) {
  const std::size_t s = qh.cols();
  if (spec.qk_norm) {
    if (!mods.q_gain || !mods.q_bias || !mods.k_gain || !mods.k_bias)
      throw ContractError("qk_norm enabled without normalization parameters");
    qh = layer_norm(qh, *mods.q_gain, *mods.q_bias);
    kh = layer_norm(kh, *mods.k_gain, *mods.k_bias);
  }
  if (spec.per_dim_temp) {
    if (!mods.temp_p) throw ContractError("per_dim_temp enabled without a temperature vector");
    qh = mul_rowvec(qh, softplus(*mods.temp_p));
  }
  const T inv = T(1) / (T(spec.tau) * std::sqrt(T(s)));
  return row_softmax(scale(matmul_nt(qh, kh), inv), mask);
}

/// log(A exp(V - m)) + m with m the stopped maximum of V over the
/// positions each row can see.
template <Real T>
Var<T> laser_combine(const Var<T>& probs, const Var<T>& vh, const Tensor<T>* mask) {
  return log_weighted_sum_exp(probs, vh, mask);
}

template <Real T>
Var<T> run_heads(const AttentionInputs<T>& inp, const AttentionSpec& spec, Variant variant,
                 const ProbabilitySink<T>* sink) {
  check_qkv(inp.q, inp.k, inp.v, "attention");
  const std::size_t n = inp.q.rows();
  const std::size_t s = head_size(inp.q, inp.heads, "attention");
  std::optional<Tensor<T>> storage;
  const Tensor<T>* mask = resolve_mask(inp.mask, n, spec.causal, storage);
  std::vector<Var<T>> outs;
  outs.reserve(inp.heads);
  for (std::size_t h = 0; h < inp.heads; ++h) {
    const Var<T> qh = inp.heads == 1 ? inp.q : slice(inp.q, 0, n, h * s, s);
    const Var<T> kh = inp.heads == 1 ? inp.k : slice(inp.k, 0, n, h * s, s);
    const Var<T> vh = inp.heads == 1 ? inp.v : slice(inp.v, 0, n, h * s, s);
    const Var<T> probs = head_probs(qh, kh, spec, inp.mods, mask);
    if (sink && *sink) (*sink)(h, 0, probs.value());
    switch (variant) {
      case Variant::standard: outs.push_back(matmul(probs, vh)); break;
      case Variant::laser: outs.push_back(laser_combine(probs, vh, mask)); break;
      case Variant::laser_naive: outs.push_back(log_unchecked(matmul(probs, exp(vh)))); break;
      default: throw ContractError("run_heads: diff variants need dual projections");
    }
  }
  return inp.heads == 1 ? outs[0] : concat_cols<T>(outs);
}

}  // namespace detail

/// softmax(mask + Q K^T / (tau sqrt(s))) V per head.
template <Real T>
Var<T> standard_attention(const AttentionInputs<T>& inp, const AttentionSpec& spec,
                          const ProbabilitySink<T>* sink = nullptr) {
  if (spec.variant != Variant::standard) throw ContractError("standard_attention called with a non-standard spec");
  spec.validate();
  return detail::run_heads(inp, spec, Variant::standard, sink);
}

/// LASER attention log(softmax(logits) exp(V)) evaluated with the
/// log-weighted-sum-exp trick: per head and column, the maximum of V over
/// the positions a row can see is subtracted before exp and added back
/// after log. Unmasked, that is the column max m_j = max_i V_ij; under a
/// causal mask it is the prefix max. The shift carries no gradient.
template <Real T>
Var<T> laser_attention(const AttentionInputs<T>& inp, const AttentionSpec& spec,
                       const ProbabilitySink<T>* sink = nullptr) {
  if (spec.variant != Variant::laser) throw ContractError("laser_attention called with a non-laser spec");
  spec.validate();
  return detail::run_heads(inp, spec, Variant::laser, sink);
}

/// LASER without max shifting. Overflow is part of the contract: the result
/// may contain inf or NaN and no error is raised for it.
template <Real T>
Var<T> laser_attention_naive(const AttentionInputs<T>& inp, AttentionSpec spec = {Variant::laser_naive},
                             const ProbabilitySink<T>* sink = nullptr) {
  spec.variant = Variant::laser_naive;
  spec.per_dim_temp = spec.qk_norm = false;
  spec.validate();
  return detail::run_heads(inp, spec, Variant::laser_naive, sink);
}

/// Difference of two attention maps over shared values:
///   standard: A1 V - lambda A2 V
///   laser:    log(A1 exp(V)) - lambda log(A2 exp(V)), each term via the trick.
template <Real T>
Var<T> diff_attention(const DualAttentionInputs<T>& inp, const Var<T>& lambda, bool laser_mode, double tau = 1.0,
                      bool causal = true, const ProbabilitySink<T>* sink = nullptr) {
  detail::check_qkv(inp.q1, inp.k1, inp.v, "diff_attention");
  detail::check_qkv(inp.q2, inp.k2, inp.v, "diff_attention");
  if (lambda.value().size() != 1) throw DimensionError("diff_attention: lambda must be 1x1");
  const std::size_t n = inp.q1.rows();
  const std::size_t s = detail::head_size(inp.q1, inp.heads, "diff_attention");
  AttentionSpec spec;
  spec.variant = laser_mode ? Variant::diff_laser : Variant::diff;
  spec.tau = tau;
  spec.causal = causal;
  spec.validate();
  std::optional<Tensor<T>> storage;
  const Tensor<T>* mask = detail::resolve_mask(inp.mask, n, causal, storage);
  const LogitModifiers<T> none;
  std::vector<Var<T>> outs;
  for (std::size_t h = 0; h < inp.heads; ++h) {
    auto cut = [&](const Var<T>& x) { return inp.heads == 1 ? x : slice(x, 0, n, h * s, s); };
    const Var<T> vh = cut(inp.v);
    const Var<T> p1 = detail::head_probs(cut(inp.q1), cut(inp.k1), spec, none, mask);
    const Var<T> p2 = detail::head_probs(cut(inp.q2), cut(inp.k2), spec, none, mask);
    if (sink && *sink) {
      (*sink)(h, 0, p1.value());
      (*sink)(h, 1, p2.value());
    }
    const Var<T> t1 = laser_mode ? detail::laser_combine(p1, vh, mask) : matmul(p1, vh);
    const Var<T> t2 = laser_mode ? detail::laser_combine(p2, vh, mask) : matmul(p2, vh);
    outs.push_back(sub(t1, scale_by(t2, lambda)));
  }
  return inp.heads == 1 ? outs[0] : concat_cols<T>(outs);
}

/// Single-head attention from precomputed logits, so that derivatives with
/// respect to the logits themselves can be taken.
template <Real T>
Var<T> attention_from_logits(const Var<T>& logits, const Var<T>& v, Variant variant, const Tensor<T>* mask = nullptr) {
  if (logits.rows() != logits.cols() || logits.rows() != v.rows()) {
    throw DimensionError("attention_from_logits: logits " + shape_str(logits.shape()) + " and V " +
                         shape_str(v.shape()) + " disagree");
  }
  const Var<T> probs = row_softmax(logits, mask);
  switch (variant) {
    case Variant::standard: return matmul(probs, v);
    case Variant::laser: return detail::laser_combine(probs, v, mask);
    case Variant::laser_naive: return log_unchecked(matmul(probs, exp(v)));
    default: throw ContractError("attention_from_logits: single-map variants only");
  }
}

/// Dispatch for the single-projection variants.
template <Real T>
Var<T> attend(const AttentionInputs<T>& inp, const AttentionSpec& spec, const ProbabilitySink<T>* sink = nullptr) {
  switch (spec.variant) {
    case Variant::standard: return standard_attention(inp, spec, sink);
    case Variant::laser: return laser_attention(inp, spec, sink);
    case Variant::laser_naive: return laser_attention_naive(inp, spec, sink);
    default: throw ContractError("attend: diff variants need dual projections, use diff_attention");
  }
}

/// Projection weights of one attention sublayer. W_Q/W_K/W_V are d x d with
/// head k in column block k; W_O is d x d.
template <Real T>
struct MhaParams {
  Var<T> w_q, w_k, w_v, w_o;
  std::optional<Var<T>> w_q2, w_k2, lambda;  // diff variants
  LogitModifiers<T> mods;
};

/// Multi-head attention over `x`, which stacks rows of one or more sequences
/// of length `seq_len` (0 means a single sequence). Each sequence attends
/// only within itself.
template <Real T>
Var<T> multi_head_attention(const Var<T>& x, const MhaParams<T>& p, std::size_t heads, const AttentionSpec& spec,
                            std::size_t seq_len = 0, const ProbabilitySink<T>* sink = nullptr) {
  spec.validate();
  const std::size_t d = x.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("model width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const std::size_t total = x.rows();
  const std::size_t n = seq_len == 0 ? total : seq_len;
  if (total % n != 0) throw DimensionError("multi_head_attention: rows not a multiple of sequence length");
  const Var<T> q = matmul(x, p.w_q);
  const Var<T> k = matmul(x, p.w_k);
  const Var<T> v = matmul(x, p.w_v);
  std::optional<Var<T>> q2, k2;
  if (spec.is_diff()) {
    if (!p.w_q2 || !p.w_k2 || !p.lambda) throw ContractError("diff attention needs second projections and lambda");
    q2 = matmul(x, *p.w_q2);
    k2 = matmul(x, *p.w_k2);
  }
  const std::size_t batches = total / n;
  std::vector<Var<T>> seqs;
  seqs.reserve(batches);
  for (std::size_t b = 0; b < batches; ++b) {
    auto rows = [&](const Var<T>& t) { return batches == 1 ? t : slice(t, b * n, n, 0, d); };
    if (spec.is_diff()) {
      DualAttentionInputs<T> in{rows(q), rows(k), rows(*q2), rows(*k2), rows(v), heads, std::nullopt};
      seqs.push_back(diff_attention(in, *p.lambda, spec.variant == Variant::diff_laser, spec.tau, spec.causal, sink));
    } else {
      AttentionInputs<T> in{rows(q), rows(k), rows(v), heads, std::nullopt, p.mods};
      seqs.push_back(attend(in, spec, sink));
    }
  }
  const Var<T> merged = batches == 1 ? seqs[0] : concat_rows<T>(seqs);
  return matmul(merged, p.w_o);
}

}  // namespace laser
