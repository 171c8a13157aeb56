// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "laser/errors.hpp"
#include "laser/ops.hpp"
#include "laser/tensor.hpp"

namespace laser {

// ---------------------------------------------------------------------------
// Softmax Jacobians

template <Real T>
struct JacobianResult {
  Tensor<T> matrix;  // d a_j / d logit_i
  T frobenius_norm = 0;
};

/// diag(a) - a a^T for a probability vector a.
template <Real T>
JacobianResult<T> softmax_jacobian(std::span<const T> a) {
  T total = 0;
  for (T v : a) {
    if (v < T(0) || !std::isfinite(v)) throw ContractError("softmax_jacobian: probabilities must be finite and >= 0");
    total += v;
  }
  if (std::abs(total - T(1)) > T(1e-9)) {
    throw ContractError("softmax_jacobian: probabilities sum to " + std::to_string(total) + ", not 1");
  }
  const std::size_t n = a.size();
  JacobianResult<T> r{Tensor<T>({n, n}), T(0)};
  T fro = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const T v = (i == j ? a[i] : T(0)) - a[i] * a[j];
      r.matrix(i, j) = v;
      fro += v * v;
    }
  r.frobenius_norm = std::sqrt(fro);
  return r;
}

/// d o_1 / d logit_11 of standard attention with N = 2, d = 1:
/// (v1 - v2) * sigma(delta) * (1 - sigma(delta)), delta = logit_11 - logit_12.
template <Real T>
T standard_jacobian_element_2x1(T delta, T v1, T v2) {
  const T a = detail::stable_sigmoid(delta);
  const T one_minus_a = detail::stable_sigmoid(-delta);
  return (v1 - v2) * a * one_minus_a;
}

/// d o_1 / d logit_11 of LASER attention with N = 2, d = 1:
///   (e^v1 - e^v2) a (1 - a) / (a e^v1 + (1 - a) e^v2),  a = sigma(delta).
/// Both exponentials are shifted by max(v1, v2); the ratio is unchanged.
template <Real T>
T laser_jacobian_element_2x1(T delta, T v1, T v2) {
  const T a = detail::stable_sigmoid(delta);
  const T one_minus_a = detail::stable_sigmoid(-delta);
  const T m = std::max(v1, v2);
  const T e1 = std::exp(v1 - m);
  const T e2 = std::exp(v2 - m);
  return (e1 - e2) * a * one_minus_a / (a * e1 + one_minus_a * e2);
}

// ---------------------------------------------------------------------------
// Log-sum-exp bounds

template <Real T>
struct LogSumExpBounds {
  T lower = 0;  // max_j (x_j + w_j)
  T value = 0;  // log sum_j exp(x_j + w_j)
  T upper = 0;  // lower + log N', N' = entries with finite log-weight
  std::size_t support = 0;
};

/// Evaluates log-sum-exp of x + log_weights next to its max bounds and throws
/// if value leaves [lower, upper] by more than `slack`. Entries whose log
/// weight is -inf (zero weight) are excluded.
template <Real T>
LogSumExpBounds<T> logsumexp_bound_check(std::span<const T> x, std::span<const T> log_weights, T slack = T(1e-12)) {
  if (x.size() != log_weights.size()) throw DimensionError("logsumexp_bound_check: length mismatch");
  LogSumExpBounds<T> r;
  r.lower = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || std::isnan(log_weights[i]) || log_weights[i] == std::numeric_limits<T>::infinity())
      throw ContractError("logsumexp_bound_check: inputs must be finite");
    if (log_weights[i] == -std::numeric_limits<T>::infinity()) continue;
    r.lower = std::max(r.lower, x[i] + log_weights[i]);
    ++r.support;
  }
  if (r.support == 0) throw DegenerateRowError("logsumexp_bound_check: every weight is zero");
  T s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (log_weights[i] == -std::numeric_limits<T>::infinity()) continue;
    s += std::exp(x[i] + log_weights[i] - r.lower);
  }
  r.value = r.lower + std::log(s);
  r.upper = r.lower + std::log(T(r.support));
  if (r.value < r.lower - slack || r.value > r.upper + slack) {
    throw ContractError("internal consistency: log-sum-exp " + std::to_string(r.value) + " outside [" +
                        std::to_string(r.lower) + ", " + std::to_string(r.upper) + "]");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Attention probability statistics

/// Bucket edges 1e-12, 1e-11, ..., 1. Bucket 0 holds p < 1e-12, bucket k
/// holds 10^(k-13) <= p < 10^(k-12), and the last bucket also takes p == 1.
inline constexpr int kBucketMinExp = -12;
inline constexpr std::size_t kBucketCount = 13;

inline std::size_t bucket_index(double p) {
  if (p < 1e-12) return 0;
  if (p >= 1.0) return kBucketCount - 1;
  std::size_t k = 1;
  double hi = 1e-11;
  while (k < kBucketCount - 1 && p >= hi) {
    ++k;
    hi *= 10.0;
  }
  return k;
}

inline std::pair<double, double> bucket_bounds(std::size_t k) {
  if (k == 0) return {0.0, 1e-12};
  return {std::pow(10.0, kBucketMinExp + int(k) - 1), std::pow(10.0, kBucketMinExp + int(k))};
}

inline std::vector<double> default_thresholds() { return {1e-7, 1e-3}; }

/// Counts of attention probabilities for one group (a head, a layer, or all).
struct ProbabilityStats {
  std::vector<double> thresholds;
  std::vector<std::uint64_t> below;  // strictly below thresholds[i]
  std::vector<std::uint64_t> buckets = std::vector<std::uint64_t>(kBucketCount, 0);
  std::uint64_t total = 0;
  double jacobian_norm_sum = 0;
  std::uint64_t jacobian_rows = 0;

  ProbabilityStats() = default;
  explicit ProbabilityStats(std::vector<double> th) : thresholds(std::move(th)), below(thresholds.size(), 0) {
    for (std::size_t i = 1; i < thresholds.size(); ++i)
      if (thresholds[i] < thresholds[i - 1]) throw ContractError("thresholds must be sorted ascending");
  }

  void add(double p) {
    ++total;
    ++buckets[bucket_index(p)];
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      if (p < thresholds[i]) ++below[i];
  }

  /// Associative merge of counts from another group with equal thresholds.
  void merge(const ProbabilityStats& o) {
    if (o.thresholds != thresholds) throw ContractError("merging statistics with different thresholds");
    total += o.total;
    for (std::size_t i = 0; i < below.size(); ++i) below[i] += o.below[i];
    for (std::size_t k = 0; k < kBucketCount; ++k) buckets[k] += o.buckets[k];
    jacobian_norm_sum += o.jacobian_norm_sum;
    jacobian_rows += o.jacobian_rows;
  }

  double fraction_below(std::size_t i) const { return total ? double(below[i]) / double(total) : 0.0; }
  double jacobian_norm_mean() const { return jacobian_rows ? jacobian_norm_sum / double(jacobian_rows) : 0.0; }
};

/// Adds the unmasked entries of an N x N probability matrix. With `causal`
/// and `exclude_masked`, entries above the diagonal are skipped. When
/// `with_jacobians` is set, the Frobenius norm of each row's softmax Jacobian
/// (over its unmasked entries) is accumulated.
template <Real T>
void accumulate_probabilities(ProbabilityStats& stats, const Tensor<T>& probs, bool causal, bool exclude_masked = true,
                              bool with_jacobians = false) {
  const std::size_t n = probs.rows(), c = probs.cols();
  std::vector<double> row;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t visible = (causal && exclude_masked) ? std::min(c, i + 1) : c;
    row.assign(probs.row_span(i).begin(), probs.row_span(i).begin() + std::ptrdiff_t(visible));
    for (double p : row) stats.add(p);
    if (with_jacobians) {
      // f32 rows are only normalized to ~1e-7; renormalize in f64 first.
      double total = 0;
      for (double p : row) total += p;
      for (double& p : row) p /= total;
      stats.jacobian_norm_sum += softmax_jacobian<double>(row).frobenius_norm;
      ++stats.jacobian_rows;
    }
  }
}

/// Histogram and threshold fractions over a stream of probability matrices.
template <Real T>
ProbabilityStats attention_prob_histogram(std::span<const Tensor<T>> probs, std::vector<double> thresholds,
                                          bool causal = true, bool exclude_masked = true) {
  if (probs.empty()) throw ContractError("attention_prob_histogram: empty stream");
  ProbabilityStats stats(std::move(thresholds));
  for (const auto& p : probs) accumulate_probabilities(stats, p, causal, exclude_masked);
  return stats;
}

// ---------------------------------------------------------------------------
// Scaling-law fit

struct PowerLawFit {
  double a = 0;
  double b = 0;
  double rms_log_residual = 0;
};

/// Least squares of log(loss) = log(a) + b log(n).
inline PowerLawFit power_law_fit(std::span<const std::pair<double, double>> points) {
  if (points.size() < 2) throw ContractError("power_law_fit: at least two points are required");
  double mx = 0, my = 0;
  for (const auto& [n, loss] : points) {
    if (!(n > 0) || !(loss > 0) || !std::isfinite(n) || !std::isfinite(loss))
      throw ContractError("power_law_fit: parameter counts and losses must be positive");
    mx += std::log(n);
    my += std::log(loss);
  }
  mx /= double(points.size());
  my /= double(points.size());
  double sxx = 0, sxy = 0;
  for (const auto& [n, loss] : points) {
    const double dx = std::log(n) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(loss) - my);
  }
  if (sxx == 0) throw ContractError("power_law_fit: all parameter counts are equal");
  PowerLawFit fit;
  fit.b = sxy / sxx;
  const double log_a = my - fit.b * mx;
  fit.a = std::exp(log_a);
  double ss = 0;
  for (const auto& [n, loss] : points) {
    const double r = std::log(loss) - (log_a + fit.b * std::log(n));
    ss += r * r;
  }
  fit.rms_log_residual = std::sqrt(ss / double(points.size()));
  return fit;
}

}  // namespace laser
