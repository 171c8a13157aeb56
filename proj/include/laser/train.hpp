// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "laser/model.hpp"

namespace laser {

enum class OptimizerKind { adamw, lamb };

constexpr std::string_view optimizer_name(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "lamb"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "adamw") return OptimizerKind::adamw;
  if (s == "lamb") return OptimizerKind::lamb;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected adamw or lamb)");
}

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adamw;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_frac = 0.05;
  std::size_t steps = 2000;
  std::size_t batch = 16;
  std::size_t seq_len = 128;
  std::uint64_t seed = 0;
  DType dtype = DType::f32;
  double grad_clip = 0.0;  // 0 disables clipping
  std::size_t eval_every = 100;
  double eval_frac = 0.02;
  std::size_t spike_window = 50;
  double spike_jump = 0.5;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1 must lie in (0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2 must lie in (0, 1)");
    if (!(eps > 0.0)) throw ConfigError("train.eps must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ConfigError("train.warmup_frac must lie in [0, 1)");
    if (steps == 0) throw ConfigError("train.steps must be at least 1");
    if (batch == 0) throw ConfigError("train.batch must be at least 1");
    if (seq_len < 2) throw ConfigError("train.seq_len must be at least 2");
    if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be non-negative");
    if (eval_every == 0) throw ConfigError("train.eval_every must be at least 1");
    if (!(eval_frac > 0.0 && eval_frac < 1.0)) throw ConfigError("train.eval_frac must lie in (0, 1)");
    if (spike_window < 3) throw ConfigError("train.spike_window must be at least 3");
    if (!(spike_jump >= 0.0)) throw ConfigError("train.spike_jump must be non-negative");
  }
};

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `total`.
/// Steps past `total` give 0.
inline double cosine_schedule(std::size_t step, std::size_t total, double warmup_frac, double peak_lr) {
  if (total == 0 || step >= total) return 0.0;
  const auto warm = std::size_t(std::floor(warmup_frac * double(total)));
  if (step < warm) return peak_lr * double(step) / double(warm);
  const double progress = double(step - warm) / double(total - warm);
  return peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Number of steps whose loss exceeds the median of the preceding `window`
/// losses by more than `jump`.
inline std::size_t spike_count(std::span<const double> losses, std::size_t window, double jump) {
  if (window < 3) throw ContractError("spike_count: window must be at least 3");
  std::size_t count = 0;
  std::vector<double> buf(window);
  for (std::size_t t = window; t < losses.size(); ++t) {
    std::copy(losses.begin() + std::ptrdiff_t(t - window), losses.begin() + std::ptrdiff_t(t), buf.begin());
    std::sort(buf.begin(), buf.end());
    const double med = window % 2 ? buf[window / 2] : 0.5 * (buf[window / 2 - 1] + buf[window / 2]);
    if (losses[t] > med + jump) ++count;
  }
  return count;
}

// ---------------------------------------------------------------------------
// Optimizers

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <Real T>
struct OptimizerState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t t = 0;

  static OptimizerState zeros_like(std::span<const Tensor<T>> params) {
    OptimizerState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.shape());
      s.v.emplace_back(p.shape());
    }
    return s;
  }
};

namespace detail {

template <Real T>
void check_step_inputs(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, const OptimizerState<T>& state,
                       const std::vector<bool>& decay_mask) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw ContractError("optimizer: parameter, gradient and state counts differ");
  if (!decay_mask.empty() && decay_mask.size() != params.size())
    throw ContractError("optimizer: decay mask length differs from parameter count");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].shape() != params[k].shape() || state.m[k].shape() != params[k].shape() ||
        state.v[k].shape() != params[k].shape())
      throw DimensionError("optimizer: shape mismatch for parameter " + std::to_string(k));
    if (!grads[k].all_finite()) throw NumericError("optimizer: non-finite gradient in parameter " + std::to_string(k));
  }
}

/// Updates the moments of one tensor in place and writes the bias-corrected
/// Adam direction mhat / (sqrt(vhat) + eps) into `u`.
template <Real T>
void adam_direction(const Tensor<T>& g, Tensor<T>& m, Tensor<T>& v, std::uint64_t t, const AdamHyper& h,
                    std::vector<T>& u) {
  const T b1 = T(h.beta1), b2 = T(h.beta2), eps = T(h.eps);
  const T c1 = T(1) - T(std::pow(h.beta1, double(t)));
  const T c2 = T(1) - T(std::pow(h.beta2, double(t)));
  u.resize(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    m[i] = b1 * m[i] + (T(1) - b1) * g[i];
    v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
    u[i] = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
  }
}

template <Real T>
void decay_then_step(Tensor<T>& w, const std::vector<T>& u, T lr, T decay) {
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = w[i] * (T(1) - lr * decay) - lr * u[i];
}

}  // namespace detail

/// AdamW: decoupled weight decay w <- w (1 - lr wd) applied together with the
/// bias-corrected Adam step. `decay_mask` selects the tensors that decay
/// (empty means all).
template <Real T>
void adamw_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, OptimizerState<T>& state, double lr,
                const AdamHyper& h, const std::vector<bool>& decay_mask = {}) {
  detail::check_step_inputs(params, grads, state, decay_mask);
  ++state.t;
  std::vector<T> u;
  for (std::size_t k = 0; k < params.size(); ++k) {
    detail::adam_direction(grads[k], state.m[k], state.v[k], state.t, h, u);
    const bool decays = decay_mask.empty() || decay_mask[k];
    detail::decay_then_step(params[k], u, T(lr), decays ? T(h.weight_decay) : T(0));
  }
}

struct LambOptions {
  bool force_unit_trust = false;  // test hook: r = 1 and AdamW's decay composition
};

/// Trust ratio ||w|| / ||u||, or 1 when either norm is zero.
template <Real T>
T trust_ratio(const Tensor<T>& w, const std::vector<T>& u) {
  double wn = 0, un = 0;
  for (T x : w.data()) wn += double(x) * double(x);
  for (T x : u) un += double(x) * double(x);
  if (wn == 0.0 || un == 0.0) return T(1);
  return T(std::sqrt(wn) / std::sqrt(un));
}

/// LAMB: per tensor, u = Adam direction + wd w, then w <- w - lr r u with the
/// trust ratio r = ||w|| / ||u||.
template <Real T>
void lamb_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, OptimizerState<T>& state, double lr,
               const AdamHyper& h, const std::vector<bool>& decay_mask = {}, LambOptions opts = {}) {
  detail::check_step_inputs(params, grads, state, decay_mask);
  ++state.t;
  std::vector<T> u;
  for (std::size_t k = 0; k < params.size(); ++k) {
    detail::adam_direction(grads[k], state.m[k], state.v[k], state.t, h, u);
    const T wd = (decay_mask.empty() || decay_mask[k]) ? T(h.weight_decay) : T(0);
    Tensor<T>& w = params[k];
    if (opts.force_unit_trust) {
      detail::decay_then_step(w, u, T(lr), wd);
      continue;
    }
    for (std::size_t i = 0; i < w.size(); ++i) u[i] += wd * w[i];
    const T step = T(lr) * trust_ratio(w, u);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= step * u[i];
  }
}

/// Global L2 norm over all tensors, accumulated in double.
template <Real T>
double global_norm(std::span<const Tensor<T>> ts) {
  double s = 0;
  for (const auto& t : ts)
    for (T x : t.data()) s += double(x) * double(x);
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Data

/// Byte-level corpus split into a training head and a held-out tail.
class ByteCorpus {
 public:
  ByteCorpus(std::vector<std::uint8_t> bytes, double eval_frac, std::size_t seq_len) : bytes_(std::move(bytes)) {
    const auto held = std::size_t(std::floor(eval_frac * double(bytes_.size())));
    split_ = bytes_.size() - held;
    if (split_ < seq_len + 1 || held < seq_len) {
      throw InputError("corpus of " + std::to_string(bytes_.size()) + " bytes is too small for sequences of " +
                       std::to_string(seq_len) + " with a held-out fraction of " + std::to_string(eval_frac));
    }
  }

  std::size_t size() const { return bytes_.size(); }
  std::size_t train_size() const { return split_; }
  std::size_t eval_size() const { return bytes_.size() - split_; }

  /// `batch` windows of `n` tokens at uniformly random training offsets.
  std::vector<int> sample_batch(std::mt19937_64& rng, std::size_t batch, std::size_t n) const {
    std::uniform_int_distribution<std::size_t> pos(0, split_ - n);
    std::vector<int> out;
    out.reserve(batch * n);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t o = pos(rng);
      for (std::size_t i = 0; i < n; ++i) out.push_back(bytes_[o + i]);
    }
    return out;
  }

  /// Non-overlapping held-out windows of `n` tokens, in order.
  std::vector<std::vector<int>> eval_windows(std::size_t n) const {
    std::vector<std::vector<int>> out;
    for (std::size_t o = split_; o + n <= bytes_.size(); o += n)
      out.emplace_back(bytes_.begin() + std::ptrdiff_t(o), bytes_.begin() + std::ptrdiff_t(o + n));
    return out;
  }

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t split_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop

struct StepRecord {
  std::size_t step = 0;
  double loss = 0;
  double grad_norm = 0;
  double lr = 0;
  std::optional<double> eval_loss;
};

struct RunMetrics {
  std::vector<StepRecord> steps;

  std::vector<double> losses() const {
    std::vector<double> out;
    for (const auto& s : steps) out.push_back(s.loss);
    return out;
  }
  std::optional<double> final_eval_loss() const {
    for (auto it = steps.rbegin(); it != steps.rend(); ++it)
      if (it->eval_loss) return it->eval_loss;
    return std::nullopt;
  }
  std::size_t spikes(std::size_t window, double jump) const {
    const auto l = losses();
    return spike_count(l, window, jump);
  }
};

inline constexpr std::string_view kMetricsHeader = "step,loss,grad_norm,lr,eval_loss";

inline std::string metrics_row(const StepRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,", r.step, r.loss, r.grad_norm, r.lr);
  std::string s = buf;
  if (r.eval_loss) {
    std::snprintf(buf, sizeof buf, "%.9g", *r.eval_loss);
    s += buf;
  }
  return s;
}

inline void write_metrics_csv(std::ostream& os, const RunMetrics& m) {
  os << kMetricsHeader << '\n';
  for (const auto& r : m.steps) os << metrics_row(r) << '\n';
}

/// Tensors that take weight decay: matrices and embeddings, not gains,
/// biases, temperatures or lambda.
template <Real T>
std::vector<bool> decay_mask_for(const ModelParams<T>& p) {
  std::vector<bool> mask;
  for (const auto& [name, t] : p.entries()) mask.push_back(t.rows() > 1 && t.cols() > 1);
  return mask;
}

/// Mean next-token loss over all held-out windows.
template <Real T>
double evaluate(const ModelParams<T>& params, const std::vector<std::vector<int>>& windows, std::size_t batch) {
  if (windows.empty()) throw InputError("no held-out windows to evaluate");
  double total = 0;
  for (std::size_t start = 0; start < windows.size(); start += batch) {
    const std::size_t nb = std::min(batch, windows.size() - start);
    std::vector<int> tokens;
    for (std::size_t b = 0; b < nb; ++b) tokens.insert(tokens.end(), windows[start + b].begin(), windows[start + b].end());
    Graph<T> g;
    BoundParams<T> p(g, params, false);
    total += double(lm_forward(g, p, params.config(), std::span<const int>(tokens), nb).loss.value()[0]) * double(nb);
  }
  return total / double(windows.size());
}

template <Real T>
struct TrainResult {
  RunMetrics metrics;
  ModelParams<T> params;
};

/// Called after every step; returning false ends the run early.
using StepCallback = std::function<bool(const StepRecord&)>;

/// Deterministic training: init and data order follow `tc.seed`. Steps are
/// numbered 1..steps and use lr = cosine_schedule(step - 1, ...). The
/// held-out loss is recorded every `eval_every` steps and at the last step.
template <Real T>
TrainResult<T> train_loop(const ModelConfig& mc, const TrainConfig& tc, const ByteCorpus& corpus,
                          const StepCallback& on_step = {}) {
  mc.validate();
  tc.validate();
  if (tc.seq_len > mc.max_seq) {
    throw ConfigError("train.seq_len (" + std::to_string(tc.seq_len) + ") exceeds model.max_seq (" +
                      std::to_string(mc.max_seq) + ")");
  }
  if (mc.vocab < 256) throw ConfigError("byte-level training needs model.vocab >= 256");

  TrainResult<T> res{{}, ModelParams<T>::initialized(mc, tc.seed)};
  ModelParams<T>& params = res.params;
  std::mt19937_64 data_rng(tc.seed ^ 0x5DEECE66DULL);
  const auto eval_set = corpus.eval_windows(tc.seq_len);
  const auto mask = decay_mask_for(params);
  const AdamHyper hyper{tc.beta1, tc.beta2, tc.eps, tc.weight_decay};

  std::vector<Tensor<T>> weights;
  for (const auto& e : params.entries()) weights.push_back(e.second);
  auto state = OptimizerState<T>::zeros_like(weights);
  auto restore = [&] {
    for (std::size_t k = 0; k < weights.size(); ++k) params.entries()[k].second = weights[k];
  };

  std::vector<Tensor<T>> grads(weights.size());
  for (std::size_t step = 1; step <= tc.steps; ++step) {
    const auto tokens = corpus.sample_batch(data_rng, tc.batch, tc.seq_len);
    StepRecord rec;
    rec.step = step;
    rec.lr = cosine_schedule(step - 1, tc.steps, tc.warmup_frac, tc.lr);
    {
      Graph<T> g;
      std::vector<Var<T>> leaves;
      for (std::size_t k = 0; k < weights.size(); ++k) leaves.push_back(g.leaf(weights[k]));
      BoundParams<T> bound(params, std::span<const Var<T>>(leaves));
      const Var<T> loss = lm_forward(g, bound, mc, std::span<const int>(tokens), tc.batch).loss;
      rec.loss = double(loss.value()[0]);
      if (!std::isfinite(rec.loss)) {
        throw NumericError("non-finite training loss at step " + std::to_string(step));
      }
      auto gm = g.backward(loss);
      for (std::size_t k = 0; k < weights.size(); ++k) grads[k] = std::move(gm.at(leaves[k]));
    }
    rec.grad_norm = global_norm<T>(grads);
    if (!std::isfinite(rec.grad_norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(step));
    if (tc.grad_clip > 0.0 && rec.grad_norm > tc.grad_clip) {
      const T s = T(tc.grad_clip / rec.grad_norm);
      for (auto& gt : grads)
        for (auto& x : gt.data()) x *= s;
    }
    if (tc.optimizer == OptimizerKind::adamw) {
      adamw_step<T>(weights, grads, state, rec.lr, hyper, mask);
    } else {
      lamb_step<T>(weights, grads, state, rec.lr, hyper, mask);
    }
    if (step % tc.eval_every == 0 || step == tc.steps) {
      restore();
      rec.eval_loss = evaluate(params, eval_set, tc.batch);
      if (!std::isfinite(*rec.eval_loss)) throw NumericError("non-finite eval loss at step " + std::to_string(step));
    }
    res.metrics.steps.push_back(rec);
    if (on_step && !on_step(rec)) break;
  }
  restore();
  return res;
}

}  // namespace laser
