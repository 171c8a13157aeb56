// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "laser/attention.hpp"
#include "laser/errors.hpp"
#include "laser/graph.hpp"
#include "laser/ops.hpp"
#include "laser/tensor.hpp"

namespace laser {

/// Decoder-only transformer dimensions.
struct ModelConfig {
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t mlp_hidden = 256;
  std::size_t heads = 4;
  std::size_t vocab = 256;
  std::size_t max_seq = 128;
  AttentionSpec attention;
  bool tie_embeddings = false;
  double init_std = 0.02;

  std::size_t head_size() const { return heads ? d_model / heads : 0; }

  void validate() const {
    if (layers == 0) throw ConfigError("model.layers must be at least 1");
    if (heads == 0 || d_model % heads != 0) {
      throw ConfigError("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.heads (" +
                        std::to_string(heads) + ")");
    }
    if (d_model < 2) throw ConfigError("model.d_model must be at least 2");
    if (mlp_hidden == 0) throw ConfigError("model.mlp_hidden must be positive");
    if (vocab < 2) throw ConfigError("model.vocab must be at least 2");
    if (max_seq == 0) throw ConfigError("model.max_seq must be at least 1");
    if (!(init_std > 0.0)) throw ConfigError("model.init_std must be positive");
    attention.validate();
    if (attention.qk_norm && head_size() < 2) throw ConfigError("qk_norm needs a head size of at least 2");
  }
};

/// Named parameter tensors in a fixed order.
///
/// Names: tok_emb, pos_emb, layer{i}.{ln1.gain, ln1.bias, attn.w_q, attn.w_k,
/// attn.w_v, attn.w_o, [attn.w_q2, attn.w_k2, attn.lambda], [attn.temp_p],
/// [attn.q_gain, attn.q_bias, attn.k_gain, attn.k_bias], ln2.gain, ln2.bias,
/// mlp.w1, mlp.b1, mlp.w2, mlp.b2}, ln_f.gain, ln_f.bias, [out].
template <Real T>
class ModelParams {
 public:
  ModelParams() = default;

  /// Zero-filled parameters with the shapes `cfg` requires.
  explicit ModelParams(const ModelConfig& cfg) : config_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.d_model, s = cfg.head_size(), hid = cfg.mlp_hidden;
    add("tok_emb", cfg.vocab, d);
    add("pos_emb", cfg.max_seq, d);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = layer_prefix(l);
      add(p + "ln1.gain", 1, d);
      add(p + "ln1.bias", 1, d);
      add(p + "attn.w_q", d, d);
      add(p + "attn.w_k", d, d);
      add(p + "attn.w_v", d, d);
      add(p + "attn.w_o", d, d);
      if (cfg.attention.is_diff()) {
        add(p + "attn.w_q2", d, d);
        add(p + "attn.w_k2", d, d);
        add(p + "attn.lambda", 1, 1);
      }
      if (cfg.attention.per_dim_temp) add(p + "attn.temp_p", 1, s);
      if (cfg.attention.qk_norm) {
        add(p + "attn.q_gain", 1, s);
        add(p + "attn.q_bias", 1, s);
        add(p + "attn.k_gain", 1, s);
        add(p + "attn.k_bias", 1, s);
      }
      add(p + "ln2.gain", 1, d);
      add(p + "ln2.bias", 1, d);
      add(p + "mlp.w1", d, hid);
      add(p + "mlp.b1", 1, hid);
      add(p + "mlp.w2", hid, d);
      add(p + "mlp.b2", 1, d);
    }
    add("ln_f.gain", 1, d);
    add("ln_f.bias", 1, d);
    if (!cfg.tie_embeddings) add("out", d, cfg.vocab);
  }

  /// Gaussian init: std `init_std` for embeddings and projections,
  /// init_std / sqrt(2L) for W_O and the second MLP matrix; gains 1, biases
  /// 0, lambda = lambda_init, temp_p = log(e - 1) so that softplus(p) = 1.
  static ModelParams initialized(const ModelConfig& cfg, std::uint64_t seed) {
    ModelParams p(cfg);
    std::mt19937_64 rng(seed);
    const T std_main = T(cfg.init_std);
    const T std_resid = T(cfg.init_std / std::sqrt(2.0 * double(cfg.layers)));
    for (auto& [name, t] : p.entries_) {
      const std::string leaf = leaf_name(name);
      if (leaf == "gain" || leaf == "q_gain" || leaf == "k_gain") {
        for (auto& v : t.data()) v = T(1);
      } else if (leaf == "bias" || leaf == "b1" || leaf == "b2" || leaf == "q_bias" || leaf == "k_bias") {
        // zeros
      } else if (leaf == "lambda") {
        t[0] = T(cfg.attention.lambda_init);
      } else if (leaf == "temp_p") {
        for (auto& v : t.data()) v = T(std::log(std::exp(1.0) - 1.0));
      } else {
        const T sd = (leaf == "w_o" || leaf == "w2") ? std_resid : std_main;
        std::normal_distribution<double> dist(0.0, double(sd));
        for (auto& v : t.data()) v = T(dist(rng));
      }
    }
    return p;
  }

  const ModelConfig& config() const { return config_; }
  std::size_t count() const { return entries_.size(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

  std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }

  Tensor<T>& at(const std::string& name) { return entries_.at(index_of(name)).second; }
  const Tensor<T>& at(const std::string& name) const { return entries_.at(index_of(name)).second; }
  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  template <Real U>
  ModelParams<U> cast() const {
    ModelParams<U> out(config_);
    for (std::size_t i = 0; i < entries_.size(); ++i) out.entries()[i].second = entries_[i].second.template cast<U>();
    return out;
  }

  static std::string layer_prefix(std::size_t l) { return "layer" + std::to_string(l) + "."; }

 private:
  static std::string leaf_name(const std::string& name) {
    const auto dot = name.rfind('.');
    return dot == std::string::npos ? name : name.substr(dot + 1);
  }

  void add(std::string name, std::size_t r, std::size_t c) {
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), Tensor<T>::zeros(r, c));
  }

  ModelConfig config_;
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Parameters of a ModelParams placed on a graph as leaves (or constants).
template <Real T>
class BoundParams {
 public:
  BoundParams(Graph<T>& g, const ModelParams<T>& params, bool differentiable = true) {
    for (const auto& [name, t] : params.entries()) {
      vars_.emplace(name, differentiable ? g.leaf(t, name) : g.constant(t));
      order_.push_back(name);
    }
  }
  /// Binds existing graph nodes, in `params` order.
  BoundParams(const ModelParams<T>& params, std::span<const Var<T>> vars) {
    if (vars.size() != params.count()) throw ContractError("BoundParams: wrong number of variables");
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const auto& [name, t] = params.entries()[i];
      if (vars[i].shape() != t.shape()) throw DimensionError("BoundParams: shape mismatch for '" + name + "'");
      vars_.emplace(name, vars[i]);
      order_.push_back(name);
    }
  }
  const Var<T>& operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ContractError("parameter '" + name + "' not bound");
    return it->second;
  }
  std::optional<Var<T>> find(const std::string& name) const {
    auto it = vars_.find(name);
    return it == vars_.end() ? std::nullopt : std::optional<Var<T>>(it->second);
  }
  const std::vector<std::string>& order() const { return order_; }

 private:
  std::map<std::string, Var<T>> vars_;
  std::vector<std::string> order_;
};

/// Collects attention probabilities by layer during a forward pass.
template <Real T>
using LayerProbabilitySink = std::function<void(std::size_t layer, std::size_t head, std::size_t map,
                                                const Tensor<T>& probs)>;

/// Pre-norm decoder layer: x + MHA(LN1(x)), then + MLP(LN2(x)) with a
/// ReLU 2-layer MLP. `x` stacks sequences of length `seq_len`.
template <Real T>
Var<T> transformer_layer(const Var<T>& x, const BoundParams<T>& p, std::size_t layer, const ModelConfig& cfg,
                         std::size_t seq_len = 0, const LayerProbabilitySink<T>* sink = nullptr) {
  if (x.cols() != cfg.d_model) {
    throw DimensionError("transformer_layer: input width " + std::to_string(x.cols()) + " != d_model " +
                         std::to_string(cfg.d_model));
  }
  const std::string pre = ModelParams<T>::layer_prefix(layer);
  MhaParams<T> mha{p[pre + "attn.w_q"], p[pre + "attn.w_k"], p[pre + "attn.w_v"], p[pre + "attn.w_o"],
                   p.find(pre + "attn.w_q2"), p.find(pre + "attn.w_k2"), p.find(pre + "attn.lambda"), {}};
  mha.mods.temp_p = p.find(pre + "attn.temp_p");
  mha.mods.q_gain = p.find(pre + "attn.q_gain");
  mha.mods.q_bias = p.find(pre + "attn.q_bias");
  mha.mods.k_gain = p.find(pre + "attn.k_gain");
  mha.mods.k_bias = p.find(pre + "attn.k_bias");

  ProbabilitySink<T> head_sink;
  if (sink && *sink) {
    head_sink = [sink, layer](std::size_t h, std::size_t m, const Tensor<T>& probs) { (*sink)(layer, h, m, probs); };
  }
  const Var<T> h1 = layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"]);
  const Var<T> attn = multi_head_attention(h1, mha, cfg.heads, cfg.attention, seq_len, head_sink ? &head_sink : nullptr);
  const Var<T> x1 = add(x, attn);
  const Var<T> h2 = layer_norm(x1, p[pre + "ln2.gain"], p[pre + "ln2.bias"]);
  const Var<T> hidden = relu(add_rowvec(matmul(h2, p[pre + "mlp.w1"]), p[pre + "mlp.b1"]));
  const Var<T> mlp = add_rowvec(matmul(hidden, p[pre + "mlp.w2"]), p[pre + "mlp.b2"]);
  return add(x1, mlp);
}

template <Real T>
struct ForwardResult {
  Var<T> loss;
  Var<T> logits;  // (B*N) x vocab
};

/// Forward pass over `batch` sequences of equal length N laid out back to
/// back in `tokens`. The loss is the mean next-token cross-entropy over
/// positions 1..N-1 of every sequence.
template <Real T>
ForwardResult<T> lm_forward(Graph<T>& g, const BoundParams<T>& p, const ModelConfig& cfg, std::span<const int> tokens,
                            std::size_t batch = 1, const LayerProbabilitySink<T>* sink = nullptr) {
  if (batch == 0 || tokens.size() % batch != 0) throw InputError("token count is not a multiple of the batch size");
  const std::size_t n = tokens.size() / batch;
  if (n < 2) throw InputError("sequences need at least two tokens to score a next-token loss");
  if (n > cfg.max_seq) {
    throw InputError("sequence length " + std::to_string(n) + " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  for (int t : tokens) {
    if (t < 0 || std::size_t(t) >= cfg.vocab) {
      throw InputError("token " + std::to_string(t) + " outside vocabulary of size " + std::to_string(cfg.vocab));
    }
  }
  std::vector<int> positions(tokens.size());
  std::vector<int> targets(tokens.size(), -1);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < n; ++t) {
      positions[b * n + t] = int(t);
      if (t + 1 < n) targets[b * n + t] = tokens[b * n + t + 1];
    }
  Var<T> x = add(embedding(p["tok_emb"], tokens), embedding(p["pos_emb"], std::span<const int>(positions)));
  for (std::size_t l = 0; l < cfg.layers; ++l) x = transformer_layer(x, p, l, cfg, n, sink);
  const Var<T> xf = layer_norm(x, p["ln_f.gain"], p["ln_f.bias"]);
  const Var<T> logits = cfg.tie_embeddings ? matmul_nt(xf, p["tok_emb"]) : matmul(xf, p["out"]);
  const Var<T> loss = cross_entropy(logits, std::span<const int>(targets));
  return {loss, logits};
}

/// Loss and logits of a single sequence, evaluated without gradients.
template <Real T>
std::pair<T, Tensor<T>> lm_forward_loss(const ModelParams<T>& params, std::span<const int> tokens) {
  Graph<T> g;
  BoundParams<T> p(g, params, false);
  const auto r = lm_forward(g, p, params.config(), tokens, 1);
  return {r.loss.value()[0], r.logits.value()};
}

}  // namespace laser
