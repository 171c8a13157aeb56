// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "laser/analysis.hpp"
#include "laser/gradcheck.hpp"
#include "laser/model.hpp"
#include "laser/report.hpp"

namespace laser {

enum class CheckScope { ops, attention, model };

inline std::string_view scope_name(CheckScope s) {
  switch (s) {
    case CheckScope::ops: return "ops";
    case CheckScope::attention: return "attention";
    case CheckScope::model: return "model";
  }
  return "?";
}

inline std::vector<CheckScope> parse_scope(std::string_view s) {
  if (s == "all") return {CheckScope::ops, CheckScope::attention, CheckScope::model};
  for (CheckScope c : {CheckScope::ops, CheckScope::attention, CheckScope::model})
    if (scope_name(c) == s) return {c};
  throw ConfigError("unknown gradcheck scope '" + std::string(s) + "' (expected ops, attention, model or all)");
}

struct CheckResult {
  std::string scope;
  std::string name;
  std::string method;  // "finite_difference" or "closed_form"
  double tolerance = 0;
  double observed = 0;
  bool passed = false;
};

struct CheckReport {
  std::vector<CheckResult> checks;

  bool all_passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return !checks.empty();
  }
  std::vector<std::string> failed() const {
    std::vector<std::string> out;
    for (const auto& c : checks)
      if (!c.passed) out.push_back(c.name);
    return out;
  }
};

inline Json to_json(const CheckReport& r) {
  Json checks = Json::array();
  for (const auto& c : r.checks)
    checks.push_back(Json{{"scope", c.scope},
                          {"name", c.name},
                          {"method", c.method},
                          {"tolerance", c.tolerance},
                          {"observed", finite_or_null(c.observed)},
                          {"passed", c.passed}});
  return Json{{"schema_version", kReportSchemaVersion},
              {"kind", "gradcheck"},
              {"passed", r.all_passed()},
              {"failed", r.failed()},
              {"checks", checks}};
}

/// Parameters spread wider than the training init (std 0.5, gains near 1,
/// nonzero biases) so that every tensor receives a gradient well above
/// finite-difference noise.
template <Real T>
ModelParams<T> perturbed_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelConfig c = cfg;
  c.init_std = 0.5;
  auto p = ModelParams<T>::initialized(c, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& [name, t] : p.entries()) {
    if (name.ends_with("gain")) {
      for (auto& v : t.data()) v = T(1.0 + u(rng));
    } else if (name.ends_with("bias") || name.ends_with("b1") || name.ends_with("b2") || name.ends_with("temp_p")) {
      for (auto& v : t.data()) v += T(u(rng));
    }
  }
  return p;
}

/// Worst relative gradient error of the mean next-token loss of a model over
/// two random sequences, across all parameter tensors.
inline double model_gradient_error(const ModelConfig& cfg, std::uint64_t seed, double abs_floor = 0.0) {
  const auto params = perturbed_params<double>(cfg, seed);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, int(cfg.vocab) - 1);
  std::vector<int> tokens(2 * cfg.max_seq);
  for (auto& t : tokens) t = tok(rng);
  std::vector<Tensor<double>> inputs;
  for (const auto& e : params.entries()) inputs.push_back(e.second);
  const LossBuilder<double> build = [&](Graph<double>& g, const std::vector<Var<double>>& vars) {
    BoundParams<double> p(params, std::span<const Var<double>>(vars));
    return lm_forward(g, p, cfg, std::span<const int>(tokens), 2).loss;
  };
  return compare_with_finite_differences(build, inputs, 1e-5, abs_floor).max_rel_err;
}

/// The 2-layer, d=8, h=2, N=4, vocab=11 configuration used for model checks.
inline ModelConfig gradcheck_model_config(Variant v) {
  ModelConfig c;
  c.layers = 2;
  c.d_model = 8;
  c.mlp_hidden = 12;
  c.heads = 2;
  c.vocab = 11;
  c.max_seq = 4;
  c.attention.variant = v;
  return c;
}

/// Named model configurations covering every attention spec.
inline std::vector<std::pair<std::string, ModelConfig>> gradcheck_model_variants() {
  std::vector<std::pair<std::string, ModelConfig>> out;
  out.emplace_back("standard", gradcheck_model_config(Variant::standard));
  out.emplace_back("laser", gradcheck_model_config(Variant::laser));
  auto temp = gradcheck_model_config(Variant::laser);
  temp.attention.tau = 0.7;
  out.emplace_back("laser+temp", temp);
  auto pdt = gradcheck_model_config(Variant::laser);
  pdt.attention.per_dim_temp = true;
  out.emplace_back("laser+per_dim_temp", pdt);
  auto qkn = gradcheck_model_config(Variant::laser);
  qkn.attention.qk_norm = true;
  out.emplace_back("laser+qk_norm", qkn);
  auto std_qkn = gradcheck_model_config(Variant::standard);
  std_qkn.attention.qk_norm = true;
  std_qkn.attention.per_dim_temp = true;
  out.emplace_back("standard+per_dim_temp+qk_norm", std_qkn);
  out.emplace_back("diff", gradcheck_model_config(Variant::diff));
  out.emplace_back("diff_laser", gradcheck_model_config(Variant::diff_laser));
  return out;
}

namespace detail {

/// sum(out .* W) with a fixed random W, so every output entry matters.
inline Var<double> weighted_total(const Var<double>& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<double> w(out.shape());
  for (auto& x : w.data()) x = u(rng);
  return sum(mul(out, out.graph->constant(std::move(w))));
}

inline Tensor<double> uniform(std::mt19937_64& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t({r, c});
  for (auto& x : t.data()) x = u(rng);
  return t;
}

class CheckRunner {
 public:
  explicit CheckRunner(CheckReport& r) : report_(r) {}

  void fd(std::string_view scope, std::string name, const LossBuilder<double>& build,
          const std::vector<Tensor<double>>& inputs, double tol = 1e-6, double abs_floor = 0.0) {
    double err;
    try {
      err = compare_with_finite_differences(build, inputs, 1e-5, abs_floor).max_rel_err;
    } catch (const Error&) {
      err = std::numeric_limits<double>::infinity();
    }
    add(scope, std::move(name), "finite_difference", tol, err);
  }

  void add(std::string_view scope, std::string name, std::string method, double tol, double observed) {
    report_.checks.push_back({std::string(scope), std::move(name), std::move(method), tol, observed,
                              std::isfinite(observed) && observed <= tol});
  }

 private:
  CheckReport& report_;
};

inline void op_checks(CheckRunner& run) {
  constexpr std::string_view S = "ops";
  std::mt19937_64 rng(101);
  const auto a = uniform(rng, 3, 4), b = uniform(rng, 4, 5), c = uniform(rng, 5, 4), sq = uniform(rng, 3, 4);
  const auto row = uniform(rng, 1, 4), pos = uniform(rng, 3, 4, 0.2, 2.0), wide = uniform(rng, 4, 6, -3.0, 3.0);
  using V = std::vector<Var<double>>;
  auto check = [&](std::string name, std::vector<Tensor<double>> in, std::function<Var<double>(const V&)> f) {
    const LossBuilder<double> build = [f](Graph<double>&, const V& x) { return weighted_total(f(x), 7); };
    run.fd(S, std::move(name), build, in);
  };
  check("matmul", {a, b}, [](const V& x) { return matmul(x[0], x[1]); });
  check("matmul_nt", {a, c}, [](const V& x) { return matmul_nt(x[0], x[1]); });
  check("transpose", {a}, [](const V& x) { return transpose(x[0]); });
  check("add_sub_mul", {a, sq}, [](const V& x) { return mul(add(x[0], x[1]), sub(x[0], x[1])); });
  check("rowvec_broadcast", {a, row},
        [](const V& x) { return add(mul_rowvec(add_rowvec(x[0], x[1]), x[1]), sub_rowvec(x[0], x[1])); });
  check("exp", {a}, [](const V& x) { return exp(x[0]); });
  check("log", {pos}, [](const V& x) { return log(x[0]); });
  check("sigmoid", {wide}, [](const V& x) { return sigmoid(x[0]); });
  check("softplus", {wide}, [](const V& x) { return softplus(x[0]); });
  check("relu", {a}, [](const V& x) { return relu(x[0]); });
  check("row_softmax", {wide}, [](const V& x) { return row_softmax(x[0]); });
  const Tensor<double> cm = causal_mask<double>(4);
  check("row_softmax_causal", {uniform(rng, 4, 4, -3.0, 3.0)}, [cm](const V& x) { return row_softmax(x[0], &cm); });
  check("log_weighted_sum_exp", {uniform(rng, 4, 4), uniform(rng, 4, 3, -2.0, 2.0)}, [cm](const V& x) {
    return log_weighted_sum_exp(row_softmax(x[0], &cm), x[1], &cm);
  });
  check("layer_norm", {a, row, uniform(rng, 1, 4)}, [](const V& x) { return layer_norm(x[0], x[1], x[2]); });
  check("slice_concat", {a, sq}, [](const V& x) {
    const std::vector<Var<double>> cols = {slice(x[0], 0, 3, 1, 2), x[1]};
    const std::vector<Var<double>> rows = {slice(x[1], 1, 2, 0, 4), x[0]};
    return add(slice(concat_cols<double>(cols), 0, 3, 0, 4), slice(concat_rows<double>(rows), 0, 3, 0, 4));
  });
  const std::vector<int> toks = {2, 0, 2, 1};
  check("embedding", {uniform(rng, 3, 5)}, [toks](const V& x) { return embedding(x[0], std::span<const int>(toks)); });
  const std::vector<int> targets = {1, -1, 4, 0};
  run.fd(S, "cross_entropy",
         [targets](Graph<double>&, const V& x) { return cross_entropy(x[0], std::span<const int>(targets)); },
         {uniform(rng, 4, 5, -2.0, 2.0)});

  // Closed-form softmax Jacobian against the tape, one basis cotangent at a time.
  double worst = 0;
  for (std::size_t n = 2; n <= 8; ++n) {
    std::normal_distribution<double> z(0.0, 2.0);
    Tensor<double> logits({1, n});
    for (auto& x : logits.data()) x = z(rng);
    Graph<double> g0;
    const auto probs = row_softmax(g0.constant(logits)).value();
    const auto jac = softmax_jacobian<double>(probs.data()).matrix;
    for (std::size_t j = 0; j < n; ++j) {
      Graph<double> g;
      const auto x = g.leaf(logits);
      Tensor<double> seed({1, n});
      seed[j] = 1.0;
      const auto grads = g.backward_from(row_softmax(x), seed);
      for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(jac(j, i) - grads.at(x)[i]));
    }
  }
  run.add(S, "row_softmax.jacobian", "closed_form", 1e-12, worst);
}

/// d o_1 / d logit_11 on the N=2, d=1 instance via the tape.
inline double element_2x1_by_tape(Variant variant, double l11, double l12, double v1, double v2) {
  Graph<double> g;
  const auto logits = g.leaf(Tensor<double>::from_rows({{l11, l12}, {0.3, -0.2}}));
  const auto v = g.constant(Tensor<double>::from_rows({{v1}, {v2}}));
  const auto out = attention_from_logits(logits, v, variant);
  Tensor<double> seed({2, 1});
  seed[0] = 1.0;
  return g.backward_from(out, seed).at(logits)(0, 0);
}

inline void attention_checks(CheckRunner& run) {
  constexpr std::string_view S = "attention";
  std::mt19937_64 rng(202);
  const std::size_t n = 5, heads = 2, d = 6;
  const auto q = uniform(rng, n, d), k = uniform(rng, n, d), v = uniform(rng, n, d, -2.0, 2.0);
  using V = std::vector<Var<double>>;
  auto single = [&](std::string name, AttentionSpec spec, std::vector<Tensor<double>> extra = {}) {
    std::vector<Tensor<double>> in = {q, k, v};
    in.insert(in.end(), extra.begin(), extra.end());
    const LossBuilder<double> build = [spec](Graph<double>&, const V& x) {
      LogitModifiers<double> mods;
      std::size_t next = 3;
      if (spec.per_dim_temp) mods.temp_p = x[next++];
      if (spec.qk_norm) {
        mods.q_gain = x[next++];
        mods.q_bias = x[next++];
        mods.k_gain = x[next++];
        mods.k_bias = x[next++];
      }
      const AttentionInputs<double> in{x[0], x[1], x[2], heads, std::nullopt, mods};
      return weighted_total(attend(in, spec), 11);
    };
    run.fd(S, std::move(name), build, in, 1e-6, spec.qk_norm ? 1e-9 : 0.0);
  };
  single("standard", AttentionSpec{Variant::standard});
  single("laser", AttentionSpec{Variant::laser});
  single("laser_naive", AttentionSpec{Variant::laser_naive});
  AttentionSpec temp{Variant::laser};
  temp.tau = 0.6;
  single("laser+temp", temp);
  AttentionSpec pdt{Variant::laser};
  pdt.per_dim_temp = true;
  single("laser+per_dim_temp", pdt, {uniform(rng, 1, d / heads)});
  AttentionSpec qkn{Variant::standard};
  qkn.qk_norm = true;
  const std::size_t s = d / heads;
  single("standard+qk_norm", qkn,
         {uniform(rng, 1, s, 0.7, 1.3), uniform(rng, 1, s, -0.3, 0.3), uniform(rng, 1, s, 0.7, 1.3),
          uniform(rng, 1, s, -0.3, 0.3)});
  for (bool laser_mode : {false, true}) {
    const LossBuilder<double> build = [laser_mode](Graph<double>&, const V& x) {
      const DualAttentionInputs<double> in{x[0], x[1], x[2], x[3], x[4], heads, std::nullopt};
      return weighted_total(diff_attention(in, x[5], laser_mode), 13);
    };
    run.fd(S, laser_mode ? "diff_laser" : "diff", build,
           {q, k, uniform(rng, n, d), uniform(rng, n, d), v, Tensor<double>::scalar(0.4)});
  }

  double worst_std = 0, worst_laser = 0;
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  for (int i = 0; i < 50; ++i) {
    const double l11 = u(rng), l12 = u(rng), v1 = u(rng), v2 = u(rng);
    worst_std = std::max(worst_std, std::abs(standard_jacobian_element_2x1(l11 - l12, v1, v2) -
                                             element_2x1_by_tape(Variant::standard, l11, l12, v1, v2)));
    worst_laser = std::max(worst_laser, std::abs(laser_jacobian_element_2x1(l11 - l12, v1, v2) -
                                                 element_2x1_by_tape(Variant::laser, l11, l12, v1, v2)));
  }
  run.add(S, "standard_jacobian_element_2x1", "closed_form", 1e-12, worst_std);
  run.add(S, "laser_jacobian_element_2x1", "closed_form", 1e-10, worst_laser);
}

inline void model_checks(CheckRunner& run) {
  std::uint64_t seed = 300;
  for (const auto& [name, cfg] : gradcheck_model_variants()) {
    double err;
    try {
      err = model_gradient_error(cfg, ++seed, cfg.attention.qk_norm ? 1e-9 : 0.0);
    } catch (const Error&) {
      err = std::numeric_limits<double>::infinity();
    }
    run.add("model", "model." + name, "finite_difference", 1e-5, err);
  }
}

}  // namespace detail

/// Runs the finite-difference and closed-form suites for the given scopes.
inline CheckReport run_gradchecks(const std::vector<CheckScope>& scopes) {
  CheckReport report;
  detail::CheckRunner run(report);
  for (CheckScope s : scopes) {
    switch (s) {
      case CheckScope::ops: detail::op_checks(run); break;
      case CheckScope::attention: detail::attention_checks(run); break;
      case CheckScope::model: detail::model_checks(run); break;
    }
  }
  return report;
}

}  // namespace laser
