// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "laser/analysis.hpp"
#include "laser/config.hpp"

namespace laser {

inline constexpr int kReportSchemaVersion = 1;

/// JSON number, or null when the value is not finite.
inline Json finite_or_null(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

// ---------------------------------------------------------------------------
// Saturation report

struct HeadStats {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t map = 0;  // 1 for the second map of the diff variants
  ProbabilityStats stats;
};

struct SaturationReport {
  std::vector<double> thresholds;
  std::size_t seq_len = 0;
  std::vector<HeadStats> heads;  // ordered by (layer, head, map)
  ProbabilityStats overall;
};

/// Runs one forward pass over `batch` sequences laid out back to back in
/// `tokens` and histograms every attention probability matrix, with the
/// Frobenius norm of each row's softmax Jacobian.
template <Real T>
SaturationReport saturation_report(const ModelParams<T>& params, std::span<const int> tokens, std::size_t batch,
                                   std::vector<double> thresholds = default_thresholds()) {
  const ModelConfig& cfg = params.config();
  const std::size_t maps = cfg.attention.is_diff() ? 2 : 1;
  SaturationReport rep;
  rep.thresholds = thresholds;
  rep.overall = ProbabilityStats(thresholds);
  for (std::size_t l = 0; l < cfg.layers; ++l)
    for (std::size_t h = 0; h < cfg.heads; ++h)
      for (std::size_t m = 0; m < maps; ++m) rep.heads.push_back({l, h, m, ProbabilityStats(thresholds)});

  const LayerProbabilitySink<T> sink = [&](std::size_t l, std::size_t h, std::size_t m, const Tensor<T>& probs) {
    rep.seq_len = probs.rows();
    accumulate_probabilities(rep.heads[(l * cfg.heads + h) * maps + m].stats, probs, cfg.attention.causal, true, true);
  };
  Graph<T> g;
  BoundParams<T> p(g, params, false);
  lm_forward(g, p, cfg, tokens, batch, &sink);
  for (const auto& hs : rep.heads) rep.overall.merge(hs.stats);
  return rep;
}

inline Json to_json(const ProbabilityStats& s) {
  Json below = Json::array();
  for (std::size_t i = 0; i < s.thresholds.size(); ++i)
    below.push_back(Json{{"threshold", s.thresholds[i]}, {"fraction", s.fraction_below(i)}});
  return Json{{"total", s.total},
              {"fraction_below", below},
              {"buckets", s.buckets},
              {"jacobian_norm_mean", s.jacobian_norm_mean()}};
}

inline Json bucket_edges_json() {
  Json edges = Json::array();
  for (std::size_t k = 0; k < kBucketCount; ++k) edges.push_back(bucket_bounds(k).first);
  edges.push_back(1.0);
  return edges;
}

inline Json to_json(const SaturationReport& r) {
  Json heads = Json::array();
  for (const auto& h : r.heads) {
    Json j = to_json(h.stats);
    j["layer"] = h.layer;
    j["head"] = h.head;
    j["map"] = h.map;
    heads.push_back(j);
  }
  return Json{{"schema_version", kReportSchemaVersion},
              {"kind", "saturation_report"},
              {"thresholds", r.thresholds},
              {"seq_len", r.seq_len},
              {"bucket_edges", bucket_edges_json()},
              {"overall", to_json(r.overall)},
              {"heads", heads}};
}

// ---------------------------------------------------------------------------
// Overflow demonstration

struct OverflowResult {
  DType dtype = DType::f32;
  double scale = 0;
  bool naive_finite = false;
  bool tricked_finite = false;
  double naive_max_abs_dev = 0;
  double tricked_max_abs_dev = 0;
  double tricked_max_rel_err = 0;
};

/// Shifted long-double evaluation of causal LASER attention on one head:
/// out_ic = m_ic + log sum_j a_ij exp(v_jc - m_ic), m_ic = max_{j<=i} v_jc.
template <Real T>
std::vector<long double> laser_oracle(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  using Ld = long double;
  const std::size_t n = q.rows(), s = q.cols();
  std::vector<Ld> out(n * v.cols());
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Ld> logit(i + 1);
    Ld mx = -std::numeric_limits<Ld>::infinity();
    for (std::size_t j = 0; j <= i; ++j) {
      Ld dot = 0;
      for (std::size_t c = 0; c < s; ++c) dot += Ld(q(i, c)) * Ld(k(j, c));
      logit[j] = dot / std::sqrt(Ld(s));
      mx = std::max(mx, logit[j]);
    }
    Ld z = 0;
    for (auto& x : logit) z += (x = std::exp(x - mx));
    for (std::size_t c = 0; c < v.cols(); ++c) {
      Ld m = -std::numeric_limits<Ld>::infinity();
      for (std::size_t j = 0; j <= i; ++j) m = std::max(m, Ld(v(j, c)));
      Ld acc = 0;
      for (std::size_t j = 0; j <= i; ++j) acc += logit[j] / z * std::exp(Ld(v(j, c)) - m);
      out[i * v.cols() + c] = m + std::log(acc);
    }
  }
  return out;
}

/// Random causal single-head inputs with values spread over [0, scale]
/// (one entry equal to scale), run through the naive and the shifted LASER
/// forms at T.
template <Real T>
OverflowResult overflow_demo(double scale, std::uint64_t seed = 0, std::size_t n = 16, std::size_t s = 8) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<T> q({n, s}), k({n, s}), v({n, s});
  for (auto& x : q.data()) x = T(u(rng));
  for (auto& x : k.data()) x = T(u(rng));
  for (auto& x : v.data()) x = T(scale * 0.5 * (1.0 + u(rng)));
  v(0, 0) = T(scale);

  const AttentionSpec spec{Variant::laser};
  Graph<T> g;
  const AttentionInputs<T> in{g.constant(q), g.constant(k), g.constant(v), 1, std::nullopt, {}};
  const Tensor<T> naive = laser_attention_naive(in).value();
  const Tensor<T> tricked = laser_attention(in, spec).value();
  const auto oracle = laser_oracle(q, k, v);

  OverflowResult r;
  r.dtype = dtype_of<T>();
  r.scale = scale;
  r.naive_finite = naive.all_finite();
  r.tricked_finite = tricked.all_finite();
  for (std::size_t i = 0; i < oracle.size(); ++i) {
    const double o = double(oracle[i]);
    const double dn = std::abs(double(naive[i]) - o);
    const double dt = std::abs(double(tricked[i]) - o);
    r.naive_max_abs_dev =
        std::isfinite(dn) ? std::max(r.naive_max_abs_dev, dn) : std::numeric_limits<double>::infinity();
    r.tricked_max_abs_dev = std::max(r.tricked_max_abs_dev, dt);
    r.tricked_max_rel_err = std::max(r.tricked_max_rel_err, dt / std::max(std::abs(o), 1e-300));
  }
  return r;
}

inline Json to_json(const OverflowResult& r) {
  return Json{{"schema_version", kReportSchemaVersion},
              {"kind", "overflow_demo"},
              {"dtype", std::string(dtype_name(r.dtype))},
              {"scale", r.scale},
              {"naive", Json{{"finite", r.naive_finite}, {"max_abs_dev", finite_or_null(r.naive_max_abs_dev)}}},
              {"tricked",
               Json{{"finite", r.tricked_finite},
                    {"max_abs_dev", finite_or_null(r.tricked_max_abs_dev)},
                    {"max_rel_err", finite_or_null(r.tricked_max_rel_err)}}}};
}

inline Json to_json(const PowerLawFit& f, std::size_t points) {
  return Json{{"schema_version", kReportSchemaVersion},
              {"kind", "power_law_fit"},
              {"a", f.a},
              {"b", f.b},
              {"rms_log_residual", f.rms_log_residual},
              {"points", points}};
}

// ---------------------------------------------------------------------------
// SVG plots

struct PlotSeries {
  std::string label;
  std::vector<double> x, y;
  std::string color = "#1f77b4";
  bool markers = false;
};

/// Self-contained SVG line chart. With `log_axes` both axes are log10 and
/// non-positive points are dropped.
inline std::string svg_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                            const std::vector<PlotSeries>& series, bool log_axes = false) {
  constexpr double W = 640, H = 400, L = 70, R = 20, Tp = 40, B = 50;
  auto tx = [&](double v) { return log_axes ? std::log10(v) : v; };
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i]) || (log_axes && (s.x[i] <= 0 || s.y[i] <= 0))) continue;
      x0 = std::min(x0, tx(s.x[i]));
      x1 = std::max(x1, tx(s.x[i]));
      y0 = std::min(y0, tx(s.y[i]));
      y1 = std::max(y1, tx(s.y[i]));
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double v) { return L + (tx(v) - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double v) { return H - B - (tx(v) - y0) / (y1 - y0) * (H - Tp - B); };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return std::string(buf);
  };
  auto axis_value = [&](double t) { return log_axes ? std::pow(10.0, t) : t; };

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" + num(H) +
         "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"" + num(W / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" + title + "</text>\n";
  out += "<line x1=\"" + num(L) + "\" y1=\"" + num(H - B) + "\" x2=\"" + num(W - R) + "\" y2=\"" + num(H - B) +
         "\" stroke=\"black\"/>\n";
  out += "<line x1=\"" + num(L) + "\" y1=\"" + num(Tp) + "\" x2=\"" + num(L) + "\" y2=\"" + num(H - B) +
         "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
    const double sx = L + (W - L - R) * i / 4.0, sy = H - B - (H - Tp - B) * i / 4.0;
    out += "<text x=\"" + num(sx) + "\" y=\"" + num(H - B + 16) + "\" text-anchor=\"middle\">" +
           num(axis_value(fx)) + "</text>\n";
    out += "<text x=\"" + num(L - 6) + "\" y=\"" + num(sy + 4) + "\" text-anchor=\"end\">" + num(axis_value(fy)) +
           "</text>\n";
  }
  out += "<text x=\"" + num((L + W - R) / 2) + "\" y=\"" + num(H - 12) + "\" text-anchor=\"middle\">" + xlabel +
         "</text>\n";
  out += "<text x=\"16\" y=\"" + num((Tp + H - B) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
         num((Tp + H - B) / 2) + ")\">" + ylabel + "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i]) || (log_axes && (s.x[i] <= 0 || s.y[i] <= 0))) continue;
      pts += num(px(s.x[i])) + "," + num(py(s.y[i])) + " ";
      if (s.markers)
        out += "<circle cx=\"" + num(px(s.x[i])) + "\" cy=\"" + num(py(s.y[i])) + "\" r=\"3\" fill=\"" + s.color +
               "\"/>\n";
    }
    if (!s.markers)
      out += "<polyline fill=\"none\" stroke=\"" + s.color + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    out += "<text x=\"" + num(W - R - 150) + "\" y=\"" + num(Tp + 14 + 16 * double(k)) + "\" fill=\"" + s.color +
           "\">" + s.label + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace laser
