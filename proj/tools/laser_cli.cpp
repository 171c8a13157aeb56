// SPDX-License-Identifier: Apache-2.0
// laser_cli: train, gradcheck, probe, overflow-demo and fit-scaling.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "laser/checkpoint.hpp"
#include "laser/checks.hpp"
#include "laser/config.hpp"
#include "laser/report.hpp"
#include "laser/train.hpp"

namespace fs = std::filesystem;
using namespace laser;

namespace {

enum Exit : int {
  kOk = 0,
  kCheckFailed = 1,
  kBadConfig = 2,
  kDataMissing = 3,
  kNumericAbort = 4,
  kBadCheckpoint = 5,
  kInternal = 6,
};

/// Error that already knows its exit code.
struct CliError : std::runtime_error {
  int code;
  std::string kind;
  CliError(int c, std::string k, const std::string& msg) : std::runtime_error(msg), code(c), kind(std::move(k)) {}
};

int report_error(int code, const std::string& kind, const std::string& message, const Json& extra = Json::object()) {
  Json err{{"schema_version", kReportSchemaVersion},
           {"kind", "error"},
           {"error", Json{{"code", code}, {"type", kind}, {"message", message}}}};
  for (auto it = extra.begin(); it != extra.end(); ++it) err[it.key()] = it.value();
  std::cerr << err.dump(2) << '\n';
  return code;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CliError(kInternal, "io", "cannot write '" + path.string() + "'");
  out << text;
}

void emit_json(const Json& j, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_text(out_path, j.dump(2) + "\n");
  }
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read data file '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw InputError("data file '" + path + "' is empty");
  return bytes;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string attention;
  std::string out;
  bool quiet = false;
};

ExperimentConfig resolve_config(const TrainArgs& a) {
  Json doc = a.config.empty() ? Json::object() : read_json_file(a.config);
  if (!doc.is_object()) throw ConfigError("config document must be a JSON object");
  for (const auto& s : a.sets) apply_override(doc, s);
  if (!a.attention.empty()) apply_override(doc, "attention.variant=" + a.attention);
  if (!a.out.empty()) apply_override(doc, "output.dir=" + a.out);
  return parse_experiment_config(doc);
}

template <Real T>
int run_training(const ExperimentConfig& cfg, const ByteCorpus& corpus, bool quiet) {
  const fs::path dir = cfg.output.dir;
  fs::create_directories(dir);
  const Json resolved = to_json(cfg);
  write_text(dir / "config.json", resolved.dump(2) + "\n");

  RunMetrics partial;
  const auto t0 = std::chrono::steady_clock::now();
  auto on_step = [&](const StepRecord& r) {
    partial.steps.push_back(r);
    if (!quiet && r.eval_loss) {
      std::fprintf(stderr, "step %zu loss %.4f grad_norm %.4f lr %.3g eval_loss %.4f\n", r.step, r.loss, r.grad_norm,
                   r.lr, *r.eval_loss);
    }
    return true;
  };
  TrainResult<T> res;
  try {
    res = train_loop<T>(cfg.model, cfg.train, corpus, on_step);
  } catch (const NumericError& e) {
    std::ostringstream csv;
    write_metrics_csv(csv, partial);
    write_text(dir / "metrics.csv", csv.str());
    const Json diag{{"schema_version", kReportSchemaVersion},
                    {"kind", "numeric_abort"},
                    {"message", e.what()},
                    {"steps_completed", partial.steps.size()},
                    {"config", resolved}};
    write_text(dir / "error.json", diag.dump(2) + "\n");
    return report_error(kNumericAbort, "numeric", e.what(), Json{{"diagnostics", (dir / "error.json").string()}});
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const RunMetrics& m = res.metrics;

  std::ostringstream csv;
  write_metrics_csv(csv, m);
  write_text(dir / "metrics.csv", csv.str());
  save_checkpoint((dir / "checkpoint.ckpt").string(), res.params, m.steps.size());

  const auto windows = corpus.eval_windows(cfg.train.seq_len);
  std::vector<int> probe_tokens;
  const std::size_t nb = std::min(cfg.train.batch, windows.size());
  for (std::size_t b = 0; b < nb; ++b) probe_tokens.insert(probe_tokens.end(), windows[b].begin(), windows[b].end());
  Json sat = to_json(saturation_report(res.params, std::span<const int>(probe_tokens), nb));
  sat["config"] = resolved;
  write_text(dir / "saturation.json", sat.dump(2) + "\n");

  const CheckReport checks = run_gradchecks(parse_scope("all"));
  Json gc = to_json(checks);
  gc["config"] = resolved;
  write_text(dir / "gradcheck.json", gc.dump(2) + "\n");

  Json files{{"config", "config.json"},       {"metrics", "metrics.csv"},     {"checkpoint", "checkpoint.ckpt"},
             {"saturation", "saturation.json"}, {"gradcheck", "gradcheck.json"}};
  if (cfg.output.plots) {
    std::vector<double> steps, loss, gnorm, esteps, eloss;
    for (const auto& r : m.steps) {
      steps.push_back(double(r.step));
      loss.push_back(r.loss);
      gnorm.push_back(r.grad_norm);
      if (r.eval_loss) {
        esteps.push_back(double(r.step));
        eloss.push_back(*r.eval_loss);
      }
    }
    write_text(dir / "loss.svg", svg_plot("Loss", "step", "loss",
                                          {PlotSeries{"train", steps, loss, "#1f77b4"},
                                           PlotSeries{"eval", esteps, eloss, "#d62728", true}}));
    write_text(dir / "grad_norm.svg",
               svg_plot("Gradient norm", "step", "global L2 norm", {PlotSeries{"grad_norm", steps, gnorm}}));
    files["loss_plot"] = "loss.svg";
    files["grad_norm_plot"] = "grad_norm.svg";
  }

  const auto final_eval = m.final_eval_loss();
  const Json summary{{"schema_version", kReportSchemaVersion},
                     {"kind", "train_run"},
                     {"created_at", utc_timestamp()},
                     {"config", resolved},
                     {"files", files},
                     {"steps", m.steps.size()},
                     {"final_train_loss", m.steps.back().loss},
                     {"final_eval_loss", final_eval ? Json(*final_eval) : Json(nullptr)},
                     {"uniform_loss", std::log(256.0)},
                     {"spikes", m.spikes(cfg.train.spike_window, cfg.train.spike_jump)},
                     {"gradcheck_passed", checks.all_passed()},
                     {"wall_seconds", seconds}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  if (!quiet) std::cout << summary.dump(2) << '\n';
  return kOk;
}

int cmd_train(const TrainArgs& a) {
  const ExperimentConfig cfg = resolve_config(a);
  if (cfg.model.vocab < 256) throw ConfigError("byte-level training needs model.vocab >= 256");
  const ByteCorpus corpus(read_bytes(cfg.data.corpus), cfg.train.eval_frac, cfg.train.seq_len);
  return cfg.train.dtype == DType::f32 ? run_training<float>(cfg, corpus, a.quiet)
                                       : run_training<double>(cfg, corpus, a.quiet);
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(const std::string& scope, const std::string& out, bool flip_softmax) {
  const auto scopes = parse_scope(scope);
  fault::flip_softmax_backward = flip_softmax;
  const CheckReport rep = run_gradchecks(scopes);
  fault::flip_softmax_backward = false;
  Json j = to_json(rep);
  j["scope"] = scope;
  emit_json(j, out);
  return rep.all_passed() ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeArgs {
  std::string checkpoint;
  std::string data;
  std::string config;
  std::vector<double> thresholds;
  std::size_t batch = 4;
  std::size_t seq_len = 0;
  double eval_frac = 0.02;
  std::string out;
};

template <Real T>
Json probe_with(const ProbeArgs& a) {
  const auto ck = load_checkpoint<T>(a.checkpoint);
  const ModelConfig& mc = ck.params.config();
  Json cfg_json;
  if (!a.config.empty()) {
    const ExperimentConfig want = parse_experiment_config(read_json_file(a.config));
    require_compatible(mc, want.model);
    cfg_json = to_json(want);
  } else {
    cfg_json = Json{{"model", to_json(mc)}, {"attention", to_json(mc.attention)}};
  }
  const std::size_t n = a.seq_len ? a.seq_len : mc.max_seq;
  if (n > mc.max_seq) throw ConfigError("--seq-len exceeds the checkpoint's max_seq");
  const ByteCorpus corpus(read_bytes(a.data), a.eval_frac, n);
  const auto windows = corpus.eval_windows(n);
  const std::size_t nb = std::min(a.batch, windows.size());
  std::vector<int> tokens;
  for (std::size_t b = 0; b < nb; ++b) tokens.insert(tokens.end(), windows[b].begin(), windows[b].end());
  for (int& t : tokens)
    if (std::size_t(t) >= mc.vocab) throw InputError("data byte " + std::to_string(t) + " is outside the vocabulary");
  auto thresholds = a.thresholds.empty() ? default_thresholds() : a.thresholds;
  std::sort(thresholds.begin(), thresholds.end());
  Json j = to_json(saturation_report(ck.params, std::span<const int>(tokens), nb, thresholds));
  j["checkpoint_step"] = ck.step;
  j["config"] = cfg_json;
  return j;
}

int cmd_probe(const ProbeArgs& a) {
  emit_json(probe_with<double>(a), a.out);
  return kOk;
}

// ---------------------------------------------------------------------------
// overflow-demo and fit-scaling

int cmd_overflow(const std::string& dtype, double scale, std::uint64_t seed, const std::string& out) {
  if (!(scale > 0) || !std::isfinite(scale)) throw ConfigError("--scale must be positive");
  const DType d = parse_dtype(dtype);
  const OverflowResult r = d == DType::f32 ? overflow_demo<float>(scale, seed) : overflow_demo<double>(scale, seed);
  Json j = to_json(r);
  j["seed"] = seed;
  emit_json(j, out);
  return kOk;
}

std::vector<std::pair<double, double>> read_points(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read points file '" + path + "'");
  std::vector<std::pair<double, double>> pts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'params,loss'");
    const std::string a = line.substr(0, comma), b = line.substr(comma + 1);
    std::size_t ia = 0, ib = 0;
    double x, y;
    try {
      x = std::stod(a, &ia);
      y = std::stod(b, &ib);
    } catch (const std::exception&) {
      if (pts.empty() && lineno == 1) continue;  // header row
      throw ConfigError("line " + std::to_string(lineno) + ": values are not numbers");
    }
    if (ia != a.size() || ib != b.size()) throw ConfigError("line " + std::to_string(lineno) + ": trailing characters");
    pts.emplace_back(x, y);
  }
  return pts;
}

int cmd_fit(const std::string& points, const std::string& svg, const std::string& out) {
  const auto pts = read_points(points);
  PowerLawFit fit;
  try {
    fit = power_law_fit(pts);
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  if (!svg.empty()) {
    PlotSeries data{"points", {}, {}, "#1f77b4", true};
    PlotSeries curve{"a n^b", {}, {}, "#d62728"};
    double lo = pts.front().first, hi = lo;
    for (const auto& [n, l] : pts) {
      data.x.push_back(n);
      data.y.push_back(l);
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    for (int i = 0; i <= 50; ++i) {
      const double n = lo * std::pow(hi / lo, i / 50.0);
      curve.x.push_back(n);
      curve.y.push_back(fit.a * std::pow(n, fit.b));
    }
    write_text(svg, svg_plot("Power-law fit", "parameters", "loss", {data, curve}, true));
  }
  emit_json(to_json(fit, pts.size()), out);
  return kOk;
}

int dispatch(const std::function<int()>& f) {
  try {
    return f();
  } catch (const CliError& e) {
    return report_error(e.code, e.kind, e.what());
  } catch (const ConfigError& e) {
    return report_error(kBadConfig, "config", e.what());
  } catch (const InputError& e) {
    return report_error(kDataMissing, "data", e.what());
  } catch (const NumericError& e) {
    return report_error(kNumericAbort, "numeric", e.what());
  } catch (const CheckpointError& e) {
    return report_error(kBadCheckpoint, "checkpoint", e.what());
  } catch (const std::exception& e) {
    return report_error(kInternal, "internal", e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LASER attention experiments: training, gradient checks and saturation reports"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a byte-level language model and write a report bundle");
  t->add_option("--config", train.config, "JSON experiment config");
  t->add_option("--set", train.sets, "Override a config key, e.g. --set train.lr=3e-4");
  t->add_option("--attention", train.attention, "Shorthand for --set attention.variant=...");
  t->add_option("--out", train.out, "Shorthand for --set output.dir=...");
  t->add_flag("--quiet", train.quiet, "No progress output");

  std::string scope = "all", gc_out;
  bool flip = false;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference and closed-form gradient checks");
  g->add_option("--scope", scope, "ops, attention, model or all")->capture_default_str();
  g->add_option("--out", gc_out, "Report path (default: stdout)");
  g->add_flag("--inject-softmax-fault", flip, "Negate the softmax backward rule (mutation fixture)")
      ->group("Testing");

  ProbeArgs probe;
  auto* p = app.add_subcommand("probe", "Attention saturation report for a checkpoint");
  p->add_option("--checkpoint", probe.checkpoint, "Checkpoint file")->required();
  p->add_option("--data", probe.data, "Byte corpus; windows come from its held-out tail")->required();
  p->add_option("--config", probe.config, "Experiment config the checkpoint must match");
  p->add_option("--threshold", probe.thresholds, "Fraction-below threshold (repeatable; default 1e-7 and 1e-3)");
  p->add_option("--batch", probe.batch, "Number of held-out windows")->capture_default_str();
  p->add_option("--seq-len", probe.seq_len, "Window length (default: the checkpoint's max_seq)");
  p->add_option("--eval-frac", probe.eval_frac, "Held-out fraction of the corpus")->capture_default_str();
  p->add_option("--out", probe.out, "Report path (default: stdout)");

  std::string dtype = "f32", ov_out;
  double ov_scale = 100.0;
  std::uint64_t ov_seed = 0;
  auto* o = app.add_subcommand("overflow-demo", "Naive vs shifted LASER evaluation at a given value scale");
  o->add_option("--dtype", dtype, "f32 or f64")->capture_default_str();
  o->add_option("--scale", ov_scale, "Largest value entry")->capture_default_str();
  o->add_option("--seed", ov_seed, "Input seed")->capture_default_str();
  o->add_option("--out", ov_out, "Report path (default: stdout)");

  std::string points, svg, fit_out;
  auto* f = app.add_subcommand("fit-scaling", "Power-law fit loss = a n^b on (params, loss) rows");
  f->add_option("--points", points, "CSV with rows 'params,loss'")->required();
  f->add_option("--svg", svg, "Optional log-log plot path");
  f->add_option("--out", fit_out, "Report path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error(kBadConfig, "usage", e.what());
  }

  if (t->parsed()) return dispatch([&] { return cmd_train(train); });
  if (g->parsed()) return dispatch([&] { return cmd_gradcheck(scope, gc_out, flip); });
  if (p->parsed()) return dispatch([&] { return cmd_probe(probe); });
  if (o->parsed()) return dispatch([&] { return cmd_overflow(dtype, ov_scale, ov_seed, ov_out); });
  if (f->parsed()) return dispatch([&] { return cmd_fit(points, svg, fit_out); });
  return kInternal;
}
