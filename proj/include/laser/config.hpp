// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include <json.hpp>

#include "laser/train.hpp"

namespace laser {

using Json = nlohmann::ordered_json;

struct DataConfig {
  std::string corpus = "data/milton.txt";
};

struct OutputConfig {
  std::string dir = "out";
  bool plots = true;
};

/// Everything one experiment needs. `attention` is kept at the top level of
/// the JSON document and copied into `model.attention`.
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  OutputConfig output;

  void validate() const {
    model.validate();
    train.validate();
    if (train.seq_len > model.max_seq) {
      throw ConfigError("train.seq_len (" + std::to_string(train.seq_len) + ") exceeds model.max_seq (" +
                        std::to_string(model.max_seq) + ")");
    }
    if (data.corpus.empty()) throw ConfigError("data.corpus must name a file");
    if (output.dir.empty()) throw ConfigError("output.dir must name a directory");
  }
};

inline Json to_json(const AttentionSpec& a) {
  return Json{{"variant", std::string(variant_name(a.variant))},
              {"tau", a.tau},
              {"per_dim_temp", a.per_dim_temp},
              {"qk_norm", a.qk_norm},
              {"causal", a.causal},
              {"lambda_init", a.lambda_init}};
}

inline Json to_json(const ModelConfig& m) {
  return Json{{"layers", m.layers},       {"d_model", m.d_model}, {"mlp_hidden", m.mlp_hidden},
              {"heads", m.heads},         {"vocab", m.vocab},     {"max_seq", m.max_seq},
              {"tie_embeddings", m.tie_embeddings}, {"init_std", m.init_std}};
}

inline Json to_json(const TrainConfig& t) {
  return Json{{"optimizer", std::string(optimizer_name(t.optimizer))},
              {"lr", t.lr},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"eps", t.eps},
              {"weight_decay", t.weight_decay},
              {"warmup_frac", t.warmup_frac},
              {"steps", t.steps},
              {"batch", t.batch},
              {"seq_len", t.seq_len},
              {"seed", t.seed},
              {"dtype", std::string(dtype_name(t.dtype))},
              {"grad_clip", t.grad_clip},
              {"eval_every", t.eval_every},
              {"spike_window", t.spike_window},
              {"spike_jump", t.spike_jump}};
}

inline Json to_json(const ExperimentConfig& c) {
  return Json{{"model", to_json(c.model)},
              {"attention", to_json(c.model.attention)},
              {"train", to_json(c.train)},
              {"data", Json{{"corpus", c.data.corpus}, {"eval_frac", c.train.eval_frac}}},
              {"output", Json{{"dir", c.output.dir}, {"plots", c.output.plots}}}};
}

namespace detail {

inline std::string json_kind(const Json& j) {
  if (j.is_boolean()) return "a boolean";
  if (j.is_number_integer()) return "an integer";
  if (j.is_number()) return "a number";
  if (j.is_string()) return "a string";
  if (j.is_object()) return "an object";
  if (j.is_array()) return "an array";
  return "null";
}

/// Overlays `src` onto `dst`. Every key of `src` must already exist in `dst`
/// with a compatible type.
inline void overlay(Json& dst, const Json& src, const std::string& path) {
  if (!src.is_object()) throw ConfigError((path.empty() ? "config" : path) + " must be a JSON object");
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!dst.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    Json& slot = dst[it.key()];
    const Json& v = it.value();
    bool ok = false;
    if (slot.is_object()) {
      overlay(slot, v, key);
      continue;
    }
    if (slot.is_boolean()) ok = v.is_boolean();
    else if (slot.is_number_unsigned()) ok = v.is_number_unsigned();
    else if (slot.is_number()) ok = v.is_number();
    else if (slot.is_string()) ok = v.is_string();
    if (!ok) {
      const std::string want = slot.is_number_unsigned() ? "a non-negative integer" : json_kind(slot);
      throw ConfigError("config key '" + key + "' must be " + want + ", got " + json_kind(v));
    }
    slot = v;
  }
}

inline ModelConfig model_from_resolved(const Json& m, const Json& a) {
  ModelConfig c;
  c.layers = m["layers"];
  c.d_model = m["d_model"];
  c.mlp_hidden = m["mlp_hidden"];
  c.heads = m["heads"];
  c.vocab = m["vocab"];
  c.max_seq = m["max_seq"];
  c.tie_embeddings = m["tie_embeddings"];
  c.init_std = m["init_std"];
  c.attention.variant = parse_variant(a["variant"].get<std::string>());
  c.attention.tau = a["tau"];
  c.attention.per_dim_temp = a["per_dim_temp"];
  c.attention.qk_norm = a["qk_norm"];
  c.attention.causal = a["causal"];
  c.attention.lambda_init = a["lambda_init"];
  return c;
}

inline ExperimentConfig from_resolved(const Json& j) {
  ExperimentConfig c;
  c.model = model_from_resolved(j["model"], j["attention"]);
  const Json& t = j["train"];
  c.train.optimizer = parse_optimizer(t["optimizer"].get<std::string>());
  c.train.lr = t["lr"];
  c.train.beta1 = t["beta1"];
  c.train.beta2 = t["beta2"];
  c.train.eps = t["eps"];
  c.train.weight_decay = t["weight_decay"];
  c.train.warmup_frac = t["warmup_frac"];
  c.train.steps = t["steps"];
  c.train.batch = t["batch"];
  c.train.seq_len = t["seq_len"];
  c.train.seed = t["seed"];
  c.train.dtype = parse_dtype(t["dtype"].get<std::string>());
  c.train.grad_clip = t["grad_clip"];
  c.train.eval_every = t["eval_every"];
  c.train.spike_window = t["spike_window"];
  c.train.spike_jump = t["spike_jump"];
  c.data.corpus = j["data"]["corpus"];
  c.train.eval_frac = j["data"]["eval_frac"];
  c.output.dir = j["output"]["dir"];
  c.output.plots = j["output"]["plots"];
  return c;
}

}  // namespace detail

/// Parses a config document on top of the defaults. Unknown keys and
/// mistyped values are ConfigErrors; the result is validated.
inline ExperimentConfig parse_experiment_config(const Json& doc) {
  Json resolved = to_json(ExperimentConfig{});
  detail::overlay(resolved, doc, "");
  ExperimentConfig c;
  try {
    c = detail::from_resolved(resolved);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline Json parse_json_text(std::string_view text, std::string_view what) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string(what) + " is not valid JSON: " + e.what());
  }
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_json_text(ss.str(), "config file '" + path + "'");
}

/// Model and attention settings from their JSON objects, defaults filled in.
inline ModelConfig parse_model_config(const Json& model, const Json& attention) {
  Json m = to_json(ModelConfig{});
  Json a = to_json(AttentionSpec{});
  detail::overlay(m, model, "model");
  detail::overlay(a, attention, "attention");
  ModelConfig c;
  try {
    c = detail::model_from_resolved(m, a);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Applies `key=value` with a dotted key. The value is read as JSON when it
/// parses, otherwise as a string, so `train.lr=3e-4` and
/// `attention.variant=laser` both work.
inline void apply_override(Json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    Json& next = (*node)[part];
    if (next.is_null()) next = Json::object();
    if (!next.is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    node = &next;
    start = dot + 1;
  }
}

}  // namespace laser
