#pragma once

// Run configuration as flat JSON with dotted keys, e.g.
//   {"seed": 0, "model.d_model": 32, "train.lr": 0.0008, "eval.iou": [0.3, 0.5, 0.7]}
// Unknown keys are rejected. A single seed drives initialization, dropout,
// shuffling and data generation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbln/data.hpp"
#include "cbln/errors.hpp"
#include "cbln/evaluation.hpp"
#include "cbln/model.hpp"
#include "cbln/training.hpp"

namespace cbln {

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  SyntheticSpec data;
  std::size_t train_count = 512;
  std::size_t test_count = 128;
  MetricSpec eval;

  // Copies of the run seed into the per-module configs.
  [[nodiscard]] TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }
  [[nodiscard]] SyntheticSpec data_spec() const {
    SyntheticSpec s = data;
    s.seed = seed;
    return s;
  }

  void validate() const {
    model.validate();
    train.validate();
    data_spec().validate();
    eval.validate();
    if (!(eval.nms_iou > 0.0 && eval.nms_iou <= 1.0)) throw ConfigError("eval.nms_iou must lie in (0, 1]");
  }

  [[nodiscard]] nlohmann::ordered_json to_json() const;
  void set(const std::string& key, const nlohmann::json& value);
  // "key=value"; the value is parsed as JSON, falling back to a plain string.
  void apply_override(const std::string& assignment);

  static RunConfig from_json(const nlohmann::json& flat);
  static RunConfig load(const std::filesystem::path& path);

  // Desk-scale defaults (the struct defaults).
  static RunConfig desk() { return RunConfig{}; }
  // Full-size hyperparameters; valid but far beyond desk-scale runtime.
  static RunConfig full_scale() {
    RunConfig c;
    c.model.encoder.d_model = 512;
    c.model.encoder.rnn_hidden = 512;
    c.model.encoder.d_video_in = 500;
    c.model.encoder.max_T = 200;
    c.model.encoder.max_N = 64;
    c.model.encoder.vocab_size = 10000;
    c.model.mcbl.d_boundary = 512;
    c.model.mcbl.d_context = 512;
    c.train.adam.lr = 8e-4;
    c.train.batch_size = 64;
    c.data.T = 200;
    c.data.D_v = 500;
    c.data.vocab_size = 10000;
    c.data.seg_max = 60;
    return c;
  }
};

namespace detail {

struct ConfigKey {
  const char* name;
  std::function<nlohmann::json(const RunConfig&)> get;
  std::function<void(RunConfig&, const nlohmann::json&)> put;
};

#define CBLN_KEY(NAME, EXPR)                                                                             \
  ConfigKey {                                                                                            \
    NAME, [](const RunConfig& c) { return nlohmann::json(c.EXPR); },                                      \
        [](RunConfig& c, const nlohmann::json& v) { c.EXPR = v.get<std::decay_t<decltype(c.EXPR)>>(); } \
  }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      CBLN_KEY("seed", seed),
      CBLN_KEY("model.d_model", model.encoder.d_model),
      CBLN_KEY("model.d_video_in", model.encoder.d_video_in),
      CBLN_KEY("model.vocab_size", model.encoder.vocab_size),
      CBLN_KEY("model.max_T", model.encoder.max_T),
      CBLN_KEY("model.max_N", model.encoder.max_N),
      CBLN_KEY("model.rnn_hidden", model.encoder.rnn_hidden),
      CBLN_KEY("model.local_scales", model.mcbl.local_scales),
      CBLN_KEY("model.global_scales", model.mcbl.global_scales),
      CBLN_KEY("model.d_boundary", model.mcbl.d_boundary),
      CBLN_KEY("model.d_context", model.mcbl.d_context),
      CBLN_KEY("model.dropout", model.mcbl.dropout),
      CBLN_KEY("model.ln_eps", model.mcbl.ln_eps),
      CBLN_KEY("model.use_contexts", model.mcbl.use_contexts),
      CBLN_KEY("model.sigmoid_per_head", model.mcbl.sigmoid_per_head),
      CBLN_KEY("train.lr", train.adam.lr),
      CBLN_KEY("train.beta1", train.adam.beta1),
      CBLN_KEY("train.beta2", train.adam.beta2),
      CBLN_KEY("train.adam_eps", train.adam.eps),
      CBLN_KEY("train.batch_size", train.batch_size),
      CBLN_KEY("train.epochs", train.epochs),
      CBLN_KEY("train.log_eps", train.loss.eps),
      CBLN_KEY("train.mask_invalid", train.loss.mask_invalid),
      CBLN_KEY("train.shuffle", train.shuffle),
      CBLN_KEY("data.T", data.T),
      CBLN_KEY("data.D_v", data.D_v),
      CBLN_KEY("data.vocab_size", data.vocab_size),
      CBLN_KEY("data.noise", data.noise),
      CBLN_KEY("data.N_min", data.N_min),
      CBLN_KEY("data.N_max", data.N_max),
      CBLN_KEY("data.seg_min", data.seg_min),
      CBLN_KEY("data.seg_max", data.seg_max),
      CBLN_KEY("data.seconds_per_frame", data.seconds_per_frame),
      CBLN_KEY("data.train_count", train_count),
      CBLN_KEY("data.test_count", test_count),
      CBLN_KEY("eval.n", eval.n),
      CBLN_KEY("eval.iou", eval.iou),
      CBLN_KEY("eval.nms_iou", eval.nms_iou),
      CBLN_KEY("eval.strict", eval.strict),
  };
  return keys;
}

#undef CBLN_KEY

}  // namespace detail

inline nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json out;
  for (const auto& key : detail::config_keys()) out[key.name] = key.get(*this);
  return out;
}

inline void RunConfig::set(const std::string& key, const nlohmann::json& value) {
  for (const auto& k : detail::config_keys()) {
    if (key != k.name) continue;
    try {
      k.put(*this, value);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + key + "' cannot take value " + value.dump() + ": " + e.what());
    }
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  set(key, value);
}

inline RunConfig RunConfig::from_json(const nlohmann::json& flat) {
  if (!flat.is_object()) throw ConfigError("config must be a JSON object of dotted keys");
  RunConfig c;
  for (const auto& [key, value] : flat.items()) c.set(key, value);
  return c;
}

inline RunConfig RunConfig::load(const std::filesystem::path& path) {
  return from_json(detail::parse_json(detail::read_file(path), path.string()));
}

}  // namespace cbln
