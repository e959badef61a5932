#pragma once

#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "seam/metrics.hpp"
#include "seam/trainer.hpp"

namespace seam {

/// Test-time CAM choice: `automatic` reads the PCM output for seam runs and the trunk otherwise.
enum class CamSourceChoice { automatic, trunk, pcm };

inline std::string to_string(CamSourceChoice c) {
  switch (c) {
    case CamSourceChoice::automatic: return "auto";
    case CamSourceChoice::trunk: return "trunk";
    case CamSourceChoice::pcm: return "pcm";
  }
  return "?";
}

inline CamSourceChoice parse_cam_source(const std::string& s) {
  if (s == "auto") return CamSourceChoice::automatic;
  if (s == "trunk") return CamSourceChoice::trunk;
  if (s == "pcm") return CamSourceChoice::pcm;
  throw ConfigError("infer.cam_source must be auto, trunk or pcm, got '" + s + "'");
}

inline CamSource resolve(CamSourceChoice c, TrainMode mode) {
  if (c == CamSourceChoice::trunk) return CamSource::trunk;
  if (c == CamSourceChoice::pcm) return CamSource::pcm;
  return mode == TrainMode::seam ? CamSource::pcm : CamSource::trunk;
}

struct DataConfig {
  std::size_t count = 500;
  std::size_t image_size = 64;
  std::uint64_t seed = 0;
  std::vector<std::string> classes = default_class_names();
};

struct EvalConfig {
  double equivariance_scale = 0.5;  // rescale rate of the equivariance probe
  std::vector<double> alphas = default_alpha_grid();
  std::size_t batch_size = 20;
};

/// Everything a command can be configured with. Serialized as a flat JSON object
/// with dotted keys ("train.steps"); nested objects are flattened on load.
struct RunConfig {
  DataConfig data;
  ModelDims model;
  TrainConfig train;
  InferenceConfig infer;
  CamSourceChoice cam_source = CamSourceChoice::automatic;
  EvalConfig eval;

  void validate() const {
    train.validate();
    try {
      infer.validate();
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
    if (data.count < 1) throw ConfigError("data.count must be >= 1");
    if (data.image_size < 32) throw ConfigError("data.image_size must be >= 32");
    if (data.classes.empty() || data.classes.size() > 254) throw ConfigError("data.classes must name 1..254 classes");
    if (!(eval.equivariance_scale > 0.0)) throw ConfigError("eval.equivariance_scale must be > 0");
    if (eval.alphas.empty()) throw ConfigError("eval.alphas must be non-empty");
    for (double a : eval.alphas)
      if (!(a > 0.0 && a < 1.0)) throw ConfigError("eval.alphas must lie in (0,1)");
    if (eval.batch_size < 1) throw ConfigError("eval.batch_size must be >= 1");
    for (auto c : model.channels)
      if (c < 1) throw ConfigError("model.channels must be positive");
    if (model.reduce_a < 1 || model.reduce_b < 1 || model.embed < 1) {
      throw ConfigError("model.reduce_a, model.reduce_b and model.embed must be positive");
    }
  }
};

namespace detail {

using json = nlohmann::ordered_json;

struct ConfigKey {
  std::string name;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

template <class T>
T json_as(const json& v, const std::string& key, const char* what) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_arithmetic_v<T>) {
      if (!v.is_number()) throw ConfigError("");
      if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) throw ConfigError("");
        }
      }
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects " + what + ", got " + v.dump());
  }
}

template <class T>
std::optional<T> json_optional(const json& v, const std::string& key, const char* what) {
  if (v.is_null()) return std::nullopt;
  return json_as<T>(v, key, what);
}

inline std::vector<double> json_numbers(const json& v, const std::string& key) {
  if (!v.is_array()) throw ConfigError("config key '" + key + "' expects an array of numbers, got " + v.dump());
  std::vector<double> out;
  for (const auto& e : v) out.push_back(json_as<double>(e, key, "an array of numbers"));
  return out;
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto num = [&](std::string name, auto member) {
      using T = std::remove_reference_t<decltype(member(std::declval<RunConfig&>()))>;
      const char* what = std::is_same_v<T, bool> ? "a boolean"
                         : std::is_integral_v<T> ? (std::is_unsigned_v<T> ? "a non-negative integer" : "an integer")
                                                 : "a number";
      k.push_back({name, [member](const RunConfig& c) { return json(member(const_cast<RunConfig&>(c))); },
                   [member, name, what](RunConfig& c, const json& v) { member(c) = json_as<T>(v, name, what); }});
    };
    auto opt = [&](std::string name, auto member) {
      using T = typename std::remove_reference_t<decltype(member(std::declval<RunConfig&>()))>::value_type;
      k.push_back({name,
                   [member](const RunConfig& c) {
                     const auto& o = member(const_cast<RunConfig&>(c));
                     return o ? json(*o) : json(nullptr);
                   },
                   [member, name](RunConfig& c, const json& v) { member(c) = json_optional<T>(v, name, "a number or null"); }});
    };
    num("data.count", [](RunConfig& c) -> auto& { return c.data.count; });
    num("data.image_size", [](RunConfig& c) -> auto& { return c.data.image_size; });
    num("data.seed", [](RunConfig& c) -> auto& { return c.data.seed; });
    k.push_back({"data.classes", [](const RunConfig& c) { return json(c.data.classes); },
                 [](RunConfig& c, const json& v) {
                   if (!v.is_array()) throw ConfigError("config key 'data.classes' expects an array of names");
                   c.data.classes.clear();
                   for (const auto& e : v) c.data.classes.push_back(json_as<std::string>(e, "data.classes", "names"));
                 }});
    k.push_back({"model.channels", [](const RunConfig& c) { return json(c.model.channels); },
                 [](RunConfig& c, const json& v) {
                   if (!v.is_array() || v.size() != 4) throw ConfigError("config key 'model.channels' expects 4 integers");
                   for (std::size_t i = 0; i < 4; ++i) {
                     c.model.channels[i] = json_as<std::size_t>(v[i], "model.channels", "4 positive integers");
                   }
                 }});
    num("model.reduce_a", [](RunConfig& c) -> auto& { return c.model.reduce_a; });
    num("model.reduce_b", [](RunConfig& c) -> auto& { return c.model.reduce_b; });
    num("model.embed", [](RunConfig& c) -> auto& { return c.model.embed; });
    k.push_back({"train.mode", [](const RunConfig& c) { return json(to_string(c.train.mode)); },
                 [](RunConfig& c, const json& v) {
                   try {
                     c.train.mode = parse_mode(json_as<std::string>(v, "train.mode", "a string"));
                   } catch (const ParameterError& e) {
                     throw ConfigError(e.what());
                   }
                 }});
    num("train.steps", [](RunConfig& c) -> auto& { return c.train.steps; });
    num("train.batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; });
    num("train.lr", [](RunConfig& c) -> auto& { return c.train.lr_init; });
    num("train.poly_gamma", [](RunConfig& c) -> auto& { return c.train.poly_gamma; });
    num("train.momentum", [](RunConfig& c) -> auto& { return c.train.sgd.momentum; });
    num("train.weight_decay", [](RunConfig& c) -> auto& { return c.train.sgd.weight_decay; });
    num("train.keep_fraction", [](RunConfig& c) -> auto& { return c.train.ohem.keep_fraction; });
    num("train.weight_cls", [](RunConfig& c) -> auto& { return c.train.weights.cls; });
    num("train.weight_er", [](RunConfig& c) -> auto& { return c.train.weights.er; });
    num("train.weight_ecr", [](RunConfig& c) -> auto& { return c.train.weights.ecr; });
    num("train.detach_ecr_targets", [](RunConfig& c) -> auto& { return c.train.detach_ecr_targets; });
    num("train.seed", [](RunConfig& c) -> auto& { return c.train.seed; });
    num("train.checkpoint_interval", [](RunConfig& c) -> auto& { return c.train.checkpoint_interval; });
    num("train.stop_after", [](RunConfig& c) -> auto& { return c.train.stop_after; });
    opt("transform.rescale", [](RunConfig& c) -> auto& { return c.train.transform.rescale; });
    num("transform.flip", [](RunConfig& c) -> auto& { return c.train.transform.flip; });
    opt("transform.rotation_max_deg", [](RunConfig& c) -> auto& { return c.train.transform.rotation_max_deg; });
    opt("transform.translation_px", [](RunConfig& c) -> auto& { return c.train.transform.translation_px; });
    num("transform.identity", [](RunConfig& c) -> auto& { return c.train.transform.identity; });
    num("infer.alpha", [](RunConfig& c) -> auto& { return c.infer.alpha; });
    k.push_back({"infer.scales", [](const RunConfig& c) { return json(c.infer.scales); },
                 [](RunConfig& c, const json& v) { c.infer.scales = json_numbers(v, "infer.scales"); }});
    num("infer.use_flip", [](RunConfig& c) -> auto& { return c.infer.use_flip; });
    k.push_back({"infer.cam_source", [](const RunConfig& c) { return json(to_string(c.cam_source)); },
                 [](RunConfig& c, const json& v) {
                   c.cam_source = parse_cam_source(json_as<std::string>(v, "infer.cam_source", "a string"));
                 }});
    num("eval.equivariance_scale", [](RunConfig& c) -> auto& { return c.eval.equivariance_scale; });
    k.push_back({"eval.alphas", [](const RunConfig& c) { return json(c.eval.alphas); },
                 [](RunConfig& c, const json& v) { c.eval.alphas = json_numbers(v, "eval.alphas"); }});
    num("eval.batch_size", [](RunConfig& c) -> auto& { return c.eval.batch_size; });
    return k;
  }();
  return keys;
}

inline void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it.value().is_object()) {
      flatten(it.value(), key, out);
    } else {
      out.emplace_back(key, it.value());
    }
  }
}

}  // namespace detail

inline std::vector<std::string> config_key_names() {
  std::vector<std::string> names;
  for (const auto& k : detail::config_keys()) names.push_back(k.name);
  return names;
}

/// Applies one dotted key. Unknown keys and mistyped values raise ConfigError.
inline void set_config_value(RunConfig& cfg, const std::string& key, const nlohmann::ordered_json& value) {
  for (const auto& k : detail::config_keys()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Applies a JSON object (flat dotted keys or nested sections).
inline void apply_config(RunConfig& cfg, const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::vector<std::pair<std::string, nlohmann::ordered_json>> flat;
  detail::flatten(j, "", flat);
  for (const auto& [k, v] : flat) set_config_value(cfg, k, v);
}

inline nlohmann::ordered_json to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& k : detail::config_keys()) j[k.name] = k.get(cfg);
  return j;
}

inline std::string config_text(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

inline RunConfig parse_config_text(const std::string& text, const std::string& origin = "config") {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(origin + ": " + e.what(), e.byte > 0 ? e.byte - 1 : 0);
  }
  RunConfig cfg;
  apply_config(cfg, j);
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  return parse_config_text(detail::read_file(path), path.string());
}

/// Parses a command-line "key=value" override. The value is read as JSON when it
/// parses, otherwise as a bare string.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::ordered_json v;
  try {
    v = nlohmann::ordered_json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    v = raw;
  }
  set_config_value(cfg, key, v);
}

}  // namespace seam
