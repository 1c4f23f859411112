#pragma once

#include <nlohmann/json.hpp>

#include <set>
#include <string>

#include "slim/errors.hpp"
#include "slim/performer.hpp"

namespace slim::detail {

inline const std::set<std::string>& model_config_keys() {
  static const std::set<std::string> keys{"L",     "d_model",     "d_ff",       "heads",
                                          "layers", "feature_dim", "vocab",      "feature_map",
                                          "block_size", "ln_eps"};
  return keys;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["L"] = c.seq_len;
  j["d_model"] = c.d_model;
  j["d_ff"] = c.d_ff;
  j["heads"] = c.heads;
  j["layers"] = c.layers;
  j["feature_dim"] = c.feature_dim;
  j["vocab"] = c.vocab;
  j["feature_map"] = c.feature_map.kind == FeatureMapKind::kSquare ? "square" : "exp";
  j["block_size"] = c.block_size;
  j["ln_eps"] = c.ln_eps;
  return j;
}

// Reads every model key from `j`; keys outside the model set are ignored here
// and must be checked by the caller.
inline ModelConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  for (const auto& key : model_config_keys()) {
    if (!j.contains(key)) throw ConfigError("config: missing key '" + key + "'");
  }
  auto count = [&](const char* key) -> std::size_t {
    const auto& v = j.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw ConfigError(std::string("config: '") + key + "' must be a non-negative integer");
    }
    return v.get<std::size_t>();
  };
  ModelConfig c;
  c.seq_len = count("L");
  c.d_model = count("d_model");
  c.d_ff = count("d_ff");
  c.heads = count("heads");
  c.layers = count("layers");
  c.feature_dim = count("feature_dim");
  c.vocab = count("vocab");
  c.block_size = count("block_size");
  const auto& fm = j.at("feature_map");
  if (!fm.is_string()) throw ConfigError("config: 'feature_map' must be a string");
  const std::string kind = fm.get<std::string>();
  if (kind == "square") {
    c.feature_map.kind = FeatureMapKind::kSquare;
  } else if (kind == "exp") {
    c.feature_map.kind = FeatureMapKind::kExp;
  } else {
    throw ConfigError("config: unknown feature_map '" + kind + "'");
  }
  if (!j.at("ln_eps").is_number()) throw ConfigError("config: 'ln_eps' must be a number");
  c.ln_eps = j.at("ln_eps").get<double>();
  c.validate();
  return c;
}

}  // namespace slim::detail
