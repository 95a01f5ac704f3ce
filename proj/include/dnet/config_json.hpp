#pragma once

#include <stdexcept>
#include <string>

#include <json.hpp>

#include "dnet/model.hpp"
#include "dnet/training.hpp"

// JSON (de)serialization for ModelConfig and SynthSpec. Field names match
// the documented schema exactly; unknown keys are rejected.

namespace dnet {

namespace detail_json {

inline void check_keys(const nlohmann::json& j,
                       std::initializer_list<const char*> allowed,
                       const char* what) {
  if (!j.is_object()) {
    throw std::invalid_argument(std::string(what) + ": expected a JSON object");
  }
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) {
      throw std::invalid_argument(std::string(what) + ": unknown field '" + key +
                                  "'");
    }
  }
}

}  // namespace detail_json

inline Variant variant_from_string(const std::string& s) {
  if (s == "dnet") return Variant::dnet;
  if (s == "dlknet") return Variant::dlknet;
  if (s == "dlknetr") return Variant::dlknetr;
  throw std::invalid_argument("unknown variant '" + s +
                              "' (expected dnet, dlknet or dlknetr)");
}

inline CombineMode combine_mode_from_string(const std::string& s) {
  if (s == "split_calibrate") return CombineMode::split_calibrate;
  if (s == "literal_sum") return CombineMode::literal_sum;
  throw std::invalid_argument("unknown combine_mode '" + s + "'");
}

inline SalienceBody salience_body_from_string(const std::string& s) {
  if (s == "none") return SalienceBody::none;
  if (s == "convblock") return SalienceBody::convblock;
  if (s == "dlk") return SalienceBody::dlk;
  if (s == "mixer") return SalienceBody::mixer;
  throw std::invalid_argument("unknown salience_body '" + s + "'");
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["variant"] = to_string(c.variant);
  j["base_width"] = c.base_width;
  j["in_channels"] = c.in_channels;
  j["num_classes"] = c.num_classes;
  j["num_stages"] = c.num_stages;
  j["blocks_per_stage"] = c.blocks_per_stage;
  j["mlp_ratio"] = c.mlp_ratio;
  j["combine_mode"] = to_string(c.combine_mode);
  j["salience_body"] = to_string(c.salience_body);
  j["dropout_rates"] = {c.dropout_rates[0], c.dropout_rates[1]};
  j["init_seed"] = c.init_seed;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  detail_json::check_keys(
      j,
      {"variant", "base_width", "in_channels", "num_classes", "num_stages",
       "blocks_per_stage", "mlp_ratio", "combine_mode", "salience_body",
       "dropout_rates", "init_seed"},
      "model config");
  ModelConfig c;
  if (j.contains("variant")) c.variant = variant_from_string(j.at("variant"));
  // DLK-Net and DLK-NETR have no Salience layer.
  if (c.variant != Variant::dnet) c.salience_body = SalienceBody::none;
  if (j.contains("base_width")) c.base_width = j.at("base_width");
  if (j.contains("in_channels")) c.in_channels = j.at("in_channels");
  if (j.contains("num_classes")) c.num_classes = j.at("num_classes");
  if (j.contains("num_stages")) c.num_stages = j.at("num_stages");
  if (j.contains("blocks_per_stage")) c.blocks_per_stage = j.at("blocks_per_stage");
  if (j.contains("mlp_ratio")) c.mlp_ratio = j.at("mlp_ratio");
  if (j.contains("combine_mode")) {
    c.combine_mode = combine_mode_from_string(j.at("combine_mode"));
  }
  if (j.contains("salience_body")) {
    c.salience_body = salience_body_from_string(j.at("salience_body"));
  }
  if (j.contains("dropout_rates")) {
    const auto& r = j.at("dropout_rates");
    if (!r.is_array() || r.size() != 2) {
      throw std::invalid_argument("model config: dropout_rates must be [r1, r2]");
    }
    c.dropout_rates = {r[0].get<double>(), r[1].get<double>()};
  }
  if (j.contains("init_seed")) c.init_seed = j.at("init_seed");
  c.validate();
  return c;
}

inline nlohmann::json synth_spec_to_json(const train::SynthSpec& s) {
  nlohmann::json j;
  j["extents"] = s.extents;
  j["num_spheres"] = s.num_spheres;
  j["radius_range"] = {s.radius_min, s.radius_max};
  j["noise_sigma"] = s.noise_sigma;
  j["seed"] = s.seed;
  j["num_classes"] = s.num_classes;
  return j;
}

inline train::SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  detail_json::check_keys(j,
                          {"extents", "num_spheres", "radius_range",
                           "noise_sigma", "seed", "num_classes"},
                          "synth spec");
  train::SynthSpec s;
  if (j.contains("extents")) {
    s.extents = j.at("extents").get<Extents>();
  } else {
    s.extents = {16, 16, 16};
  }
  if (j.contains("num_spheres")) s.num_spheres = j.at("num_spheres");
  if (j.contains("radius_range")) {
    const auto& r = j.at("radius_range");
    if (!r.is_array() || r.size() != 2) {
      throw std::invalid_argument("synth spec: radius_range must be [min, max]");
    }
    s.radius_min = r[0].get<int>();
    s.radius_max = r[1].get<int>();
  }
  if (j.contains("noise_sigma")) s.noise_sigma = j.at("noise_sigma");
  if (j.contains("seed")) s.seed = j.at("seed");
  if (j.contains("num_classes")) s.num_classes = j.at("num_classes");
  s.validate();
  return s;
}

}  // namespace dnet
