/******************************************************************************
 * Copyright 2026 The incepreg Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * 	http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 *****************************************************************************/

// Run configuration: TOML input ([train] [loss] [fusion] [backbone]
// [affine]) and JSON round-trip for checkpoints.

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>
#include <toml.hpp>

#include "incepreg/affine.hpp"
#include "incepreg/backbone.hpp"
#include "incepreg/fusion.hpp"
#include "incepreg/losses.hpp"

namespace incepreg {

enum class LrSchedule { kPoly, kConstant, kExponential };

inline const char* schedule_name(LrSchedule s) {
  switch (s) {
    case LrSchedule::kPoly: return "poly";
    case LrSchedule::kConstant: return "constant";
    case LrSchedule::kExponential: return "exponential";
  }
  return "?";
}

inline LrSchedule parse_schedule(const std::string& s) {
  if (s == "poly") return LrSchedule::kPoly;
  if (s == "constant") return LrSchedule::kConstant;
  if (s == "exponential") return LrSchedule::kExponential;
  throw std::invalid_argument("unknown lr_decay '" + s + "' (expected poly, constant or exponential)");
}

struct TrainConfig {
  int epochs = 1;
  int steps_per_epoch = 300;
  double lr_initial = 1e-4;
  LrSchedule lr_decay = LrSchedule::kPoly;
  double lr_power = 0.9;   // poly exponent
  double lr_gamma = 0.99;  // exponential factor per step
  std::uint64_t seed = 0;
  bool affine_first = false;
  bool loss_on_raw_contrasts = false;
  LossWeights loss;
  FusionConfig fusion;
  BackboneConfig backbone;
  AffineConfig affine;

  long total_steps() const { return static_cast<long>(epochs) * steps_per_epoch; }

  void validate() const {
    if (!(lr_initial > 0) || !std::isfinite(lr_initial)) throw std::invalid_argument("train config: lr_initial must be > 0");
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (steps_per_epoch < 0) throw std::invalid_argument("train config: steps_per_epoch must be >= 0");
    if (!(lr_power >= 0) || !(lr_gamma > 0 && lr_gamma <= 1))
      throw std::invalid_argument("train config: lr_power >= 0 and 0 < lr_gamma <= 1 required");
    loss.validate();
    fusion.validate();
    backbone.validate();
    affine.validate();
  }

  // Learning rate for 0-based step index; lr(0) == lr_initial.
  double lr_at(long step) const {
    switch (lr_decay) {
      case LrSchedule::kConstant: return lr_initial;
      case LrSchedule::kExponential: return lr_initial * std::pow(lr_gamma, static_cast<double>(step));
      case LrSchedule::kPoly: {
        const long total = std::max<long>(total_steps(), 1);
        const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
        return lr_initial * std::pow(1.0 - frac, lr_power);
      }
    }
    return lr_initial;
  }

  bool operator==(const TrainConfig&) const = default;
};

// ---------------------------------------------------------------------------
// JSON

using Json = nlohmann::json;

inline Json inception_to_json(const InceptionConfig& c) {
  return Json::array({c.b1x1, c.b3x3_reduce, c.b3x3, c.b5x5_reduce, c.b5x5, c.pool_proj});
}

inline InceptionConfig inception_from_ints(const std::vector<int>& v, const std::string& what) {
  if (v.size() != 6)
    throw std::invalid_argument(what + ": expected 6 branch widths [b1x1, b3x3_reduce, b3x3, b5x5_reduce, b5x5, pool_proj]");
  InceptionConfig c{v[0], v[1], v[2], v[3], v[4], v[5]};
  c.validate();
  return c;
}

inline Json to_json(const TrainConfig& c) {
  Json j;
  j["train"] = {{"epochs", c.epochs},
                {"steps_per_epoch", c.steps_per_epoch},
                {"lr_initial", c.lr_initial},
                {"lr_decay", schedule_name(c.lr_decay)},
                {"lr_power", c.lr_power},
                {"lr_gamma", c.lr_gamma},
                {"seed", c.seed},
                {"affine_first", c.affine_first},
                {"loss_on_raw_contrasts", c.loss_on_raw_contrasts}};
  j["loss"] = {{"w_mse", c.loss.w_mse}, {"w_diff", c.loss.w_diff}, {"w_edge", c.loss.w_edge}};
  j["fusion"] = {{"input_block", inception_to_json(c.fusion.input_block)},
                 {"merge_block", inception_to_json(c.fusion.merge_block)},
                 {"instance_norm", c.fusion.instance_norm}};
  const auto& b = c.backbone;
  j["backbone"] = {{"variant", variant_name(b.variant)}, {"embed_dim", b.embed_dim}, {"depths", b.depths},
                   {"heads", b.heads},  {"window", b.window},   {"patch", b.patch},
                   {"decoder", b.decoder}, {"mlp_ratio", b.mlp_ratio}};
  j["affine"] = {{"levels", c.affine.levels},
                 {"iterations", c.affine.iterations},
                 {"lr", c.affine.lr},
                 {"contrast", contrast_name(c.affine.contrast)}};
  return j;
}

inline Contrast parse_contrast(const std::string& s) {
  for (Contrast c : kFusionOrder)
    if (s == contrast_name(c)) return c;
  throw std::invalid_argument("unknown contrast '" + s + "' (expected t1, t1ce, t2 or flair)");
}

inline TrainConfig config_from_json(const Json& j) {
  TrainConfig c;
  if (j.contains("train")) {
    const auto& t = j["train"];
    c.epochs = t.value("epochs", c.epochs);
    c.steps_per_epoch = t.value("steps_per_epoch", c.steps_per_epoch);
    c.lr_initial = t.value("lr_initial", c.lr_initial);
    c.lr_decay = parse_schedule(t.value("lr_decay", std::string(schedule_name(c.lr_decay))));
    c.lr_power = t.value("lr_power", c.lr_power);
    c.lr_gamma = t.value("lr_gamma", c.lr_gamma);
    c.seed = t.value("seed", c.seed);
    c.affine_first = t.value("affine_first", c.affine_first);
    c.loss_on_raw_contrasts = t.value("loss_on_raw_contrasts", c.loss_on_raw_contrasts);
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    c.loss.w_mse = l.value("w_mse", c.loss.w_mse);
    c.loss.w_diff = l.value("w_diff", c.loss.w_diff);
    c.loss.w_edge = l.value("w_edge", c.loss.w_edge);
  }
  if (j.contains("fusion")) {
    const auto& f = j["fusion"];
    if (f.contains("input_block"))
      c.fusion.input_block = inception_from_ints(f["input_block"].get<std::vector<int>>(), "fusion.input_block");
    if (f.contains("merge_block"))
      c.fusion.merge_block = inception_from_ints(f["merge_block"].get<std::vector<int>>(), "fusion.merge_block");
    c.fusion.instance_norm = f.value("instance_norm", c.fusion.instance_norm);
  }
  if (j.contains("backbone")) {
    const auto& b = j["backbone"];
    auto& o = c.backbone;
    o.variant = parse_variant(b.value("variant", std::string(variant_name(o.variant))));
    o.embed_dim = b.value("embed_dim", o.embed_dim);
    if (b.contains("depths")) o.depths = b["depths"].get<std::vector<std::size_t>>();
    if (b.contains("heads")) o.heads = b["heads"].get<std::vector<std::size_t>>();
    if (b.contains("window")) {
      const auto w = b["window"];
      if (w.is_number()) {
        o.window.fill(w.get<std::size_t>());
      } else {
        const auto v = w.get<std::vector<std::size_t>>();
        if (v.size() != 3) throw std::invalid_argument("backbone.window: expected 3 sizes or a single size");
        o.window = {v[0], v[1], v[2]};
      }
    }
    o.patch = b.value("patch", o.patch);
    if (b.contains("decoder")) o.decoder = b["decoder"].get<std::vector<std::size_t>>();
    o.mlp_ratio = b.value("mlp_ratio", o.mlp_ratio);
  }
  if (j.contains("affine")) {
    const auto& a = j["affine"];
    c.affine.levels = a.value("levels", c.affine.levels);
    c.affine.iterations = a.value("iterations", c.affine.iterations);
    c.affine.lr = a.value("lr", c.affine.lr);
    c.affine.contrast = parse_contrast(a.value("contrast", std::string(contrast_name(c.affine.contrast))));
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// TOML: converted to the JSON shape above, so both share one schema.

namespace config_detail {

inline Json toml_to_json(const toml::node& n) {
  if (auto t = n.as_table()) {
    Json j = Json::object();
    for (const auto& [k, v] : *t) j[std::string(k.str())] = toml_to_json(v);
    return j;
  }
  if (auto a = n.as_array()) {
    Json j = Json::array();
    for (const auto& v : *a) j.push_back(toml_to_json(v));
    return j;
  }
  if (auto v = n.as_integer()) return v->get();
  if (auto v = n.as_floating_point()) return v->get();
  if (auto v = n.as_boolean()) return v->get();
  if (auto v = n.as_string()) return v->get();
  throw std::invalid_argument("config: unsupported TOML value type");
}

}  // namespace config_detail

inline TrainConfig parse_config_toml(std::string_view text, const std::string& source = "<string>") {
  toml::table tbl;
  try {
    tbl = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    throw std::invalid_argument("config " + source + ": " + std::string(e.description()));
  }
  static const char* kSections[] = {"train", "loss", "fusion", "backbone", "affine"};
  for (const auto& [k, v] : tbl) {
    bool known = false;
    for (const char* s : kSections) known |= k.str() == s;
    if (!known) throw std::invalid_argument("config " + source + ": unknown section [" + std::string(k.str()) + "]");
  }
  return config_from_json(config_detail::toml_to_json(tbl));
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_toml(ss.str(), path.string());
}

}  // namespace incepreg
