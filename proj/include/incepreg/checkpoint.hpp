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

// Single-file checkpoint:
//
//   bytes 0..7   magic "INCPREG1"
//   bytes 8..15  manifest length L, little-endian u64
//   next L bytes JSON manifest
//   remainder    raw little-endian float32 arrays, at manifest offsets
//
// The manifest lists every array (name, shape, offset in floats from the
// start of the blob area), the run configuration and the step counter.
// Arrays are the parameters followed by Adam moments "adam.m.<name>" and
// "adam.v.<name>".

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "incepreg/config.hpp"
#include "incepreg/params.hpp"
#include "incepreg/volume.hpp"

namespace incepreg {

inline constexpr char kCheckpointMagic[8] = {'I', 'N', 'C', 'P', 'R', 'E', 'G', '1'};
inline constexpr const char* kCheckpointFile = "checkpoint.bin";

struct Checkpoint {
  TrainConfig config;
  ModelParams<float> params;  // fusion.* and backbone.*
  std::map<std::string, std::vector<float>> adam_m, adam_v;
  std::uint64_t step = 0;
  std::map<std::string, AffineTransform> affine_cache;  // by case id, when affine_first

  bool operator==(const Checkpoint& o) const {
    return config == o.config && params == o.params && adam_m == o.adam_m && adam_v == o.adam_v && step == o.step &&
           affine_matrices() == o.affine_matrices();
  }

  std::map<std::string, std::array<double, 12>> affine_matrices() const {
    std::map<std::string, std::array<double, 12>> m;
    for (const auto& [k, a] : affine_cache) m[k] = a.matrix3x4();
    return m;
  }
};

inline Checkpoint init_checkpoint(const TrainConfig& cfg) {
  cfg.validate();
  Checkpoint c;
  c.config = cfg;
  c.params = init_fusion_params<float>(cfg.fusion, cfg.seed);
  c.params.merge(init_backbone_params<float>(cfg.backbone, cfg.seed));
  for (const auto& [k, v] : c.params.items()) {
    c.adam_m[k].assign(v.numel(), 0.0f);
    c.adam_v[k].assign(v.numel(), 0.0f);
  }
  return c;
}

namespace ckpt_detail {

inline void put_le32(std::string& out, const float* v, std::size_t n) {
  const std::size_t at = out.size();
  out.resize(at + 4 * n);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + at, v, 4 * n);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t u = __builtin_bswap32(std::bit_cast<std::uint32_t>(v[i]));
      std::memcpy(out.data() + at + 4 * i, &u, 4);
    }
  }
}

inline std::vector<float> get_le32(const char* p, std::size_t n) {
  std::vector<float> v(n);
  std::memcpy(v.data(), p, 4 * n);
  if constexpr (std::endian::native != std::endian::little)
    for (auto& x : v) x = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(x)));
  return v;
}

}  // namespace ckpt_detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  Json manifest;
  manifest["format"] = "incepreg-checkpoint";
  manifest["version"] = 1;
  manifest["step"] = c.step;
  manifest["config"] = to_json(c.config);
  Json arrays = Json::array();
  std::string blob;
  auto add = [&](const std::string& name, const Shape& shape, const std::vector<float>& v) {
    arrays.push_back({{"name", name}, {"shape", shape}, {"offset", blob.size() / 4}, {"count", v.size()}});
    ckpt_detail::put_le32(blob, v.data(), v.size());
  };
  for (const auto& [k, t] : c.params.items()) add(k, t.shape(), std::vector<float>(t.values().begin(), t.values().end()));
  for (const auto& [k, v] : c.adam_m) add("adam.m." + k, {v.size()}, v);
  for (const auto& [k, v] : c.adam_v) add("adam.v." + k, {v.size()}, v);
  manifest["arrays"] = std::move(arrays);
  Json aff = Json::object();
  for (const auto& [id, a] : c.affine_cache) aff[id] = a.matrix3x4();
  manifest["affine"] = std::move(aff);

  const std::string m = manifest.dump();
  std::string out(kCheckpointMagic, 8);
  std::uint64_t len = m.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  out += m;
  out += blob;
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& source = "<memory>") {
  auto fail = [&](const std::string& why) { return Error("unreadable checkpoint " + source + ": " + why); };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw fail("bad magic");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  if (len > bytes.size() - 16) throw fail("truncated manifest");
  Json m;
  try {
    m = Json::parse(bytes.substr(16, len));
  } catch (const std::exception& e) {
    throw fail(std::string("manifest: ") + e.what());
  }
  const char* blob = bytes.data() + 16 + len;
  const std::size_t blob_floats = (bytes.size() - 16 - len) / 4;
  Checkpoint c;
  c.step = m.at("step").get<std::uint64_t>();
  c.config = config_from_json(m.at("config"));
  for (const auto& a : m.at("arrays")) {
    const auto name = a.at("name").get<std::string>();
    const auto shape = a.at("shape").get<Shape>();
    const auto off = a.at("offset").get<std::size_t>(), count = a.at("count").get<std::size_t>();
    if (off + count > blob_floats || shape_numel(shape) != count) throw fail("array " + name + " out of range");
    auto v = ckpt_detail::get_le32(blob + 4 * off, count);
    if (name.rfind("adam.m.", 0) == 0) {
      c.adam_m[name.substr(7)] = std::move(v);
    } else if (name.rfind("adam.v.", 0) == 0) {
      c.adam_v[name.substr(7)] = std::move(v);
    } else {
      c.params.add(name, Tensor<float>::from(shape, std::move(v)));
    }
  }
  if (m.contains("affine"))
    for (const auto& [id, v] : m["affine"].items()) c.affine_cache[id] = AffineTransform::from_matrix3x4(v.get<std::array<double, 12>>());
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    const auto bytes = serialize_checkpoint(c);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("cannot write checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

// Accepts the checkpoint file or a directory holding checkpoint.bin.
inline Checkpoint load_checkpoint(std::filesystem::path path) {
  if (std::filesystem::is_directory(path)) path /= kCheckpointFile;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("unreadable checkpoint " + path.string() + ": cannot open");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path.string());
}

}  // namespace incepreg
