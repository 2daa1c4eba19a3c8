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

// Registration backbone: a TransMorph-style encoder/decoder that maps the
// pair (fused moving, fused fixed) to a dense displacement field.
//
//   input [2,D,H,W] --conv3--> skip0 (full resolution)
//         --patch embed (k=s=patch)--> stage 0 tokens --blocks--> feat 0
//         --patch merge--> stage 1 --blocks--> feat 1 ...
//   decoder: up2 + concat skip + conv3/ReLU per level, back to full res,
//   then a zero-initialised conv3 head producing 3 channels.
//
// The "swin" variant uses shifted-window attention blocks; "conv" replaces
// every block with conv3/ReLU and patch merging with a stride-2 conv.

#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "incepreg/attention.hpp"
#include "incepreg/ops.hpp"
#include "incepreg/params.hpp"
#include "incepreg/volume.hpp"

namespace incepreg {

enum class BackboneVariant { kSwin, kConv };

inline const char* variant_name(BackboneVariant v) { return v == BackboneVariant::kSwin ? "swin" : "conv-fallback"; }
inline BackboneVariant parse_variant(const std::string& s) {
  if (s == "swin") return BackboneVariant::kSwin;
  if (s == "conv-fallback" || s == "conv") return BackboneVariant::kConv;
  throw std::invalid_argument("unknown backbone variant '" + s + "' (expected swin or conv-fallback)");
}

struct BackboneConfig {
  std::size_t embed_dim = 16;
  std::vector<std::size_t> depths{2, 2};
  std::vector<std::size_t> heads{2, 4};
  Dims3 window{4, 4, 4};
  std::size_t patch = 2;
  // One width per decoder level, deepest first; the last entry is also the
  // width of the full-resolution skip convolution.
  std::vector<std::size_t> decoder{32, 16, 16};
  std::size_t mlp_ratio = 4;
  BackboneVariant variant = BackboneVariant::kSwin;

  std::size_t stages() const { return depths.size(); }
  std::size_t stage_channels(std::size_t i) const { return embed_dim << i; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("backbone config: " + m); };
    if (depths.empty()) fail("at least one stage is required");
    if (heads.size() != depths.size()) fail("depths and heads must have the same length");
    if (decoder.size() != depths.size() + 1) fail("decoder needs stages + 1 widths");
    if (embed_dim == 0 || mlp_ratio == 0) fail("embed_dim and mlp_ratio must be positive");
    if (patch == 0 || (patch & (patch - 1)) != 0) fail("patch size must be a power of two");
    for (std::size_t w : window)
      if (w == 0) fail("window size must be positive");
    for (std::size_t i = 0; i < depths.size(); ++i) {
      if (heads[i] == 0 || stage_channels(i) % heads[i] != 0)
        fail("stage " + std::to_string(i) + " channels not divisible by heads");
    }
    for (std::size_t w : decoder)
      if (w == 0) fail("decoder widths must be positive");
  }

  // Inputs are zero-padded at the end of each axis up to a multiple of this.
  std::size_t pad_multiple(std::size_t axis) const {
    const std::size_t down = patch << (stages() - 1);
    return variant == BackboneVariant::kSwin ? down * window[axis] : down;
  }

  bool operator==(const BackboneConfig&) const = default;
};

namespace backbone_detail {

inline std::shared_ptr<const WindowLayout> cached_layout(const Dims3& grid, const Dims3& window, const Dims3& shift) {
  static std::mutex mu;
  static std::map<std::tuple<Dims3, Dims3, Dims3>, std::shared_ptr<const WindowLayout>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_tuple(grid, window, shift);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto L = std::make_shared<const WindowLayout>(WindowLayout::make(grid, window, shift));
  cache.emplace(key, L);
  return L;
}

// Effective window and shift for one block: windows never exceed the grid,
// and shifting is skipped on axes that hold a single window.
inline std::pair<Dims3, Dims3> block_window(const Dims3& grid, const Dims3& window, bool shifted) {
  Dims3 w{}, s{};
  for (int a = 0; a < 3; ++a) {
    w[a] = std::min(window[a], grid[a]);
    s[a] = (shifted && grid[a] > w[a]) ? w[a] / 2 : 0;
  }
  return {w, s};
}

// Raster indices of the 2x2x2 neighbourhoods, neighbourhood-major, for
// patch merging: row m*8 + k of the gather is offset k of output token m.
inline std::vector<std::uint32_t> merge_index(const Dims3& grid) {
  const Dims3 g2{grid[0] / 2, grid[1] / 2, grid[2] / 2};
  std::vector<std::uint32_t> idx;
  idx.reserve(grid[0] * grid[1] * grid[2]);
  for (std::size_t z = 0; z < g2[0]; ++z)
    for (std::size_t y = 0; y < g2[1]; ++y)
      for (std::size_t x = 0; x < g2[2]; ++x)
        for (std::size_t dz = 0; dz < 2; ++dz)
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx)
              idx.push_back(static_cast<std::uint32_t>(((2 * z + dz) * grid[1] + 2 * y + dy) * grid[2] + 2 * x + dx));
  return idx;
}

template <class T>
void add_conv(ModelParams<T>& p, Rng& rng, const std::string& name, std::size_t cin, std::size_t cout,
              std::size_t k, bool bias = true) {
  const std::size_t fan_in = cin * k * k * k;
  p.add(name + ".weight", uniform_init<T>(rng, {cout, cin, k, k, k}, fan_in));
  if (bias) p.add(name + ".bias", uniform_init<T>(rng, {cout}, fan_in));
}

template <class T>
void add_linear(ModelParams<T>& p, Rng& rng, const std::string& name, std::size_t cin, std::size_t cout,
                bool bias = true) {
  p.add(name + ".weight", normal_init<T>(rng, {cout, cin}, 0.02));
  if (bias) p.add(name + ".bias", Tensor<T>::zeros({cout}));
}

template <class T>
void add_norm(ModelParams<T>& p, const std::string& name, std::size_t c) {
  p.add(name + ".weight", Tensor<T>::full({c}, T(1)));
  p.add(name + ".bias", Tensor<T>::zeros({c}));
}

template <class T>
Tensor<T> optional(const ModelParams<T>& p, const std::string& name) {
  return p.contains(name) ? p.at(name) : Tensor<T>{};
}

template <class T>
Tensor<T> conv_relu(const ModelParams<T>& p, const std::string& name, const Tensor<T>& x, ops::ConvSpec spec = {1, 1}) {
  return ops::relu(ops::conv3d(x, p.at(name + ".weight"), optional(p, name + ".bias"), spec));
}

template <class T>
Tensor<T> norm(const ModelParams<T>& p, const std::string& name, const Tensor<T>& x) {
  return ops::layer_norm(x, p.at(name + ".weight"), p.at(name + ".bias"));
}

template <class T>
Tensor<T> lin(const ModelParams<T>& p, const std::string& name, const Tensor<T>& x) {
  return ops::linear(x, p.at(name + ".weight"), optional(p, name + ".bias"));
}

// One shifted-window transformer block on raster-ordered tokens [N,C].
template <class T>
Tensor<T> swin_block(const Tensor<T>& x, const ModelParams<T>& p, const std::string& name, const Dims3& grid,
                     const Dims3& window, bool shifted, std::size_t heads) {
  const auto [w, s] = block_window(grid, window, shifted);
  auto L = cached_layout(grid, w, s);
  auto h = ops::gather_rows(norm(p, name + ".norm1", x), L->to_windows);
  auto qkv = lin(p, name + ".attn.qkv", h);
  auto a = window_attention(qkv, p.at(name + ".attn.bias_table"), L, heads);
  a = ops::gather_rows(lin(p, name + ".attn.proj", a), L->from_windows);
  auto y = ops::add(x, a);
  auto m = lin(p, name + ".mlp.fc2", ops::gelu(lin(p, name + ".mlp.fc1", norm(p, name + ".norm2", y))));
  return ops::add(y, m);
}

}  // namespace backbone_detail

template <class T>
ModelParams<T> init_backbone_params(const BackboneConfig& cfg, std::uint64_t seed) {
  using namespace backbone_detail;
  cfg.validate();
  ModelParams<T> p;
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t S = cfg.stages();
  const std::string b = "backbone.";
  add_conv(p, rng, b + "skip0", 2, cfg.decoder[S], 3);
  add_conv(p, rng, b + "embed.proj", 2, cfg.embed_dim, cfg.patch);
  if (cfg.variant == BackboneVariant::kSwin) add_norm(p, b + "embed.norm", cfg.embed_dim);
  const std::size_t table = (2 * cfg.window[0] - 1) * (2 * cfg.window[1] - 1) * (2 * cfg.window[2] - 1);
  for (std::size_t i = 0; i < S; ++i) {
    const std::string st = b + "stage" + std::to_string(i);
    const std::size_t C = cfg.stage_channels(i);
    if (i > 0) {
      if (cfg.variant == BackboneVariant::kSwin) {
        add_norm(p, st + ".merge.norm", 4 * C);
        add_linear(p, rng, st + ".merge.reduction", 4 * C, C, false);
      } else {
        add_conv(p, rng, st + ".merge.conv", C / 2, C, 2);
      }
    }
    for (std::size_t j = 0; j < cfg.depths[i]; ++j) {
      const std::string bl = st + ".block" + std::to_string(j);
      if (cfg.variant == BackboneVariant::kSwin) {
        add_norm(p, bl + ".norm1", C);
        add_linear(p, rng, bl + ".attn.qkv", C, 3 * C);
        p.add(bl + ".attn.bias_table", normal_init<T>(rng, {table, cfg.heads[i]}, 0.02));
        add_linear(p, rng, bl + ".attn.proj", C, C);
        add_norm(p, bl + ".norm2", C);
        add_linear(p, rng, bl + ".mlp.fc1", C, cfg.mlp_ratio * C);
        add_linear(p, rng, bl + ".mlp.fc2", cfg.mlp_ratio * C, C);
      } else {
        add_conv(p, rng, bl + ".conv", C, C, 3);
      }
    }
    if (cfg.variant == BackboneVariant::kSwin) add_norm(p, st + ".norm", C);
  }
  // Decoder level k joins the upsampled running feature with encoder stage
  // S-2-k; the final level joins skip0 at full resolution.
  std::size_t running = cfg.stage_channels(S - 1);
  for (std::size_t k = 0; k + 1 < S; ++k) {
    const std::size_t skip = cfg.stage_channels(S - 2 - k);
    add_conv(p, rng, b + "dec" + std::to_string(k), running + skip, cfg.decoder[k], 3);
    running = cfg.decoder[k];
  }
  add_conv(p, rng, b + "dec" + std::to_string(S - 1), running + cfg.decoder[S], cfg.decoder[S - 1], 3);
  p.add(b + "head.weight", Tensor<T>::zeros({3, cfg.decoder[S - 1], 3, 3, 3}));
  p.add(b + "head.bias", Tensor<T>::zeros({3}));
  return p;
}

// Encoder feature maps [C_i, d_i, h_i, w_i] for stages 0..S-1.
template <class T>
std::vector<Tensor<T>> backbone_encode(const Tensor<T>& x, const ModelParams<T>& p, const BackboneConfig& cfg) {
  using namespace backbone_detail;
  const std::size_t S = cfg.stages(), P = cfg.patch;
  const std::string b = "backbone.";
  auto e = ops::conv3d(x, p.at(b + "embed.proj.weight"), p.at(b + "embed.proj.bias"), {P, 0});
  Dims3 grid{e.dim(1), e.dim(2), e.dim(3)};
  std::vector<Tensor<T>> feats;
  if (cfg.variant == BackboneVariant::kConv) {
    for (std::size_t i = 0; i < S; ++i) {
      const std::string st = b + "stage" + std::to_string(i);
      if (i > 0) e = conv_relu(p, st + ".merge.conv", e, {2, 0});
      for (std::size_t j = 0; j < cfg.depths[i]; ++j) e = conv_relu(p, st + ".block" + std::to_string(j) + ".conv", e);
      feats.push_back(e);
    }
    return feats;
  }
  auto t = norm(p, b + "embed.norm", ops::to_tokens(e));
  for (std::size_t i = 0; i < S; ++i) {
    const std::string st = b + "stage" + std::to_string(i);
    const std::size_t C = cfg.stage_channels(i);
    if (i > 0) {
      ops::detail::require(grid[0] % 2 == 0 && grid[1] % 2 == 0 && grid[2] % 2 == 0,
                           "backbone: stage grid " + std::to_string(grid[0]) + "x" + std::to_string(grid[1]) + "x" +
                               std::to_string(grid[2]) + " cannot be halved");
      auto g = ops::gather_rows(t, merge_index(grid));
      grid = {grid[0] / 2, grid[1] / 2, grid[2] / 2};
      const std::size_t M = grid[0] * grid[1] * grid[2];
      t = lin(p, st + ".merge.reduction", norm(p, st + ".merge.norm", ops::reshape(g, {M, 8 * (C / 2)})));
    }
    for (std::size_t j = 0; j < cfg.depths[i]; ++j)
      t = swin_block(t, p, st + ".block" + std::to_string(j), grid, cfg.window, j % 2 == 1, cfg.heads[i]);
    feats.push_back(ops::from_tokens(norm(p, st + ".norm", t), grid[0], grid[1], grid[2]));
  }
  return feats;
}

// Displacement field [3,D,H,W] from fused moving and fixed images [1,D,H,W].
template <class T>
Tensor<T> backbone_forward(const Tensor<T>& moving, const Tensor<T>& fixed, const ModelParams<T>& p,
                           const BackboneConfig& cfg) {
  using namespace backbone_detail;
  cfg.validate();
  if (moving.rank() != 4 || moving.dim(0) != 1) throw std::invalid_argument("backbone: moving must be [1,D,H,W]");
  if (moving.shape() != fixed.shape())
    throw std::invalid_argument("backbone: moving " + shape_str(moving.shape()) + " and fixed " +
                                shape_str(fixed.shape()) + " differ");
  static const char* kAxis[3] = {"depth (z)", "height (y)", "width (x)"};
  std::size_t padded[3];
  for (std::size_t a = 0; a < 3; ++a) {
    const std::size_t n = moving.dim(a + 1), m = cfg.pad_multiple(a);
    if (n < 2) throw std::invalid_argument(std::string("backbone: input ") + kAxis[a] + " of size " + std::to_string(n) +
                                           " is too small");
    padded[a] = (n + m - 1) / m * m;
  }
  const std::size_t D = moving.dim(1), H = moving.dim(2), W = moving.dim(3), S = cfg.stages();
  auto x = ops::pad_end(ops::concat<T>({moving, fixed}), padded[0], padded[1], padded[2]);
  const std::string b = "backbone.";
  auto skip0 = conv_relu(p, b + "skip0", x);
  auto feats = backbone_encode(x, p, cfg);
  auto y = feats[S - 1];
  for (std::size_t k = 0; k + 1 < S; ++k) {
    const auto& skip = feats[S - 2 - k];
    auto up = ops::upsample2(y);
    ops::detail::require(up.dim(1) == skip.dim(1) && up.dim(2) == skip.dim(2) && up.dim(3) == skip.dim(3),
                         "backbone: decoder level " + std::to_string(k) + " resolution mismatch");
    y = conv_relu(p, b + "dec" + std::to_string(k), ops::concat<T>({up, skip}));
  }
  for (std::size_t s = cfg.patch; s > 1; s /= 2) y = ops::upsample2(y);
  ops::detail::require(y.dim(1) == skip0.dim(1) && y.dim(2) == skip0.dim(2) && y.dim(3) == skip0.dim(3),
                       "backbone: full-resolution skip mismatch");
  y = conv_relu(p, b + "dec" + std::to_string(S - 1), ops::concat<T>({y, skip0}));
  auto field = ops::conv3d(y, p.at(b + "head.weight"), p.at(b + "head.bias"), {1, 1});
  return ops::crop(field, D, H, W);
}

template <class T>
DisplacementField predict_displacement(const Volume3D& fused_moving, const Volume3D& fused_fixed,
                                       const ModelParams<T>& p, const BackboneConfig& cfg) {
  if (!(fused_moving.shape() == fused_fixed.shape()))
    throw std::invalid_argument("predict_displacement: moving " + fused_moving.shape().str() + " vs fixed " +
                                fused_fixed.shape().str());
  auto f = backbone_forward(to_tensor<T>(fused_moving), to_tensor<T>(fused_fixed), p, cfg);
  return to_field(f);
}

}  // namespace incepreg
