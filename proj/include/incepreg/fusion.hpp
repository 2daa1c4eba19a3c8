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

// Multi-contrast fusion front-end. Each contrast passes through its own
// Inception block (with 1x1x1 dimension reductions); the four outputs are
// concatenated, merged by a further Inception block and projected to one
// channel by a 1x1x1 convolution. Moving and target studies use separate
// pipelines ("fusion.moving.*" and "fusion.target.*").

#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

#include "incepreg/ops.hpp"
#include "incepreg/params.hpp"
#include "incepreg/volume.hpp"

namespace incepreg {

struct InceptionConfig {
  int b1x1 = 2;
  int b3x3_reduce = 2;
  int b3x3 = 4;
  int b5x5_reduce = 1;
  int b5x5 = 1;
  int pool_proj = 1;

  int out_channels() const { return b1x1 + b3x3 + b5x5 + pool_proj; }
  void validate() const {
    for (int c : {b1x1, b3x3_reduce, b3x3, b5x5_reduce, b5x5, pool_proj})
      if (c < 1) throw std::invalid_argument("inception: every branch width must be >= 1");
  }
  bool operator==(const InceptionConfig&) const = default;
};

struct FusionConfig {
  InceptionConfig input_block{2, 2, 4, 1, 1, 1};   // 8 output channels per contrast
  InceptionConfig merge_block{4, 8, 8, 2, 2, 2};   // 16 output channels
  bool instance_norm = false;

  void validate() const {
    input_block.validate();
    merge_block.validate();
  }
  bool operator==(const FusionConfig&) const = default;
};

inline constexpr std::array<const char*, 2> kFusionPipelines{"moving", "target"};

// Parameter count of one Inception block, from the branch widths alone.
inline std::size_t inception_param_count(std::size_t cin, const InceptionConfig& c) {
  auto conv = [](std::size_t ci, std::size_t co, std::size_t k) { return ci * co * k * k * k + co; };
  return conv(cin, c.b1x1, 1) + conv(cin, c.b3x3_reduce, 1) + conv(c.b3x3_reduce, c.b3x3, 3) +
         conv(cin, c.b5x5_reduce, 1) + conv(c.b5x5_reduce, c.b5x5, 5) + conv(cin, c.pool_proj, 1);
}

inline std::size_t fusion_param_count(const FusionConfig& cfg) {
  const std::size_t per_pipeline = 4 * inception_param_count(1, cfg.input_block) +
                                   inception_param_count(4 * cfg.input_block.out_channels(), cfg.merge_block) +
                                   static_cast<std::size_t>(cfg.merge_block.out_channels()) + 1;
  return 2 * per_pipeline;
}

namespace fusion_detail {

template <class T>
void add_conv(ModelParams<T>& p, Rng& rng, const std::string& name, std::size_t cin, std::size_t cout,
              std::size_t k) {
  const std::size_t fan_in = cin * k * k * k;
  p.add(name + ".weight", uniform_init<T>(rng, {cout, cin, k, k, k}, fan_in));
  p.add(name + ".bias", uniform_init<T>(rng, {cout}, fan_in));
}

template <class T>
Tensor<T> conv_act(const ModelParams<T>& p, const std::string& name, const Tensor<T>& x, std::size_t pad,
                   bool instance_norm) {
  auto y = ops::conv3d(x, p.at(name + ".weight"), p.at(name + ".bias"), {1, pad});
  if (instance_norm) y = ops::instance_norm(y);
  return ops::relu(y);
}

}  // namespace fusion_detail

template <class T>
void init_inception(ModelParams<T>& p, Rng& rng, const std::string& prefix, std::size_t cin,
                    const InceptionConfig& c) {
  c.validate();
  using fusion_detail::add_conv;
  add_conv(p, rng, prefix + ".b1x1", cin, c.b1x1, 1);
  add_conv(p, rng, prefix + ".b3x3_reduce", cin, c.b3x3_reduce, 1);
  add_conv(p, rng, prefix + ".b3x3", c.b3x3_reduce, c.b3x3, 3);
  add_conv(p, rng, prefix + ".b5x5_reduce", cin, c.b5x5_reduce, 1);
  add_conv(p, rng, prefix + ".b5x5", c.b5x5_reduce, c.b5x5, 5);
  add_conv(p, rng, prefix + ".pool_proj", cin, c.pool_proj, 1);
}

// Four parallel branches, each ending in ReLU, concatenated on channels.
// Stride 1 with "same" padding keeps the spatial size.
template <class T>
Tensor<T> inception_block(const Tensor<T>& x, const ModelParams<T>& p, const std::string& prefix,
                          const InceptionConfig& c, bool instance_norm = false) {
  using fusion_detail::conv_act;
  c.validate();
  ops::detail::require_volume(x, "inception_block");
  const auto& w = p.at(prefix + ".b1x1.weight");
  if (w.dim(1) != x.dim(0) || w.dim(0) != static_cast<std::size_t>(c.b1x1))
    throw std::invalid_argument("inception_block " + prefix + ": parameters do not match input channels " +
                                std::to_string(x.dim(0)) + " / config");
  auto b1 = conv_act(p, prefix + ".b1x1", x, 0, instance_norm);
  auto b3 = conv_act(p, prefix + ".b3x3", conv_act(p, prefix + ".b3x3_reduce", x, 0, instance_norm), 1, instance_norm);
  auto b5 = conv_act(p, prefix + ".b5x5", conv_act(p, prefix + ".b5x5_reduce", x, 0, instance_norm), 2, instance_norm);
  auto bp = conv_act(p, prefix + ".pool_proj", ops::max_pool3(x), 0, instance_norm);
  return ops::concat<T>({b1, b3, b5, bp});
}

template <class T>
ModelParams<T> init_fusion_params(const FusionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<T> p;
  Rng rng(seed);
  const std::size_t merged = 4 * static_cast<std::size_t>(cfg.input_block.out_channels());
  for (const char* pipe : kFusionPipelines) {
    const std::string base = std::string("fusion.") + pipe;
    for (Contrast c : kFusionOrder) init_inception(p, rng, base + "." + contrast_name(c), 1, cfg.input_block);
    init_inception(p, rng, base + ".merge", merged, cfg.merge_block);
    fusion_detail::add_conv(p, rng, base + ".proj", cfg.merge_block.out_channels(), 1, 1);
  }
  return p;
}

// contrasts: four [1,D,H,W] tensors in kFusionOrder (T1-CE, T1, FLAIR, T2).
// Returns the fused single-channel image [1,D,H,W].
template <class T>
Tensor<T> fuse_contrasts(const std::array<Tensor<T>, 4>& contrasts, const ModelParams<T>& p,
                         const std::string& pipeline, const FusionConfig& cfg) {
  const std::string base = "fusion." + pipeline;
  std::vector<Tensor<T>> branches;
  for (std::size_t i = 0; i < 4; ++i) {
    if (contrasts[i].shape() != contrasts[0].shape())
      throw std::invalid_argument("fuse_contrasts: contrasts do not share a shape");
    branches.push_back(
        inception_block(contrasts[i], p, base + "." + contrast_name(kFusionOrder[i]), cfg.input_block, cfg.instance_norm));
  }
  auto merged = inception_block(ops::concat(branches), p, base + ".merge", cfg.merge_block, cfg.instance_norm);
  // Linear projection (bias, no activation) so fused intensities may be signed.
  return ops::conv3d(merged, p.at(base + ".proj.weight"), p.at(base + ".proj.bias"));
}

template <class T>
std::array<Tensor<T>, 4> study_tensors(const MultiContrastStudy& s) {
  s.validate();
  return {to_tensor<T>(s.get(kFusionOrder[0])), to_tensor<T>(s.get(kFusionOrder[1])),
          to_tensor<T>(s.get(kFusionOrder[2])), to_tensor<T>(s.get(kFusionOrder[3]))};
}

template <class T>
Tensor<T> fuse_contrasts(const MultiContrastStudy& study, const ModelParams<T>& p, const std::string& pipeline,
                         const FusionConfig& cfg) {
  return fuse_contrasts(study_tensors<T>(study), p, pipeline, cfg);
}

}  // namespace incepreg
