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

#include <gtest/gtest.h>

#include <set>

#include "incepreg/fusion.hpp"
#include "test_util.hpp"

using namespace incepreg;
using incepreg::testing::grad_check;
using incepreg::testing::random_tensor;

namespace {

std::array<Tensor<double>, 4> random_contrasts(Rng& rng, std::size_t n, bool grad = false) {
  return {random_tensor(rng, {1, n, n, n}, -1, 1, grad), random_tensor(rng, {1, n, n, n}, -1, 1, grad),
          random_tensor(rng, {1, n, n, n}, -1, 1, grad), random_tensor(rng, {1, n, n, n}, -1, 1, grad)};
}

// Weights + biases of the six convolutions, walked branch by branch.
std::size_t shape_walk(std::size_t cin, const InceptionConfig& c) {
  struct Conv {
    std::size_t in, out, k;
  };
  const Conv convs[] = {{cin, std::size_t(c.b1x1), 1},
                        {cin, std::size_t(c.b3x3_reduce), 1},
                        {std::size_t(c.b3x3_reduce), std::size_t(c.b3x3), 3},
                        {cin, std::size_t(c.b5x5_reduce), 1},
                        {std::size_t(c.b5x5_reduce), std::size_t(c.b5x5), 5},
                        {cin, std::size_t(c.pool_proj), 1}};
  std::size_t n = 0;
  for (const auto& cv : convs) n += cv.out * cv.in * cv.k * cv.k * cv.k + cv.out;
  return n;
}

}  // namespace

TEST(InceptionBlock, PreservesSpatialShapeAndCountsChannels) {
  Rng rng(1);
  const InceptionConfig c{4, 4, 8, 2, 4, 4};
  EXPECT_EQ(c.out_channels(), 20);
  ModelParams<double> p;
  init_inception(p, rng, "blk", 3, c);
  auto x = random_tensor(rng, {3, 16, 16, 16}, -1, 1, false);
  auto y = inception_block(x, p, "blk", c);
  EXPECT_EQ(y.shape(), (Shape{20, 16, 16, 16}));
  auto odd = inception_block(random_tensor(rng, {3, 5, 7, 6}, -1, 1, false), p, "blk", c);
  EXPECT_EQ(odd.shape(), (Shape{20, 5, 7, 6}));
}

TEST(InceptionBlock, ZeroWeightsGiveZeroOutput) {
  Rng rng(2);
  const InceptionConfig c{4, 4, 8, 2, 4, 4};
  ModelParams<double> p;
  init_inception(p, rng, "blk", 2, c);
  for (auto& [k, t] : p.items())
    for (auto& v : t.mutable_values()) v = 0.0;
  auto y = inception_block(random_tensor(rng, {2, 6, 6, 6}), p, "blk", c);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(InceptionBlock, ChannelMismatchIsAnError) {
  Rng rng(3);
  const InceptionConfig c;
  ModelParams<double> p;
  init_inception(p, rng, "blk", 2, c);
  EXPECT_ANY_THROW(inception_block(random_tensor(rng, {3, 4, 4, 4}), p, "blk", c));
  EXPECT_THROW((InceptionConfig{0, 1, 1, 1, 1, 1}.validate()), std::invalid_argument);
}

TEST(FuseContrasts, ShapeContractAndFiniteness) {
  Rng rng(4);
  const FusionConfig cfg;
  const auto p = init_fusion_params<float>(cfg, 7);
  std::array<Tensor<float>, 4> in;
  for (auto& t : in) {
    std::vector<float> v(32 * 32 * 32);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-2, 2));
    t = Tensor<float>::from({1, 32, 32, 32}, v);
  }
  auto y = fuse_contrasts(in, p, "moving", cfg);
  EXPECT_EQ(y.shape(), (Shape{1, 32, 32, 32}));
  for (float v : y.values()) EXPECT_TRUE(std::isfinite(v));
  in[2] = Tensor<float>::zeros({1, 32, 32, 31});
  EXPECT_THROW(fuse_contrasts(in, p, "moving", cfg), std::invalid_argument);
}

TEST(FuseContrasts, SwappingT1AndT2ChangesOutput) {
  Rng rng(5);
  const FusionConfig cfg;
  const auto p = init_fusion_params<double>(cfg, 11);
  auto in = random_contrasts(rng, 8);
  auto a = fuse_contrasts(in, p, "target", cfg);
  // kFusionOrder is T1-CE, T1, FLAIR, T2: swap slots 1 and 3.
  std::swap(in[1], in[3]);
  auto b = fuse_contrasts(in, p, "target", cfg);
  double diff = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::fabs(a[i] - b[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(FuseContrasts, PipelinesHaveDisjointParameters) {
  const auto p = init_fusion_params<float>(FusionConfig{}, 1);
  const auto mv = p.names("fusion.moving."), tg = p.names("fusion.target.");
  EXPECT_FALSE(mv.empty());
  EXPECT_EQ(mv.size(), tg.size());
  std::set<std::string> all(mv.begin(), mv.end());
  for (const auto& n : tg) EXPECT_FALSE(all.count(n));
  EXPECT_EQ(mv.size() + tg.size(), p.size());
}

TEST(FuseContrasts, ParamCountMatchesShapeWalk) {
  for (const FusionConfig& cfg :
       {FusionConfig{}, FusionConfig{{1, 1, 1, 1, 1, 1}, {2, 3, 4, 1, 2, 3}, false},
        FusionConfig{{4, 4, 8, 2, 4, 4}, {4, 8, 8, 2, 2, 2}, false}}) {
    const std::size_t in_ch = static_cast<std::size_t>(cfg.input_block.out_channels());
    const std::size_t m_ch = static_cast<std::size_t>(cfg.merge_block.out_channels());
    const std::size_t per = 4 * shape_walk(1, cfg.input_block) + shape_walk(4 * in_ch, cfg.merge_block) + m_ch + 1;
    EXPECT_EQ(fusion_param_count(cfg), 2 * per);
    EXPECT_EQ(init_fusion_params<float>(cfg, 3).count(), 2 * per);
  }
}

TEST(FuseContrasts, GradientsMatchFiniteDifferences) {
  Rng rng(6);
  const FusionConfig cfg;
  auto p = init_fusion_params<double>(cfg, 5);
  auto in = random_contrasts(rng, 6, true);
  auto f = [&] { return ops::sum(fuse_contrasts(in, p, "moving", cfg)); };
  auto r = grad_check(f, {p.at("fusion.moving.proj.weight"), p.at("fusion.moving.proj.bias")}, 1e-6, 64);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
  auto ri = grad_check(f, {in[0], in[1], in[2], in[3], p.at("fusion.moving.t1ce.b5x5.weight"),
                           p.at("fusion.moving.merge.b3x3.weight")},
                       1e-6, 24);
  EXPECT_LT(ri.max_rel_err, 1e-3) << ri.worst;
}
