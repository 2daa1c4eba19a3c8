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

#include "incepreg/backbone.hpp"
#include "incepreg/losses.hpp"
#include "incepreg/warp.hpp"
#include "test_util.hpp"

using namespace incepreg;
using incepreg::testing::grad_check;
using incepreg::testing::random_tensor;

namespace {

Tensor<float> random_float(Rng& rng, Shape s) {
  std::vector<float> v(shape_numel(s));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return Tensor<float>::from(std::move(s), std::move(v));
}

BackboneConfig small_conv() {
  BackboneConfig c;
  c.variant = BackboneVariant::kConv;
  c.embed_dim = 4;
  c.decoder = {6, 4, 4};
  return c;
}

BackboneConfig small_swin() {
  BackboneConfig c;
  c.embed_dim = 4;
  c.heads = {1, 2};
  c.window = {2, 2, 2};
  c.decoder = {6, 4, 4};
  c.mlp_ratio = 2;
  return c;
}

template <class T>
void randomize_head(ModelParams<T>& p, std::uint64_t seed) {
  Rng rng(seed);
  for (const char* n : {"backbone.head.weight", "backbone.head.bias"})
    for (auto& v : p.at(n).mutable_values()) v = static_cast<T>(rng.uniform(-0.2, 0.2));
}

}  // namespace

TEST(Backbone, FullResolutionZeroFieldAt48) {
  Rng rng(1);
  for (auto variant : {BackboneVariant::kSwin, BackboneVariant::kConv}) {
    BackboneConfig cfg;
    cfg.variant = variant;
    const auto p = init_backbone_params<float>(cfg, 3);
    auto m = random_float(rng, {1, 48, 48, 48}), f = random_float(rng, {1, 48, 48, 48});
    auto u = backbone_forward(m, f, p, cfg);
    EXPECT_EQ(u.shape(), (Shape{3, 48, 48, 48})) << variant_name(variant);
    for (float v : u.values()) ASSERT_EQ(v, 0.0f);
  }
}

TEST(Backbone, PaddingIsCroppedForOddShapes) {
  Rng rng(2);
  const auto cfg = small_swin();
  auto p = init_backbone_params<float>(cfg, 4);
  randomize_head(p, 9);
  Volume3D a({11, 9, 13}), b({11, 9, 13});
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = float(rng.uniform()), b[i] = float(rng.uniform());
  const auto u = predict_displacement(a, b, p, cfg);
  EXPECT_TRUE(u.shape() == a.shape());
  bool nonzero = false;
  for (double v : u.data()) nonzero = nonzero || v != 0.0;
  EXPECT_TRUE(nonzero);
}

TEST(Backbone, EncoderStagesHalveResolution) {
  Rng rng(3);
  for (auto cfg : {small_swin(), small_conv()}) {
    const auto p = init_backbone_params<double>(cfg, 1);
    auto x = random_tensor(rng, {2, 16, 16, 16}, -1, 1, false);
    const auto feats = backbone_encode(x, p, cfg);
    ASSERT_EQ(feats.size(), 2u);
    EXPECT_EQ(feats[0].shape(), (Shape{4, 8, 8, 8}));
    EXPECT_EQ(feats[1].shape(), (Shape{8, 4, 4, 4}));
  }
}

TEST(Backbone, InitIsDeterministicAndSeedDependent) {
  const BackboneConfig cfg;
  const auto a = init_backbone_params<float>(cfg, 42), b = init_backbone_params<float>(cfg, 42);
  const auto c = init_backbone_params<float>(cfg, 43);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
  EXPECT_TRUE(a.all_finite());
  for (const auto& [name, t] : a.items()) {
    if (name.rfind("backbone.head.", 0) != 0) continue;
    for (float v : t.values()) EXPECT_EQ(v, 0.0f) << name;
  }
}

TEST(Backbone, ForwardIsDeterministic) {
  Rng rng(4);
  const auto cfg = small_swin();
  auto p = init_backbone_params<float>(cfg, 5);
  randomize_head(p, 6);
  auto m = random_float(rng, {1, 12, 12, 12}), f = random_float(rng, {1, 12, 12, 12});
  auto u1 = backbone_forward(m, f, p, cfg), u2 = backbone_forward(m, f, p, cfg);
  EXPECT_TRUE(std::equal(u1.values().begin(), u1.values().end(), u2.values().begin()));
}

TEST(Backbone, ConvFallbackGradientCheck12) {
  Rng rng(5);
  const auto cfg = small_conv();
  auto p = init_backbone_params<double>(cfg, 7);
  randomize_head(p, 8);
  auto m = random_tensor(rng, {1, 12, 12, 12}), f = random_tensor(rng, {1, 12, 12, 12});
  std::vector<Tensor<double>> inputs{m, f};
  for (auto& [name, t] : p.items()) inputs.push_back(t);
  auto r = grad_check([&] { return ops::mean(backbone_forward(m, f, p, cfg)); }, inputs, 1e-6, 6);
  EXPECT_LT(r.max_rel_err, 1e-3) << r.worst << " over " << r.checked;
}

TEST(Backbone, SwinGradientCheck) {
  Rng rng(6);
  const auto cfg = small_swin();
  auto p = init_backbone_params<double>(cfg, 9);
  randomize_head(p, 10);
  auto m = random_tensor(rng, {1, 8, 8, 8}), f = random_tensor(rng, {1, 8, 8, 8});
  std::vector<Tensor<double>> inputs{m, f};
  for (auto& [name, t] : p.items()) inputs.push_back(t);
  auto r = grad_check([&] { return ops::mean(backbone_forward(m, f, p, cfg)); }, inputs, 1e-6, 4);
  EXPECT_LT(r.max_rel_err, 1e-3) << r.worst << " over " << r.checked;
}

TEST(Backbone, SwappingInputsChangesFieldAfterOneStep) {
  Rng rng(7);
  const auto cfg = small_swin();
  auto p = init_backbone_params<double>(cfg, 11);
  auto m = random_tensor(rng, {1, 12, 12, 12}, -1, 1, false);
  auto f = random_tensor(rng, {1, 12, 12, 12}, -1, 1, false);
  Adam<double> adam(p);
  p.zero_grad();
  auto u = backbone_forward(m, f, p, cfg);
  total_loss(warp(m, u), f, u).total.backward();
  adam.step(p, 1e-3);
  auto a = backbone_forward(m, f, p, cfg), b = backbone_forward(f, m, p, cfg);
  double diff = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::fabs(a[i] - b[i]));
  EXPECT_GT(diff, 1e-8);
}

TEST(Backbone, ShiftAlternatesAndWindowClamps) {
  using backbone_detail::block_window;
  const auto [w0, s0] = block_window({8, 8, 8}, {4, 4, 4}, false);
  EXPECT_EQ(w0, (Dims3{4, 4, 4}));
  EXPECT_EQ(s0, (Dims3{0, 0, 0}));
  const auto [w1, s1] = block_window({8, 8, 8}, {4, 4, 4}, true);
  EXPECT_EQ(s1, (Dims3{2, 2, 2}));
  const auto [w2, s2] = block_window({8, 2, 4}, {4, 4, 4}, true);
  EXPECT_EQ(w2, (Dims3{4, 2, 4}));
  EXPECT_EQ(s2, (Dims3{2, 0, 0}));
}

TEST(Backbone, ShapeErrorsNameTheDimension) {
  const BackboneConfig cfg;
  const auto p = init_backbone_params<float>(cfg, 1);
  auto thin = Tensor<float>::zeros({1, 16, 1, 16});
  try {
    backbone_forward(thin, thin, p, cfg);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("height (y)"), std::string::npos) << e.what();
  }
  EXPECT_THROW(backbone_forward(Tensor<float>::zeros({1, 16, 16, 16}), Tensor<float>::zeros({1, 16, 16, 8}), p, cfg),
               std::invalid_argument);
  BackboneConfig bad;
  bad.heads = {3, 4};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_EQ(parse_variant("conv-fallback"), BackboneVariant::kConv);
  EXPECT_EQ(parse_variant("swin"), BackboneVariant::kSwin);
  EXPECT_ANY_THROW(parse_variant("unet"));
}
