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

#include <algorithm>

#include "incepreg/preprocess.hpp"
#include "test_util.hpp"

using namespace incepreg;
using incepreg::testing::random_volume;

namespace {

Volume3D ellipsoid(std::size_t n) {
  Volume3D v({n, n, n});
  const double c = (n - 1) / 2.0;
  for (std::size_t z = 0; z < n; ++z)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double r = std::pow((x - c) / (0.4 * n), 2) + std::pow((y - c) / (0.35 * n), 2) +
                         std::pow((z - c) / (0.3 * n), 2);
        if (r < 1) v.at(x, y, z) = static_cast<float>(1.0 + x * 0.1 + std::sin(double(y + z)));
      }
  return v;
}

std::pair<double, double> masked_moments(const Volume3D& v, const BrainMask& m) {
  double s = 0, n = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (m.data[i]) s += v[i], n += 1;
  const double mean = s / n;
  double ss = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (m.data[i]) ss += (v[i] - mean) * (v[i] - mean);
  return {mean, std::sqrt(ss / n)};
}

std::vector<double> masked_values(const Volume3D& v, const BrainMask& m) {
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (m.data[i]) out.push_back(v[i]);
  std::sort(out.begin(), out.end());
  return out;
}

// Two-sample Kolmogorov-Smirnov statistic.
double ks(const std::vector<double>& a, const std::vector<double>& b) {
  std::size_t i = 0, j = 0;
  double d = 0;
  while (i < a.size() && j < b.size()) {
    const double t = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= t) ++i;
    while (j < b.size() && b[j] <= t) ++j;
    d = std::max(d, std::fabs(double(i) / a.size() - double(j) / b.size()));
  }
  return d;
}

double bin_width(const std::vector<double>& sorted, int bins = kDefaultHistogramBins) {
  return (sorted.back() - sorted.front()) / bins;
}

}  // namespace

TEST(BrainMask, EmptyVolumeIsAnError) {
  Volume3D v({8, 8, 8});
  try {
    brain_mask(v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "empty mask");
  }
}

TEST(BrainMask, SingleVoxelAndPhantomCount) {
  Volume3D v({8, 8, 8});
  v.at(3, 4, 5) = 5.0f;
  EXPECT_EQ(brain_mask(v).count(), 1u);
  const auto p = ellipsoid(24);
  std::size_t n = 0;
  for (float x : p.data()) n += x != 0.0f;
  EXPECT_EQ(brain_mask(p).count(), n);
}

TEST(ZNorm, TwoPointZScore) {
  Volume3D v({4, 1, 1});
  v[1] = 1.0f;
  v[2] = 3.0f;
  const auto z = znorm_brain(v, brain_mask(v));
  EXPECT_FLOAT_EQ(z[1], -1.0f);
  EXPECT_FLOAT_EQ(z[2], 1.0f);
  EXPECT_EQ(z[0], 0.0f);
  EXPECT_EQ(z[3], 0.0f);
}

TEST(ZNorm, ConstantRegionIsAnError) {
  Volume3D v({4, 4, 4});
  for (auto& x : v.data()) x = 2.0f;
  EXPECT_THROW(znorm_brain(v, brain_mask(v)), Error);
}

TEST(ZNorm, MomentsAndIdempotence) {
  Rng rng(1);
  auto v = random_volume(rng, {16, 16, 16}, 10, 500);
  for (std::size_t i = 0; i < v.size(); i += 7) v[i] = 0.0f;
  const auto before = v.data();
  const auto m = brain_mask(v);
  const auto z = znorm_brain(v, m);
  EXPECT_EQ(v.data(), before);  // input untouched
  const auto [mean, sd] = masked_moments(z, m);
  EXPECT_NEAR(mean, 0.0, 1e-6);
  EXPECT_NEAR(sd, 1.0, 1e-6);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!m.data[i]) {
      EXPECT_EQ(z[i], 0.0f);
    }
  const auto z2 = znorm_brain(z, m);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (m.data[i]) {
      EXPECT_NEAR(z2[i], z[i], 1e-6);
    }
}

TEST(HistogramMatch, SelfMatchIsIdentityWithinOneBin) {
  const auto v = ellipsoid(20);
  const auto m = brain_mask(v);
  const auto out = histogram_match(v, v, m, m);
  const double w = bin_width(masked_values(v, m));
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (m.data[i]) {
      EXPECT_NEAR(out[i], v[i], w + 1e-5);
    } else {
      EXPECT_EQ(out[i], v[i]);
    }
  }
}

TEST(HistogramMatch, ConstantShiftIsRemoved) {
  const auto ref = ellipsoid(20);
  const auto m = brain_mask(ref);
  auto src = ref;
  for (std::size_t i = 0; i < src.size(); ++i)
    if (m.data[i]) src[i] += 7.5f;
  const auto out = histogram_match(src, ref, m, m);
  const double w = bin_width(masked_values(ref, m));
  for (std::size_t i = 0; i < ref.size(); ++i)
    if (m.data[i]) {
      EXPECT_NEAR(out[i], ref[i], w + 1e-4);
    }
}

TEST(HistogramMatch, ReducesKsDistanceAndIsMonotone) {
  Rng rng(2);
  auto src = random_volume(rng, {16, 16, 16}, 0.1, 1.0);
  auto ref = random_volume(rng, {16, 16, 16}, 0.1, 1.0);
  for (auto& x : src.data()) x = x * x;
  for (auto& x : ref.data()) x = 3.0f + std::sqrt(x) * 2.0f;
  const auto ms = brain_mask(src), mr = brain_mask(ref);
  const auto out = histogram_match(src, ref, ms, mr);
  const auto vo = masked_values(out, ms), vr = masked_values(ref, mr), vs = masked_values(src, ms);
  EXPECT_LT(ks(vo, vr), ks(vs, vr));
  EXPECT_LT(ks(vo, vr), 0.05);
  for (std::size_t i = 0; i < src.size(); ++i)
    for (std::size_t j : {i + 1, i + 97})
      if (j < src.size() && src[i] < src[j]) {
        EXPECT_LE(out[i], out[j] + 1e-6);
      }
}

TEST(HistogramMatch, InvalidBins) {
  const auto v = ellipsoid(12);
  const auto m = brain_mask(v);
  EXPECT_THROW(histogram_match(v, v, m, m, 1), Error);
  EXPECT_NO_THROW(histogram_match(v, v, m, m, 2));
}
