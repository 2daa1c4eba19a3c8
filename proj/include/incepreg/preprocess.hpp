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

// Intensity preprocessing: brain masks, masked z-scoring and masked
// CDF histogram matching. All statistics are accumulated in double.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "incepreg/volume.hpp"

namespace incepreg {

inline constexpr int kDefaultHistogramBins = 256;

// True where |value| > threshold. Skull-stripped inputs have an exact-zero
// background, so the default threshold is 0.
inline BrainMask brain_mask(const Volume3D& vol, float threshold = 0.0f) {
  BrainMask m{vol.shape(), std::vector<unsigned char>(vol.size(), 0)};
  std::size_t n = 0;
  for (std::size_t i = 0; i < vol.size(); ++i) {
    const bool in = std::fabs(vol[i]) > threshold;
    m.data[i] = in;
    n += in;
  }
  if (n == 0) throw Error("empty mask");
  return m;
}

inline void check_mask(const Volume3D& vol, const BrainMask& mask) {
  if (!(mask.shape == vol.shape()) || mask.data.size() != vol.size())
    throw std::invalid_argument("mask shape " + mask.shape.str() + " does not match volume " + vol.shape().str());
}

// Subtract the masked mean and divide by the masked (population) standard
// deviation; background is set to zero.
inline Volume3D znorm_brain(const Volume3D& vol, const BrainMask& mask) {
  check_mask(vol, mask);
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < vol.size(); ++i)
    if (mask.data[i]) {
      sum += vol[i];
      ++n;
    }
  if (n < 2) throw Error("constant region");
  const double mean = sum / static_cast<double>(n);
  double ss = 0;
  for (std::size_t i = 0; i < vol.size(); ++i)
    if (mask.data[i]) ss += (vol[i] - mean) * (vol[i] - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n));
  if (!(sd > 0) || sd <= 1e-12 * std::max(1.0, std::fabs(mean))) throw Error("constant region");
  std::vector<float> out(vol.size(), 0.0f);
  for (std::size_t i = 0; i < vol.size(); ++i)
    if (mask.data[i]) out[i] = static_cast<float>((vol[i] - mean) / sd);
  return vol.like(std::move(out));
}

namespace detail {

// Piecewise-linear empirical CDF over `bins` equal-width bins.
struct BinnedCdf {
  double lo = 0, width = 1;
  std::vector<double> cdf;  // cdf[k] = fraction of samples below edge k, size bins + 1

  BinnedCdf(const std::vector<double>& samples, int bins) {
    const auto [mn, mx] = std::minmax_element(samples.begin(), samples.end());
    lo = *mn;
    width = (*mx - *mn) / bins;
    if (!(width > 0)) width = 1;  // degenerate: all samples identical
    std::vector<double> hist(bins, 0.0);
    for (double v : samples) hist[bin_of(v, bins)] += 1.0;
    cdf.assign(bins + 1, 0.0);
    for (int k = 0; k < bins; ++k) cdf[k + 1] = cdf[k] + hist[k] / static_cast<double>(samples.size());
    cdf[bins] = 1.0;
  }

  int bins() const { return static_cast<int>(cdf.size()) - 1; }

  static int clamp_bin(long k, int bins) { return static_cast<int>(std::clamp<long>(k, 0, bins - 1)); }
  int bin_of(double v, int nbins) const { return clamp_bin(static_cast<long>(std::floor((v - lo) / width)), nbins); }

  double eval(double v) const {
    const int k = bin_of(v, bins());
    const double frac = std::clamp((v - (lo + k * width)) / width, 0.0, 1.0);
    return cdf[k] + frac * (cdf[k + 1] - cdf[k]);
  }

  // Smallest value whose CDF reaches q (linear within the bin).
  double quantile(double q) const {
    const int nb = bins();
    auto it = std::lower_bound(cdf.begin() + 1, cdf.end(), q);
    const int k = std::clamp(static_cast<int>(it - cdf.begin()) - 1, 0, nb - 1);
    const double span = cdf[k + 1] - cdf[k];
    const double frac = span > 0 ? std::clamp((q - cdf[k]) / span, 0.0, 1.0) : 0.0;
    return lo + (k + frac) * width;
  }
};

}  // namespace detail

// Map masked source intensities through src-CDF -> ref-quantile. Voxels
// outside mask_src are returned unchanged.
inline Volume3D histogram_match(const Volume3D& src, const Volume3D& ref, const BrainMask& mask_src,
                                const BrainMask& mask_ref, int nbins = kDefaultHistogramBins) {
  if (nbins < 2) throw Error("invalid bins");
  check_mask(src, mask_src);
  check_mask(ref, mask_ref);
  std::vector<double> s, r;
  for (std::size_t i = 0; i < src.size(); ++i)
    if (mask_src.data[i]) s.push_back(src[i]);
  for (std::size_t i = 0; i < ref.size(); ++i)
    if (mask_ref.data[i]) r.push_back(ref[i]);
  if (s.empty() || r.empty()) throw Error("empty mask");
  const detail::BinnedCdf cs(s, nbins), cr(r, nbins);
  std::vector<float> out = src.data();
  for (std::size_t i = 0; i < src.size(); ++i)
    if (mask_src.data[i]) out[i] = static_cast<float>(cr.quantile(cs.eval(src[i])));
  return src.like(std::move(out));
}

}  // namespace incepreg
