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

// Landmark error, robustness and Jacobian-determinant scoring.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "incepreg/volume.hpp"
#include "incepreg/warp.hpp"

namespace incepreg {

struct CaseScore {
  std::string case_id;
  std::vector<int> landmark_ids;
  std::vector<double> errors_before;  // mm
  std::vector<double> errors;         // mm, after registration
  double initial_median_ae = 0;
  double median_ae = 0;
  double mean_ae = 0;
  double robustness = 0;
  double neg_jacobian_fraction = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean of an empty list");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double distance(const Vec3& a, const Vec3& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

// Errors in mm, ordered by landmark id: | (x + u(x)) - m | for each fixed
// landmark x and its moving counterpart m.
inline std::vector<double> landmark_errors(const LandmarkSet& fixed_lms, const LandmarkSet& moving_lms,
                                           const DisplacementField& field, const Vec3& spacing, const Vec3& origin,
                                           std::vector<int>* ids = nullptr) {
  std::map<int, Vec3> moving;
  for (const auto& m : moving_lms.entries) moving[m.id] = m.position;
  std::map<int, Vec3> mapped;
  for (const auto& tp : transform_points(fixed_lms, field, spacing, origin)) mapped[tp.landmark.id] = tp.landmark.position;
  std::string missing;
  for (const auto& [id, p] : mapped)
    if (!moving.count(id)) missing += " " + std::to_string(id) + " (moving)";
  for (const auto& [id, p] : moving)
    if (!mapped.count(id)) missing += " " + std::to_string(id) + " (fixed)";
  if (!missing.empty()) throw std::invalid_argument("landmark id mismatch, missing:" + missing);
  std::vector<double> out;
  if (ids) ids->clear();
  for (const auto& [id, p] : mapped) {
    out.push_back(distance(p, moving.at(id)));
    if (ids) ids->push_back(id);
  }
  return out;
}

// median / mean of the after-errors and the fraction of landmarks whose
// error strictly decreased.
inline CaseScore summarize(const std::vector<double>& errors_before, const std::vector<double>& errors_after) {
  if (errors_before.empty() || errors_after.empty()) throw std::invalid_argument("summarize: empty error list");
  if (errors_before.size() != errors_after.size())
    throw std::invalid_argument("summarize: before/after lengths differ (" + std::to_string(errors_before.size()) +
                                " vs " + std::to_string(errors_after.size()) + ")");
  CaseScore s;
  s.errors_before = errors_before;
  s.errors = errors_after;
  s.initial_median_ae = median(errors_before);
  s.median_ae = median(errors_after);
  s.mean_ae = mean(errors_after);
  std::size_t improved = 0;
  for (std::size_t i = 0; i < errors_after.size(); ++i) improved += errors_after[i] < errors_before[i];
  s.robustness = static_cast<double>(improved) / static_cast<double>(errors_after.size());
  return s;
}

// det(I + grad u) per voxel; central differences inside, one-sided on faces.
inline Volume3D jacobian_det(const DisplacementField& field) {
  const auto& s = field.shape();
  if (s.nx < 3 || s.ny < 3 || s.nz < 3) throw std::invalid_argument("jacobian_det: every dimension must be >= 3");
  Volume3D out(s, Vec3{1, 1, 1}, Vec3{0, 0, 0});
  const std::size_t n[3] = {s.nx, s.ny, s.nz};
  const std::size_t stride[3] = {1, s.nx, s.nx * s.ny};
  for (std::size_t z = 0, i = 0; z < s.nz; ++z)
    for (std::size_t y = 0; y < s.ny; ++y)
      for (std::size_t x = 0; x < s.nx; ++x, ++i) {
        const std::size_t pos[3] = {x, y, z};
        double J[3][3];
        for (int d = 0; d < 3; ++d) {
          std::size_t lo = i, hi = i;
          double h = 2;
          if (pos[d] == 0) {
            hi = i + stride[d];
            h = 1;
          } else if (pos[d] == n[d] - 1) {
            lo = i - stride[d];
            h = 1;
          } else {
            lo = i - stride[d];
            hi = i + stride[d];
          }
          for (int c = 0; c < 3; ++c) J[c][d] = (field(c, hi) - field(c, lo)) / h + (c == d ? 1.0 : 0.0);
        }
        const double det = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                           J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                           J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
        out.data()[i] = static_cast<float>(det);
      }
  return out;
}

// Fraction of voxels with det <= 0. Face voxels are skipped unless
// include_boundary is set or the volume has no interior.
inline double neg_jacobian_fraction(const Volume3D& det, bool include_boundary = false) {
  const auto& s = det.shape();
  const bool interior = !include_boundary && s.nx > 2 && s.ny > 2 && s.nz > 2;
  std::size_t total = 0, neg = 0;
  for (std::size_t z = 0; z < s.nz; ++z)
    for (std::size_t y = 0; y < s.ny; ++y)
      for (std::size_t x = 0; x < s.nx; ++x) {
        if (interior && (x == 0 || y == 0 || z == 0 || x + 1 == s.nx || y + 1 == s.ny || z + 1 == s.nz)) continue;
        ++total;
        neg += !(det.at(x, y, z) > 0.0f);
      }
  return total ? static_cast<double>(neg) / static_cast<double>(total) : 0.0;
}

}  // namespace incepreg
