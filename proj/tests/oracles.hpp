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

// Naive scalar-loop reference implementations used as test oracles. They
// share no code with the library.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

namespace incepreg::oracle {

struct Grid {
  long nx, ny, nz;
  long idx(long x, long y, long z) const { return (z * ny + y) * nx + x; }
  long n() const { return nx * ny * nz; }
  long clamp_x(long x) const { return std::clamp(x, 0L, nx - 1); }
  long clamp_y(long y) const { return std::clamp(y, 0L, ny - 1); }
  long clamp_z(long z) const { return std::clamp(z, 0L, nz - 1); }
};

inline double mse(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

// u is component-major [3][z][y][x].
inline double diffusion(const Grid& g, const std::vector<double>& u) {
  double s = 0;
  long count = 0;
  for (long z = 0; z + 1 < g.nz; ++z)
    for (long y = 0; y + 1 < g.ny; ++y)
      for (long x = 0; x + 1 < g.nx; ++x) {
        ++count;
        for (long c = 0; c < 3; ++c) {
          const double* uc = u.data() + c * g.n();
          const double v = uc[g.idx(x, y, z)];
          const double dx = uc[g.idx(x + 1, y, z)] - v;
          const double dy = uc[g.idx(x, y + 1, z)] - v;
          const double dz = uc[g.idx(x, y, z + 1)] - v;
          s += dx * dx + dy * dy + dz * dz;
        }
      }
  return count ? s / static_cast<double>(count) : 0.0;
}

// 3x3x3 cross-correlation with replicate borders; k indexed [dz][dy][dx].
inline std::vector<double> correlate_replicate(const Grid& g, const std::vector<double>& v, const double (&k)[3][3][3]) {
  std::vector<double> out(v.size());
  for (long z = 0; z < g.nz; ++z)
    for (long y = 0; y < g.ny; ++y)
      for (long x = 0; x < g.nx; ++x) {
        double s = 0;
        for (long dz = -1; dz <= 1; ++dz)
          for (long dy = -1; dy <= 1; ++dy)
            for (long dx = -1; dx <= 1; ++dx)
              s += k[dz + 1][dy + 1][dx + 1] * v[g.idx(g.clamp_x(x + dx), g.clamp_y(y + dy), g.clamp_z(z + dz))];
        out[g.idx(x, y, z)] = s;
      }
  return out;
}

inline std::vector<double> edge_map(const Grid& g, const std::vector<double>& v) {
  bool flat = true;
  for (double x : v) flat = flat && x == v[0];
  if (flat) return std::vector<double>(v.size(), 0.0);
  double gauss[3][3][3], sx[3][3][3], sy[3][3][3], sz[3][3][3], total = 0;
  const double d[3] = {-1, 0, 1}, s[3] = {1, 2, 1};
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 3; ++c) {
        gauss[a][b][c] = std::exp(-((a - 1) * (a - 1) + (b - 1) * (b - 1) + (c - 1) * (c - 1)) / 2.0);
        total += gauss[a][b][c];
        sx[a][b][c] = s[a] * s[b] * d[c];
        sy[a][b][c] = s[a] * d[b] * s[c];
        sz[a][b][c] = d[a] * s[b] * s[c];
      }
  for (auto& p : gauss)
    for (auto& r : p)
      for (auto& w : r) w /= total;
  const auto blurred = correlate_replicate(g, v, gauss);
  const auto ex = correlate_replicate(g, blurred, sx);
  const auto ey = correlate_replicate(g, blurred, sy);
  const auto ez = correlate_replicate(g, blurred, sz);
  std::vector<double> m(v.size());
  double mx = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    m[i] = std::sqrt(ex[i] * ex[i] + ey[i] * ey[i] + ez[i] * ez[i] + 1e-12);
    mx = std::max(mx, m[i]);
  }
  for (auto& x : m) x /= mx;
  return m;
}

inline double edge_loss(const Grid& g, const std::vector<double>& a, const std::vector<double>& b) {
  return mse(edge_map(g, a), edge_map(g, b));
}

}  // namespace incepreg::oracle
