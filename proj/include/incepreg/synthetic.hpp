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

// Synthetic pre/post-operative case generator. One anatomy is rendered
// into four contrasts by distinct monotone maps; the post study is the pre
// study warped by a known smooth field, with a per-contrast gain and a
// spherical low-intensity cavity.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "incepreg/metrics.hpp"
#include "incepreg/params.hpp"
#include "incepreg/volume.hpp"
#include "incepreg/warp.hpp"

namespace incepreg {

struct SyntheticCase {
  MultiContrastStudy pre;   // moving
  MultiContrastStudy post;  // fixed
  DisplacementField gt_field;  // on the post grid, maps into the pre grid
  AffineTransform gt_affine;   // affine part of gt_field
  Vec3 cavity_centre{};        // voxels, post grid
  double cavity_radius = 0;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kMinSyntheticSize = 32;
inline constexpr double kMaxSyntheticDisplacement = 8.0;

namespace synth_detail {

// In-place separable Gaussian with replicate borders on an nx*ny*nz grid.
inline void gaussian_smooth(std::vector<double>& v, const GridShape& s, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double total = 0;
  for (int i = -r; i <= r; ++i) total += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& w : k) w /= total;
  const std::size_t n[3] = {s.nx, s.ny, s.nz};
  const std::size_t stride[3] = {1, s.nx, s.nx * s.ny};
  std::vector<double> line, out;
  for (int a = 0; a < 3; ++a) {
    const std::size_t len = n[a];
    line.resize(len);
    out.resize(len);
    for (std::size_t z = 0; z < (a == 2 ? 1 : s.nz); ++z)
      for (std::size_t y = 0; y < (a == 1 ? 1 : s.ny); ++y)
        for (std::size_t x = 0; x < (a == 0 ? 1 : s.nx); ++x) {
          const std::size_t base = s.index(x, y, z);
          for (std::size_t i = 0; i < len; ++i) line[i] = v[base + i * stride[a]];
          for (std::size_t i = 0; i < len; ++i) {
            double acc = 0;
            for (int j = -r; j <= r; ++j) {
              const long q = std::clamp<long>(static_cast<long>(i) + j, 0, static_cast<long>(len) - 1);
              acc += k[j + r] * line[static_cast<std::size_t>(q)];
            }
            out[i] = acc;
          }
          for (std::size_t i = 0; i < len; ++i) v[base + i * stride[a]] = out[i];
        }
  }
}

inline double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

struct Blob {
  Vec3 centre;
  double radius, amplitude;
};

struct Anatomy {
  std::vector<double> a;      // tissue parameter in [0,1]
  std::vector<double> brain;  // soft brain support in [0,1]
  std::vector<Vec3> landmarks;  // voxel positions of structure centres
};

inline Anatomy make_anatomy(Rng& rng, const GridShape& s) {
  const double N = static_cast<double>(std::min({s.nx, s.ny, s.nz}));
  const Vec3 c{(s.nx - 1) / 2.0, (s.ny - 1) / 2.0, (s.nz - 1) / 2.0};
  const Vec3 semi{0.38 * s.nx * rng.uniform(0.95, 1.05), 0.42 * s.ny * rng.uniform(0.95, 1.05),
                  0.36 * s.nz * rng.uniform(0.95, 1.05)};
  Anatomy an;
  an.a.assign(s.voxels(), 0.0);
  an.brain.assign(s.voxels(), 0.0);

  std::vector<double> texture(s.voxels());
  for (auto& t : texture) t = rng.normal();
  gaussian_smooth(texture, s, N / 16);
  double tmax = 0;
  for (double t : texture) tmax = std::max(tmax, std::fabs(t));
  for (auto& t : texture) t = 0.08 * t / std::max(tmax, 1e-12);

  // Ventricles: two mirrored ellipsoids beside the midline.
  const Vec3 vsemi{0.05 * N, 0.12 * N, 0.06 * N};
  std::vector<Vec3> vent{{c[0] - 0.08 * N, c[1], c[2]}, {c[0] + 0.08 * N, c[1], c[2]}};
  std::vector<Blob> blobs;
  while (blobs.size() < 10) {
    Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const double rr = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
    if (rr > 0.55 * 0.55 || rr < 0.25 * 0.25) continue;
    p = {c[0] + p[0] * semi[0], c[1] + p[1] * semi[1], c[2] + p[2] * semi[2]};
    bool clash = false;
    for (const auto& b : blobs) clash |= distance(b.centre, p) < 0.12 * N;
    for (const auto& v : vent) clash |= distance(v, p) < 0.15 * N;
    if (clash) continue;
    blobs.push_back({p, rng.uniform(0.045, 0.075) * N, (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.25, 0.35)});
  }

  for (std::size_t z = 0, i = 0; z < s.nz; ++z)
    for (std::size_t y = 0; y < s.ny; ++y)
      for (std::size_t x = 0; x < s.nx; ++x, ++i) {
        const double dx = (x - c[0]) / semi[0], dy = (y - c[1]) / semi[1], dz = (z - c[2]) / semi[2];
        const double rho = std::sqrt(dx * dx + dy * dy + dz * dz);
        const double support = 1.0 - smoothstep(1.0 - 1.5 / semi[0], 1.0, rho);
        if (support <= 0) continue;
        // Cortex-like rim brighter than the core.
        double val = 0.55 + 0.2 * smoothstep(0.7, 0.9, rho) + texture[i];
        for (const auto& v : vent) {
          const double ex = (x - v[0]) / vsemi[0], ey = (y - v[1]) / vsemi[1], ez = (z - v[2]) / vsemi[2];
          const double q = std::sqrt(ex * ex + ey * ey + ez * ez);
          val = val + (0.1 - val) * (1.0 - smoothstep(0.8, 1.2, q));
        }
        for (const auto& b : blobs) {
          const double d2 = (x - b.centre[0]) * (x - b.centre[0]) + (y - b.centre[1]) * (y - b.centre[1]) +
                            (z - b.centre[2]) * (z - b.centre[2]);
          val += b.amplitude * std::exp(-0.5 * d2 / (b.radius * b.radius));
        }
        an.a[i] = std::clamp(val, 0.02, 1.0);
        an.brain[i] = support;
      }
  for (const auto& v : vent) an.landmarks.push_back(v);
  for (const auto& b : blobs) an.landmarks.push_back(b.centre);
  return an;
}

// Monotone tissue-to-intensity maps, one per contrast.
inline double contrast_map(Contrast c, double a) {
  switch (c) {
    case Contrast::T1: return 300 + 700 * a;
    case Contrast::T1CE: return 200 + 800 * std::pow(a, 0.7);
    case Contrast::T2: return 1000 - 700 * a;
    case Contrast::FLAIR: return 900 - 500 * std::pow(a, 1.3);
  }
  return 0;
}

inline AffineTransform random_small_affine(Rng& rng, const GridShape& s) {
  Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  const double angle = rng.uniform(-3.0, 3.0) * std::numbers::pi / 180.0;
  const Eigen::Matrix3d R = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
  const Eigen::Vector3d scale(rng.uniform(0.97, 1.03), rng.uniform(0.97, 1.03), rng.uniform(0.97, 1.03));
  const Eigen::Vector3d t(rng.uniform(-2.5, 2.5), rng.uniform(-2.5, 2.5), rng.uniform(-2.5, 2.5));
  const Eigen::Vector3d c((s.nx - 1) / 2.0, (s.ny - 1) / 2.0, (s.nz - 1) / 2.0);
  AffineTransform a;
  a.linear = R * scale.asDiagonal();
  a.translation = c + t - a.linear * c;
  return a;
}

inline DisplacementField random_smooth_field(Rng& rng, const GridShape& s, double amplitude) {
  const double N = static_cast<double>(std::min({s.nx, s.ny, s.nz}));
  DisplacementField f(s);
  const std::size_t V = s.voxels();
  for (int c = 0; c < 3; ++c) {
    std::vector<double> comp(V);
    for (auto& x : comp) x = rng.normal();
    gaussian_smooth(comp, s, N / 8);
    double m = 0;
    for (double x : comp) m = std::max(m, std::fabs(x));
    for (std::size_t i = 0; i < V; ++i) f(c, i) = amplitude * comp[i] / std::max(m, 1e-12);
  }
  return f;
}

// Solves x + u(x) = m by fixed-point iteration; nullopt if it leaves the grid
// or fails to converge.
inline std::optional<Vec3> invert_point(const DisplacementField& f, const Vec3& m) {
  Vec3 x = m;
  for (int it = 0; it < 200; ++it) {
    auto u = sample_field(f, x);
    if (!u) return std::nullopt;
    const Vec3 nx{m[0] - (*u)[0], m[1] - (*u)[1], m[2] - (*u)[2]};
    const double step = distance(nx, x);
    x = nx;
    if (step < 1e-12) break;
  }
  auto u = sample_field(f, x);
  if (!u || distance({x[0] + (*u)[0], x[1] + (*u)[1], x[2] + (*u)[2]}, m) > 1e-9) return std::nullopt;
  return x;
}

inline Volume3D render(const Anatomy& an, Contrast c, const GridShape& s, const Vec3& spacing) {
  Volume3D v(s, spacing, Vec3{0, 0, 0});
  for (std::size_t i = 0; i < s.voxels(); ++i)
    v.data()[i] = an.brain[i] > 0 ? static_cast<float>(an.brain[i] * contrast_map(c, an.a[i])) : 0.0f;
  return v;
}

}  // namespace synth_detail

// Deterministic in (seed, size). Landmarks: moving positions are structure
// centres in the pre study; fixed positions solve x + u(x) = moving.
inline SyntheticCase make_synthetic_case(std::uint64_t seed, std::size_t size) {
  using namespace synth_detail;
  if (size < kMinSyntheticSize)
    throw std::invalid_argument("synthetic case: size " + std::to_string(size) + " is below the minimum of " +
                                std::to_string(kMinSyntheticSize));
  Rng rng(seed);
  const GridShape s{size, size, size};
  const Vec3 spacing{1, 1, 1};
  SyntheticCase sc;
  sc.seed = seed;

  for (int attempt = 0;; ++attempt) {
    if (attempt == 100) throw std::runtime_error("synthetic case: no admissible field after 100 draws");
    const Anatomy an = make_anatomy(rng, s);
    const AffineTransform aff = random_small_affine(rng, s);
    const DisplacementField smooth = random_smooth_field(rng, s, rng.uniform(2.0, 3.0));
    const DisplacementField u = compose_affine_after(aff, smooth);
    if (u.max_norm() > kMaxSyntheticDisplacement) continue;
    if (neg_jacobian_fraction(jacobian_det(u), true) > 0) continue;

    LandmarkSet moving, fixed;
    bool ok = true;
    for (std::size_t k = 0; k < an.landmarks.size() && ok; ++k) {
      const Vec3& m = an.landmarks[k];
      auto x = invert_point(u, m);
      ok = x.has_value();
      if (!ok) break;
      moving.entries.push_back({static_cast<int>(k + 1), voxel_to_world(m, spacing, {0, 0, 0})});
      fixed.entries.push_back({static_cast<int>(k + 1), voxel_to_world(*x, spacing, {0, 0, 0})});
    }
    if (!ok) continue;

    // Cavity in the post study, inside the brain and clear of landmarks.
    Vec3 cav{};
    const double radius = 0.08 * size;
    const Vec3 c{(size - 1) / 2.0, (size - 1) / 2.0, (size - 1) / 2.0};
    bool placed = false;
    for (int t = 0; t < 200 && !placed; ++t) {
      cav = {c[0] + rng.uniform(-0.2, 0.2) * size, c[1] + rng.uniform(-0.2, 0.2) * size,
             c[2] + rng.uniform(-0.15, 0.15) * size};
      placed = true;
      for (const auto& lm : fixed.entries) placed &= distance(lm.position, cav) > radius + 0.06 * size;
    }
    if (!placed) continue;

    for (Contrast con : kFusionOrder) {
      Volume3D pre = render(an, con, s, spacing);
      Volume3D post = warp(pre, u);
      const double gain = rng.uniform(0.85, 1.15);
      for (std::size_t z = 0, i = 0; z < size; ++z)
        for (std::size_t y = 0; y < size; ++y)
          for (std::size_t x = 0; x < size; ++x, ++i) {
            float& v = post.data()[i];
            if (v <= 0) {
              v = 0;
              continue;
            }
            const double d = distance({double(x), double(y), double(z)}, cav);
            const double keep = 0.15 + 0.85 * smoothstep(radius - 1.0, radius + 1.0, d);
            v = static_cast<float>(gain * v * keep);
          }
      sc.pre.get(con) = std::move(pre);
      sc.post.get(con) = std::move(post);
    }
    sc.pre.landmarks = moving;
    sc.post.landmarks = fixed;
    sc.pre.study_id = "synth" + std::to_string(seed) + "_pre";
    sc.post.study_id = "synth" + std::to_string(seed) + "_post";
    sc.gt_field = u;
    sc.gt_affine = aff;
    sc.cavity_centre = cav;
    sc.cavity_radius = radius;
    return sc;
  }
}

}  // namespace incepreg
