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

// Intensity-based 12-parameter affine registration: masked MSE minimised
// with Adam over a coarse-to-fine pyramid, starting at identity.

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "incepreg/preprocess.hpp"
#include "incepreg/volume.hpp"
#include "incepreg/warp.hpp"

namespace incepreg {

struct AffineConfig {
  int levels = 3;
  int iterations = 200;  // per level
  double lr = 1e-2;      // Adam step in normalised units (fraction of the grid radius)
  Contrast contrast = Contrast::T1CE;

  void validate() const {
    if (levels < 1 || iterations < 0 || !(lr > 0) || !std::isfinite(lr))
      throw std::invalid_argument("affine config: levels >= 1, iterations >= 0 and lr > 0 required");
  }
  bool operator==(const AffineConfig&) const = default;
};

struct AffineResult {
  AffineTransform transform;
  double initial_mse = 0;
  double final_mse = 0;
  bool warning = false;  // optimisation did not improve on identity
};

namespace affine_detail {

// 2x2x2 block mean; odd trailing slices are dropped.
inline Volume3D downsample2(const Volume3D& v) {
  const auto& s = v.shape();
  const GridShape o{std::max<std::size_t>(s.nx / 2, 1), std::max<std::size_t>(s.ny / 2, 1),
                    std::max<std::size_t>(s.nz / 2, 1)};
  Volume3D out(o, Vec3{v.spacing()[0] * 2, v.spacing()[1] * 2, v.spacing()[2] * 2}, v.origin());
  for (std::size_t z = 0; z < o.nz; ++z)
    for (std::size_t y = 0; y < o.ny; ++y)
      for (std::size_t x = 0; x < o.nx; ++x) {
        double acc = 0;
        int n = 0;
        for (std::size_t dz = 0; dz < 2; ++dz)
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t X = std::min(2 * x + dx, s.nx - 1), Y = std::min(2 * y + dy, s.ny - 1),
                                Z = std::min(2 * z + dz, s.nz - 1);
              acc += v.at(X, Y, Z);
              ++n;
            }
        out.at(x, y, z) = static_cast<float>(acc / n);
      }
  return out;
}

// Masked mean squared difference; mask holds 0/1 weights.
template <class T>
Tensor<T> masked_mse(const Tensor<T>& a, const std::vector<T>& b, const std::vector<T>& mask) {
  const std::size_t n = a.numel();
  T count = 0;
  long double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    count += mask[i];
    const T d = a[i] - b[i];
    acc += static_cast<long double>(mask[i] * d * d);
  }
  if (count <= 0) throw Error("affine: empty mask");
  auto an = a.node();
  return ad::make_op<T>({1}, {static_cast<T>(acc / count)}, {a}, [an, &b, &mask, count](ad::Node<T>& o) {
    auto& g = an->ensure_grad();
    const T k = T(2) * o.grad[0] / count;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * mask[i] * (an->value[i] - b[i]);
  });
}

struct Level {
  Tensor<double> moving;
  std::vector<double> fixed, mask;
  GridShape shape;
  double scale = 1;  // fine voxels per level voxel
};

// Fine-grid parametrisation about the fixed-grid centre c, in units of the
// grid radius R (normalised coordinates): A(p) = c + (I + M)(p - c) + R t.
struct Params {
  std::array<double, 12> v{};  // t (3), then M row-major (9)

  AffineTransform transform(const Eigen::Vector3d& c, double radius) const {
    AffineTransform a;
    Eigen::Matrix3d M;
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) M(r, k) = v[3 + r * 3 + k];
    a.linear = Eigen::Matrix3d::Identity() + M;
    a.translation = c + radius * Eigen::Vector3d(v[0], v[1], v[2]) - a.linear * c;
    return a;
  }
};

// Displacement, in level voxels, of A applied on the level grid.
inline Tensor<double> level_field(const AffineTransform& a, const Level& L) {
  const double s = L.scale, o = (s - 1) / 2;
  const std::size_t V = L.shape.voxels();
  std::vector<double> u(3 * V);
  for (std::size_t z = 0, i = 0; z < L.shape.nz; ++z)
    for (std::size_t y = 0; y < L.shape.ny; ++y)
      for (std::size_t x = 0; x < L.shape.nx; ++x, ++i) {
        const Eigen::Vector3d c(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z));
        const Eigen::Vector3d q = (a.apply(Eigen::Vector3d(s * c.array() + o)).array() - o) / s;
        for (int k = 0; k < 3; ++k) u[k * V + i] = q[k] - c[k];
      }
  return Tensor<double>::from({3, L.shape.nz, L.shape.ny, L.shape.nx}, std::move(u), true);
}

inline Level make_level(const Volume3D& moving, const Volume3D& fixed, const BrainMask& mask, double scale) {
  Level L;
  L.shape = fixed.shape();
  L.scale = scale;
  L.moving = to_tensor<double>(moving);
  L.fixed.assign(fixed.data().begin(), fixed.data().end());
  L.mask.assign(mask.data.begin(), mask.data.end());
  return L;
}

inline double level_loss(const AffineTransform& a, const Level& L) {
  auto u = level_field(a, L);
  return masked_mse(warp(L.moving, u.detach()), L.fixed, L.mask).item();
}

}  // namespace affine_detail

// Registers moving onto fixed. The returned transform maps fixed-grid voxel
// positions to moving-grid voxel positions (backward convention).
inline AffineResult affine_register(const Volume3D& moving, const Volume3D& fixed, const AffineConfig& cfg = {}) {
  using namespace affine_detail;
  cfg.validate();
  if (!(moving.shape() == fixed.shape()))
    throw std::invalid_argument("affine_register: moving " + moving.shape().str() + " vs fixed " + fixed.shape().str());
  (void)brain_mask(moving);
  const BrainMask fixed_mask = brain_mask(fixed);

  // Pyramid, finest first.
  std::vector<Level> pyramid;
  {
    Volume3D m = moving, f = fixed;
    BrainMask k = fixed_mask;
    pyramid.push_back(make_level(m, f, k, 1.0));
    for (int l = 1; l < cfg.levels; ++l) {
      m = downsample2(m);
      f = downsample2(f);
      Volume3D kv(k.shape, Vec3{1, 1, 1}, Vec3{0, 0, 0});
      for (std::size_t i = 0; i < k.data.size(); ++i) kv.data()[i] = k.data[i];
      kv = downsample2(kv);
      k = BrainMask{kv.shape(), std::vector<unsigned char>(kv.size())};
      for (std::size_t i = 0; i < kv.size(); ++i) k.data[i] = kv.data()[i] >= 0.5f;
      if (k.count() == 0) break;  // too coarse to hold the brain
      pyramid.push_back(make_level(m, f, k, std::ldexp(1.0, l)));
    }
  }

  const auto& s = fixed.shape();
  const Eigen::Vector3d centre((s.nx - 1) / 2.0, (s.ny - 1) / 2.0, (s.nz - 1) / 2.0);
  const double radius = std::max(1.0, std::max({centre[0], centre[1], centre[2]}));
  Params params;
  std::array<double, 12> m1{}, m2{};
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  for (int l = static_cast<int>(pyramid.size()) - 1; l >= 0; --l) {
    const Level& L = pyramid[l];
    const double s_l = L.scale;
    m1.fill(0);
    m2.fill(0);
    for (int it = 0; it < cfg.iterations; ++it) {
      const AffineTransform a = params.transform(centre, radius);
      auto u = level_field(a, L);
      auto loss = masked_mse(warp(L.moving, u), L.fixed, L.mask);
      loss.backward();
      // Chain rule from level-voxel displacements to the fine parameters.
      std::array<double, 12> g{};
      const auto gu = u.grad();
      const std::size_t V = L.shape.voxels();
      const double o = (s_l - 1) / 2;
      for (std::size_t z = 0, i = 0; z < L.shape.nz; ++z)
        for (std::size_t y = 0; y < L.shape.ny; ++y)
          for (std::size_t x = 0; x < L.shape.nx; ++x, ++i) {
            const double gx = gu[i], gy = gu[V + i], gz = gu[2 * V + i];
            if (gx == 0 && gy == 0 && gz == 0) continue;
            const double pc[3] = {s_l * x + o - centre[0], s_l * y + o - centre[1], s_l * z + o - centre[2]};
            const double gk[3] = {gx, gy, gz};
            for (int r = 0; r < 3; ++r) {
              g[r] += gk[r] * radius;
              for (int k = 0; k < 3; ++k) g[3 + r * 3 + k] += gk[r] * pc[k];
            }
          }
      const double t = it + 1;
      const double lr = cfg.lr * std::pow(1.0 - static_cast<double>(it) / cfg.iterations, 0.9);
      for (int k = 0; k < 12; ++k) {
        const double gk = g[k] / s_l;
        m1[k] = b1 * m1[k] + (1 - b1) * gk;
        m2[k] = b2 * m2[k] + (1 - b2) * gk * gk;
        const double mh = m1[k] / (1 - std::pow(b1, t)), vh = m2[k] / (1 - std::pow(b2, t));
        params.v[k] -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
  }

  AffineResult r;
  r.initial_mse = level_loss(AffineTransform::identity(), pyramid[0]);
  const AffineTransform a = params.transform(centre, radius);
  const double final_mse = a.finite() && a.invertible() ? level_loss(a, pyramid[0]) : INFINITY;
  if (final_mse < r.initial_mse) {
    r.transform = a;
    r.final_mse = final_mse;
  } else {
    r.final_mse = r.initial_mse;
    r.warning = r.initial_mse > 0;
  }
  return r;
}

inline AffineResult affine_register(const MultiContrastStudy& moving, const MultiContrastStudy& fixed,
                                    const AffineConfig& cfg = {}) {
  return affine_register(moving.get(cfg.contrast), fixed.get(cfg.contrast), cfg);
}

// Resamples every contrast of a study under an affine transform.
inline MultiContrastStudy apply_affine(const MultiContrastStudy& s, const AffineTransform& a) {
  const DisplacementField f = affine_to_field(a, s.t1.shape());
  MultiContrastStudy out = s;
  out.t1 = warp(s.t1, f);
  out.t1ce = warp(s.t1ce, f);
  out.t2 = warp(s.t2, f);
  out.flair = warp(s.flair, f);
  return out;
}

}  // namespace incepreg
