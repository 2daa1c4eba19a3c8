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

// Spatial transformer: trilinear backward warping with clamp-to-border
// sampling, affine transforms as displacement fields, and landmark
// transport through a field.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "incepreg/ops.hpp"
#include "incepreg/volume.hpp"

namespace incepreg {

namespace warp_detail {

// Trilinear stencil for one coordinate, clamped to [0, n-1].
struct Axis {
  std::size_t i0 = 0, i1 = 0;
  double f = 0;         // weight of i1
  bool inside = true;   // false when the coordinate was clamped
};

inline Axis stencil(double q, std::size_t n) {
  Axis a;
  const double hi = static_cast<double>(n - 1);
  if (q <= 0.0 || q >= hi) {
    a.inside = q > 0.0 && q < hi;
    q = std::clamp(q, 0.0, hi);
  }
  if (n == 1) return a;
  const double fl = std::floor(q);
  a.i0 = static_cast<std::size_t>(fl);
  if (fl >= hi) {
    a.i1 = a.i0;  // exactly on the last sample
    return a;
  }
  a.i1 = a.i0 + 1;
  a.f = q - fl;
  return a;
}

}  // namespace warp_detail

// warped[c](p) = moving[c](p + u(p)).
// moving: [C,D,H,W]; field: [3,D,H,W] with components (x, y, z) in voxels.
template <class T>
Tensor<T> warp(const Tensor<T>& moving, const Tensor<T>& field) {
  using warp_detail::stencil;
  ops::detail::require_volume(moving, "warp");
  ops::detail::require(field.rank() == 4 && field.dim(0) == 3 && field.dim(1) == moving.dim(1) &&
                           field.dim(2) == moving.dim(2) && field.dim(3) == moving.dim(3),
                       "warp: field " + shape_str(field.shape()) + " does not match image " + shape_str(moving.shape()));
  const std::size_t C = moving.dim(0), D = moving.dim(1), H = moving.dim(2), W = moving.dim(3);
  const std::size_t V = D * H * W;
  std::vector<T> out(C * V);
  const T* img = moving.values().data();
  const T* u = field.values().data();
  for (std::size_t z = 0, p = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x, ++p) {
        const auto ax = stencil(static_cast<double>(x) + u[p], W);
        const auto ay = stencil(static_cast<double>(y) + u[V + p], H);
        const auto az = stencil(static_cast<double>(z) + u[2 * V + p], D);
        const T fx = static_cast<T>(ax.f), fy = static_cast<T>(ay.f), fz = static_cast<T>(az.f);
        const std::size_t i000 = (az.i0 * H + ay.i0) * W + ax.i0, i001 = (az.i0 * H + ay.i0) * W + ax.i1;
        const std::size_t i010 = (az.i0 * H + ay.i1) * W + ax.i0, i011 = (az.i0 * H + ay.i1) * W + ax.i1;
        const std::size_t i100 = (az.i1 * H + ay.i0) * W + ax.i0, i101 = (az.i1 * H + ay.i0) * W + ax.i1;
        const std::size_t i110 = (az.i1 * H + ay.i1) * W + ax.i0, i111 = (az.i1 * H + ay.i1) * W + ax.i1;
        for (std::size_t c = 0; c < C; ++c) {
          const T* m = img + c * V;
          const T c00 = m[i000] + fx * (m[i001] - m[i000]);
          const T c01 = m[i010] + fx * (m[i011] - m[i010]);
          const T c10 = m[i100] + fx * (m[i101] - m[i100]);
          const T c11 = m[i110] + fx * (m[i111] - m[i110]);
          const T c0 = c00 + fy * (c01 - c00);
          const T c1 = c10 + fy * (c11 - c10);
          out[c * V + p] = c0 + fz * (c1 - c0);
        }
      }
  auto mn = moving.node(), fn = field.node();
  return ad::make_op<T>(moving.shape(), std::move(out), {moving, field}, [mn, fn, C, D, H, W, V](ad::Node<T>& o) {
    const T* u = fn->value.data();
    const T* img = mn->value.data();
    T* gm = mn->requires_grad ? mn->ensure_grad().data() : nullptr;
    T* gu = fn->requires_grad ? fn->ensure_grad().data() : nullptr;
    for (std::size_t z = 0, p = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x, ++p) {
          const auto ax = stencil(static_cast<double>(x) + u[p], W);
          const auto ay = stencil(static_cast<double>(y) + u[V + p], H);
          const auto az = stencil(static_cast<double>(z) + u[2 * V + p], D);
          const T fx = static_cast<T>(ax.f), fy = static_cast<T>(ay.f), fz = static_cast<T>(az.f);
          const T gx = T(1) - fx, gy = T(1) - fy, gz = T(1) - fz;
          const std::size_t idx[8] = {
              (az.i0 * H + ay.i0) * W + ax.i0, (az.i0 * H + ay.i0) * W + ax.i1,
              (az.i0 * H + ay.i1) * W + ax.i0, (az.i0 * H + ay.i1) * W + ax.i1,
              (az.i1 * H + ay.i0) * W + ax.i0, (az.i1 * H + ay.i0) * W + ax.i1,
              (az.i1 * H + ay.i1) * W + ax.i0, (az.i1 * H + ay.i1) * W + ax.i1};
          const T w[8] = {gz * gy * gx, gz * gy * fx, gz * fy * gx, gz * fy * fx,
                          fz * gy * gx, fz * gy * fx, fz * fy * gx, fz * fy * fx};
          T du[3] = {0, 0, 0};
          for (std::size_t c = 0; c < C; ++c) {
            const T g = o.grad[c * V + p];
            if (g == T(0)) continue;
            if (gm)
              for (int k = 0; k < 8; ++k) gm[c * V + idx[k]] += w[k] * g;
            if (gu) {
              const T* m = img + c * V;
              // d/dfx, d/dfy, d/dfz of the trilinear interpolant
              const T dx = gz * gy * (m[idx[1]] - m[idx[0]]) + gz * fy * (m[idx[3]] - m[idx[2]]) +
                           fz * gy * (m[idx[5]] - m[idx[4]]) + fz * fy * (m[idx[7]] - m[idx[6]]);
              const T dy = gz * gx * (m[idx[2]] - m[idx[0]]) + gz * fx * (m[idx[3]] - m[idx[1]]) +
                           fz * gx * (m[idx[6]] - m[idx[4]]) + fz * fx * (m[idx[7]] - m[idx[5]]);
              const T dz = gy * gx * (m[idx[4]] - m[idx[0]]) + gy * fx * (m[idx[5]] - m[idx[1]]) +
                           fy * gx * (m[idx[6]] - m[idx[2]]) + fy * fx * (m[idx[7]] - m[idx[3]]);
              du[0] += g * dx;
              du[1] += g * dy;
              du[2] += g * dz;
            }
          }
          if (gu) {
            if (ax.inside && W > 1) gu[p] += du[0];
            if (ay.inside && H > 1) gu[V + p] += du[1];
            if (az.inside && D > 1) gu[2 * V + p] += du[2];
          }
        }
  });
}

inline Volume3D warp(const Volume3D& moving, const DisplacementField& field) {
  if (!(field.shape() == moving.shape()))
    throw std::invalid_argument("warp: field " + field.shape().str() + " does not match volume " + moving.shape().str());
  return to_volume(warp(to_tensor<double>(moving), to_tensor<double>(field)), moving);
}

// Trilinear sample of a field at a continuous voxel position. Returns
// nullopt outside [0, n-1] along any axis.
inline std::optional<Vec3> sample_field(const DisplacementField& f, const Vec3& q) {
  const auto& s = f.shape();
  const std::size_t n[3] = {s.nx, s.ny, s.nz};
  warp_detail::Axis a[3];
  for (int d = 0; d < 3; ++d) {
    if (q[d] < 0.0 || q[d] > static_cast<double>(n[d] - 1)) return std::nullopt;
    a[d] = warp_detail::stencil(q[d], n[d]);
  }
  Vec3 out{0, 0, 0};
  for (int cz = 0; cz < 2; ++cz)
    for (int cy = 0; cy < 2; ++cy)
      for (int cx = 0; cx < 2; ++cx) {
        const double w = (cz ? a[2].f : 1 - a[2].f) * (cy ? a[1].f : 1 - a[1].f) * (cx ? a[0].f : 1 - a[0].f);
        if (w == 0) continue;
        const std::size_t i = s.index(cx ? a[0].i1 : a[0].i0, cy ? a[1].i1 : a[1].i0, cz ? a[2].i1 : a[2].i0);
        for (int c = 0; c < 3; ++c) out[c] += w * f(c, i);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Affine transforms, in voxel coordinates: q = linear * p + translation.

struct AffineTransform {
  Eigen::Matrix3d linear = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static AffineTransform identity() { return {}; }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return linear * p + translation; }
  Vec3 apply(const Vec3& p) const {
    const Eigen::Vector3d q = apply(Eigen::Vector3d(p[0], p[1], p[2]));
    return {q[0], q[1], q[2]};
  }
  bool finite() const { return linear.allFinite() && translation.allFinite(); }
  bool invertible() const { return std::fabs(linear.determinant()) > 1e-12; }
  AffineTransform inverse() const {
    AffineTransform inv;
    inv.linear = linear.inverse();
    inv.translation = -inv.linear * translation;
    return inv;
  }

  // Row-major 3x4 [linear | translation].
  std::array<double, 12> matrix3x4() const {
    std::array<double, 12> m{};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) m[r * 4 + c] = linear(r, c);
      m[r * 4 + 3] = translation[r];
    }
    return m;
  }
  static AffineTransform from_matrix3x4(const std::array<double, 12>& m) {
    AffineTransform a;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) a.linear(r, c) = m[r * 4 + c];
      a.translation[r] = m[r * 4 + 3];
    }
    return a;
  }
};

// u(p) = (linear * p + translation) - p on every voxel of the grid.
inline DisplacementField affine_to_field(const AffineTransform& a, const GridShape& shape) {
  DisplacementField f(shape);
  for (std::size_t z = 0, i = 0; z < shape.nz; ++z)
    for (std::size_t y = 0; y < shape.ny; ++y)
      for (std::size_t x = 0; x < shape.nx; ++x, ++i) {
        const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z));
        const Eigen::Vector3d d = a.apply(p) - p;
        for (int c = 0; c < 3; ++c) f(c, i) = d[c];
      }
  return f;
}

struct TransformedPoint {
  Landmark landmark;
  bool out_of_bounds = false;
};

// Maps world points p -> p + u(p) (sampled at p's voxel position) and
// returns world coordinates. Points outside the grid are passed through
// unchanged and flagged.
inline std::vector<TransformedPoint> transform_points(const LandmarkSet& points, const DisplacementField& field,
                                                      const Vec3& spacing, const Vec3& origin) {
  std::vector<TransformedPoint> out;
  out.reserve(points.size());
  for (const auto& lm : points.entries) {
    const Vec3 v = world_to_voxel(lm.position, spacing, origin);
    TransformedPoint tp{lm, false};
    if (auto u = sample_field(field, v)) {
      tp.landmark.position = voxel_to_world({v[0] + (*u)[0], v[1] + (*u)[1], v[2] + (*u)[2]}, spacing, origin);
    } else {
      tp.out_of_bounds = true;
    }
    out.push_back(tp);
  }
  return out;
}

inline LandmarkSet transformed_set(const std::vector<TransformedPoint>& pts) {
  LandmarkSet s;
  for (const auto& p : pts) s.entries.push_back(p.landmark);
  return s;
}

// u_total(p) = u_aff(p + u_def(p)) + u_def(p), with the affine part
// evaluated in closed form.
inline DisplacementField compose_affine_after(const AffineTransform& a, const DisplacementField& deformable) {
  const auto& s = deformable.shape();
  DisplacementField out(s);
  for (std::size_t z = 0, i = 0; z < s.nz; ++z)
    for (std::size_t y = 0; y < s.ny; ++y)
      for (std::size_t x = 0; x < s.nx; ++x, ++i) {
        const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z));
        const Eigen::Vector3d q = p + Eigen::Vector3d(deformable(0, i), deformable(1, i), deformable(2, i));
        const Eigen::Vector3d d = a.apply(q) - p;
        for (int c = 0; c < 3; ++c) out(c, i) = d[c];
      }
  return out;
}

}  // namespace incepreg
