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

// Core data model: scalar volumes, masks, displacement fields, landmarks
// and multi-contrast studies.
//
// Grids are indexed (z, y, x) with x fastest, matching NIfTI's i-fastest
// storage. Spacing and origin are (x, y, z) triples in millimetres; world
// position of voxel (i, j, k) along (x, y, z) is origin + spacing * index.

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "incepreg/tensor.hpp"

namespace incepreg {

using Vec3 = std::array<double, 3>;

// Domain failure (bad input data, degenerate statistics, malformed files).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GridShape {
  std::size_t nx = 1, ny = 1, nz = 1;

  std::size_t voxels() const { return nx * ny * nz; }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return (z * ny + y) * nx + x; }
  std::size_t extent(int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }
  bool operator==(const GridShape&) const = default;
  std::string str() const {
    return std::to_string(nx) + "x" + std::to_string(ny) + "x" + std::to_string(nz);
  }
};

class Volume3D {
 public:
  Volume3D() = default;
  Volume3D(GridShape shape, Vec3 spacing = {1, 1, 1}, Vec3 origin = {0, 0, 0})
      : shape_(shape), spacing_(spacing), origin_(origin), data_(shape.voxels(), 0.0f) {
    validate();
  }
  Volume3D(GridShape shape, std::vector<float> data, Vec3 spacing = {1, 1, 1}, Vec3 origin = {0, 0, 0})
      : shape_(shape), spacing_(spacing), origin_(origin), data_(std::move(data)) {
    validate();
  }

  const GridShape& shape() const { return shape_; }
  const Vec3& spacing() const { return spacing_; }
  const Vec3& origin() const { return origin_; }
  std::size_t size() const { return data_.size(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(std::size_t x, std::size_t y, std::size_t z) { return data_[shape_.index(x, y, z)]; }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return data_[shape_.index(x, y, z)]; }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }

  // Same grid and metadata, new values.
  Volume3D like(std::vector<float> values) const { return Volume3D(shape_, std::move(values), spacing_, origin_); }

  bool same_grid(const Volume3D& o) const {
    return shape_ == o.shape_ && spacing_ == o.spacing_ && origin_ == o.origin_;
  }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  void validate() const {
    if (shape_.nx < 1 || shape_.ny < 1 || shape_.nz < 1) throw std::invalid_argument("volume: empty dimension");
    for (double s : spacing_)
      if (!(s > 0) || !std::isfinite(s)) throw std::invalid_argument("volume: spacing must be positive");
    if (data_.size() != shape_.voxels()) throw std::invalid_argument("volume: data size does not match shape");
  }

  GridShape shape_;
  Vec3 spacing_{1, 1, 1};
  Vec3 origin_{0, 0, 0};
  std::vector<float> data_;
};

struct BrainMask {
  GridShape shape;
  std::vector<unsigned char> data;

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += v != 0;
    return n;
  }
};

// Backward-mapping displacement in voxel units on the fixed grid:
// warped(p) = moving(p + u(p)). Stored component-major, x component first.
class DisplacementField {
 public:
  DisplacementField() = default;
  explicit DisplacementField(GridShape shape) : shape_(shape), data_(3 * shape.voxels(), 0.0) {}
  DisplacementField(GridShape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != 3 * shape_.voxels()) throw std::invalid_argument("field: data size does not match shape");
  }

  const GridShape& shape() const { return shape_; }
  double& operator()(int comp, std::size_t i) { return data_[comp * shape_.voxels() + i]; }
  double operator()(int comp, std::size_t i) const { return data_[comp * shape_.voxels() + i]; }
  Vec3 at(std::size_t i) const { return {(*this)(0, i), (*this)(1, i), (*this)(2, i)}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  double max_norm() const {
    double m = 0;
    for (std::size_t i = 0; i < shape_.voxels(); ++i) {
      const Vec3 u = at(i);
      m = std::max(m, std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]));
    }
    return m;
  }

 private:
  GridShape shape_;
  std::vector<double> data_;
};

struct Landmark {
  int id = 0;
  Vec3 position{};  // world mm
  bool operator==(const Landmark&) const = default;
};

struct LandmarkSet {
  std::vector<Landmark> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  bool operator==(const LandmarkSet&) const = default;
};

enum class Contrast { T1, T1CE, T2, FLAIR };

inline const char* contrast_name(Contrast c) {
  switch (c) {
    case Contrast::T1: return "t1";
    case Contrast::T1CE: return "t1ce";
    case Contrast::T2: return "t2";
    case Contrast::FLAIR: return "flair";
  }
  return "?";
}

// Fusion input order: T1-CE, T1, FLAIR, T2.
inline constexpr std::array<Contrast, 4> kFusionOrder{Contrast::T1CE, Contrast::T1, Contrast::FLAIR, Contrast::T2};

struct MultiContrastStudy {
  Volume3D t1, t1ce, t2, flair;
  LandmarkSet landmarks;
  std::string study_id;

  const Volume3D& get(Contrast c) const {
    switch (c) {
      case Contrast::T1: return t1;
      case Contrast::T1CE: return t1ce;
      case Contrast::T2: return t2;
      case Contrast::FLAIR: return flair;
    }
    throw std::invalid_argument("study: unknown contrast");
  }
  Volume3D& get(Contrast c) { return const_cast<Volume3D&>(static_cast<const MultiContrastStudy&>(*this).get(c)); }

  void validate() const {
    for (Contrast c : kFusionOrder)
      if (!get(c).same_grid(t1))
        throw std::invalid_argument(std::string("study ") + study_id + ": contrast " + contrast_name(c) +
                                    " does not share the T1 grid");
  }
};

// Voxel <-> world conversions (axis-aligned grids).
inline Vec3 world_to_voxel(const Vec3& w, const Vec3& spacing, const Vec3& origin) {
  return {(w[0] - origin[0]) / spacing[0], (w[1] - origin[1]) / spacing[1], (w[2] - origin[2]) / spacing[2]};
}
inline Vec3 voxel_to_world(const Vec3& v, const Vec3& spacing, const Vec3& origin) {
  return {origin[0] + v[0] * spacing[0], origin[1] + v[1] * spacing[1], origin[2] + v[2] * spacing[2]};
}

// Tensor bridges: a volume becomes [1, nz, ny, nx]; a field becomes [3, nz, ny, nx].
template <class T>
Tensor<T> to_tensor(const Volume3D& v, bool requires_grad = false) {
  const auto& s = v.shape();
  return Tensor<T>::from({1, s.nz, s.ny, s.nx}, std::vector<T>(v.data().begin(), v.data().end()), requires_grad);
}

template <class T>
Tensor<T> to_tensor(const DisplacementField& f, bool requires_grad = false) {
  const auto& s = f.shape();
  return Tensor<T>::from({3, s.nz, s.ny, s.nx}, std::vector<T>(f.data().begin(), f.data().end()), requires_grad);
}

template <class T>
Volume3D to_volume(const Tensor<T>& t, const Volume3D& like) {
  if (t.numel() != like.size()) throw std::invalid_argument("to_volume: size mismatch");
  return like.like(std::vector<float>(t.values().begin(), t.values().end()));
}

template <class T>
DisplacementField to_field(const Tensor<T>& t) {
  if (t.rank() != 4 || t.dim(0) != 3) throw std::invalid_argument("to_field: expected [3,D,H,W]");
  return DisplacementField({t.dim(3), t.dim(2), t.dim(1)}, std::vector<double>(t.values().begin(), t.values().end()));
}

}  // namespace incepreg
