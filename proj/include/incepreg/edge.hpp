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

// Edge maps: 3x3x3 Gaussian blur, three fixed 3D Sobel kernels, and the
// max-normalised gradient magnitude. Kernels are indexed [z][y][x]
// (slice, row, column) and applied as cross-correlations with replicate
// padding.

#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "incepreg/ops.hpp"
#include "incepreg/volume.hpp"

namespace incepreg {

using Kernel3 = std::array<double, 27>;

inline constexpr std::size_t kernel_index(std::size_t z, std::size_t y, std::size_t x) { return (z * 3 + y) * 3 + x; }

struct SobelBank {
  Kernel3 sx{}, sy{}, sz{};

  const Kernel3& axis(int a) const { return a == 0 ? sx : a == 1 ? sy : sz; }
};

// Each kernel is a central difference along its own axis times the
// (1, 2, 1) smoothing profile along the other two.
inline SobelBank sobel_bank() {
  constexpr std::array<double, 3> diff{-1, 0, 1};
  constexpr std::array<double, 3> smooth{1, 2, 1};
  SobelBank b;
  for (std::size_t z = 0; z < 3; ++z)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 3; ++x) {
        b.sx[kernel_index(z, y, x)] = diff[x] * smooth[y] * smooth[z];
        b.sy[kernel_index(z, y, x)] = smooth[x] * diff[y] * smooth[z];
        b.sz[kernel_index(z, y, x)] = smooth[x] * smooth[y] * diff[z];
      }
  return b;
}

inline constexpr double kGaussianSigma = 1.0;

// exp(-(i^2 + j^2 + k^2) / (2 sigma^2)) on {-1,0,1}^3, normalised to sum 1.
inline Kernel3 gaussian_kernel3(double sigma = kGaussianSigma) {
  Kernel3 k{};
  double total = 0;
  for (int z = -1; z <= 1; ++z)
    for (int y = -1; y <= 1; ++y)
      for (int x = -1; x <= 1; ++x) {
        const double w = std::exp(-(x * x + y * y + z * z) / (2.0 * sigma * sigma));
        k[kernel_index(z + 1, y + 1, x + 1)] = w;
        total += w;
      }
  for (auto& w : k) w /= total;
  return k;
}

inline constexpr double kEdgeSqrtEps = 1e-12;

namespace edge_detail {

template <class T>
Tensor<T> kernel_tensor(std::initializer_list<const Kernel3*> ks) {
  std::vector<T> w;
  for (const Kernel3* k : ks) w.insert(w.end(), k->begin(), k->end());
  return Tensor<T>::from({ks.size(), 1, 3, 3, 3}, std::move(w));
}

// sqrt(sum_c s_c^2 + eps) over the channels of [3,D,H,W] -> [1,D,H,W].
template <class T>
Tensor<T> gradient_magnitude(const Tensor<T>& s, T eps) {
  const std::size_t V = s.numel() / 3;
  std::vector<T> v(V);
  for (std::size_t i = 0; i < V; ++i) {
    const T a = s[i], b = s[V + i], c = s[2 * V + i];
    v[i] = std::sqrt(a * a + b * b + c * c + eps);
  }
  auto sn = s.node();
  std::vector<T> mag = v;
  return ad::make_op<T>({1, s.dim(1), s.dim(2), s.dim(3)}, std::move(v), {s}, [sn, mag = std::move(mag), V](ad::Node<T>& o) {
    auto& g = sn->ensure_grad();
    for (std::size_t i = 0; i < V; ++i) {
      const T k = o.grad[i] / mag[i];
      for (std::size_t c = 0; c < 3; ++c) g[c * V + i] += k * sn->value[c * V + i];
    }
  });
}

// m / max(m); the derivative of the max is routed to the first argmax.
template <class T>
Tensor<T> normalize_by_max(const Tensor<T>& m) {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < m.numel(); ++i)
    if (m[i] > m[arg]) arg = i;
  const T mx = m[arg];
  if (!(mx > T(0))) return Tensor<T>::zeros(m.shape());
  std::vector<T> v(m.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m[i] / mx;
  auto mn = m.node();
  return ad::make_op<T>(m.shape(), std::move(v), {m}, [mn, arg, mx](ad::Node<T>& o) {
    auto& g = mn->ensure_grad();
    T dot = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += o.grad[i] / mx;
      dot += o.grad[i] * mn->value[i];
    }
    g[arg] -= dot / (mx * mx);
  });
}

template <class T>
bool is_flat(const Tensor<T>& x) {
  for (T v : x.values())
    if (v != x[0]) return false;
  return true;
}

}  // namespace edge_detail

// Differentiable pipeline over single-channel [1,D,H,W] tensors.
template <class T>
Tensor<T> gaussian_blur3(const Tensor<T>& x) {
  const Kernel3 g = gaussian_kernel3();
  return ops::conv3d(ops::pad_replicate(x, 1), edge_detail::kernel_tensor<T>({&g}));
}

// Sobel responses of x stacked as [3,D,H,W] (x, y, z derivatives).
template <class T>
Tensor<T> sobel_responses(const Tensor<T>& x) {
  const SobelBank b = sobel_bank();
  return ops::conv3d(ops::pad_replicate(x, 1), edge_detail::kernel_tensor<T>({&b.sx, &b.sy, &b.sz}));
}

// Gradient magnitude of the blurred input before max-normalisation.
template <class T>
Tensor<T> edge_magnitude(const Tensor<T>& x, bool blur = true) {
  return edge_detail::gradient_magnitude(sobel_responses(blur ? gaussian_blur3(x) : x), static_cast<T>(kEdgeSqrtEps));
}

// Normalised edge map in [0, 1]; an all-flat input yields all zeros.
template <class T>
Tensor<T> edge_map(const Tensor<T>& x) {
  if (x.dim(0) != 1) throw std::invalid_argument("edge_map: expected a single-channel [1,D,H,W] tensor");
  if (edge_detail::is_flat(x)) return Tensor<T>::zeros(x.shape());
  return edge_detail::normalize_by_max(edge_magnitude(x));
}

// Volume conveniences (evaluated in double, stored as float).
inline Volume3D gaussian_blur3(const Volume3D& v) { return to_volume(gaussian_blur3(to_tensor<double>(v)), v); }
inline Volume3D edge_map(const Volume3D& v) { return to_volume(edge_map(to_tensor<double>(v)), v); }

// Response of one Sobel kernel (axis 0=x, 1=y, 2=z) on the unblurred input.
inline Volume3D sobel_response(const Volume3D& v, int axis) {
  const auto s = sobel_responses(to_tensor<double>(v));
  const std::size_t V = v.size();
  return v.like(std::vector<float>(s.values().begin() + axis * V, s.values().begin() + (axis + 1) * V));
}

}  // namespace incepreg
