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

// Training objective: image MSE, diffusion smoothness of the displacement
// field, MSE between edge maps, and their weighted sum.

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "incepreg/edge.hpp"
#include "incepreg/ops.hpp"
#include "incepreg/volume.hpp"

namespace incepreg {

struct LossWeights {
  double w_mse = 1.0;
  double w_diff = 1.0;
  double w_edge = 1.0;

  void validate() const {
    for (double w : {w_mse, w_diff, w_edge})
      if (!std::isfinite(w) || w < 0) throw std::invalid_argument("loss weights must be finite and non-negative");
  }
  bool operator==(const LossWeights&) const = default;
};

struct LossReport {
  double l_mse = 0, l_diff = 0, l_edge = 0, l_total = 0;
};

// (1/N) sum (a_i - b_i)^2
template <class T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mse_loss: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return ops::mean_square(ops::sub(a, b));
}

// Mean over voxels that have a forward neighbour along every axis of
// sum_d |u(p + e_d) - u(p)|^2, all three components.
template <class T>
Tensor<T> diffusion_loss(const Tensor<T>& field) {
  if (field.rank() != 4 || field.dim(0) != 3)
    throw std::invalid_argument("diffusion_loss: expected [3,D,H,W], got " + shape_str(field.shape()));
  const std::size_t D = field.dim(1), H = field.dim(2), W = field.dim(3), V = D * H * W;
  const std::size_t count = (D > 1 && H > 1 && W > 1) ? (D - 1) * (H - 1) * (W - 1) : 0;
  if (count == 0) return Tensor<T>::zeros({1});
  const std::size_t step[3] = {1, W, H * W};
  const T* u = field.values().data();
  long double acc = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t z = 0; z + 1 < D; ++z)
      for (std::size_t y = 0; y + 1 < H; ++y)
        for (std::size_t x = 0; x + 1 < W; ++x) {
          const std::size_t p = c * V + (z * H + y) * W + x;
          for (std::size_t s : step) {
            const T d = u[p + s] - u[p];
            acc += static_cast<long double>(d) * d;
          }
        }
  const T inv = T(1) / static_cast<T>(count);
  auto fn = field.node();
  return ad::make_op<T>({1}, {static_cast<T>(acc * inv)}, {field}, [fn, D, H, W, V, inv](ad::Node<T>& o) {
    auto& g = fn->ensure_grad();
    const T* u = fn->value.data();
    const T k = T(2) * inv * o.grad[0];
    const std::size_t step[3] = {1, W, H * W};
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t z = 0; z + 1 < D; ++z)
        for (std::size_t y = 0; y + 1 < H; ++y)
          for (std::size_t x = 0; x + 1 < W; ++x) {
            const std::size_t p = c * V + (z * H + y) * W + x;
            for (std::size_t s : step) {
              const T d = k * (u[p + s] - u[p]);
              g[p + s] += d;
              g[p] -= d;
            }
          }
  });
}

// MSE between the normalised edge maps of the two images.
template <class T>
Tensor<T> edge_loss(const Tensor<T>& warped, const Tensor<T>& fixed) {
  if (warped.shape() != fixed.shape())
    throw std::invalid_argument("edge_loss: shape mismatch " + shape_str(warped.shape()) + " vs " + shape_str(fixed.shape()));
  if (warped.dim(0) == 1) return mse_loss(edge_map(warped), edge_map(fixed));
  // Multi-channel inputs: mean of per-channel edge losses.
  const std::size_t C = warped.dim(0);
  Tensor<T> total;
  for (std::size_t c = 0; c < C; ++c) {
    auto l = mse_loss(edge_map(ops::select_channel(warped, c)), edge_map(ops::select_channel(fixed, c)));
    total = total.defined() ? ops::add(total, l) : l;
  }
  return ops::scale(total, T(1) / static_cast<T>(C));
}

template <class T>
struct LossTerms {
  Tensor<T> total;
  LossReport report;
};

// Weighted sum of the three terms; the report carries the unweighted terms.
template <class T>
LossTerms<T> total_loss(const Tensor<T>& warped, const Tensor<T>& fixed, const Tensor<T>& field,
                        const LossWeights& w = {}) {
  w.validate();
  auto lm = mse_loss(warped, fixed);
  auto ld = diffusion_loss(field);
  auto le = edge_loss(warped, fixed);
  auto total = ops::add(ops::add(ops::scale(lm, static_cast<T>(w.w_mse)), ops::scale(ld, static_cast<T>(w.w_diff))),
                        ops::scale(le, static_cast<T>(w.w_edge)));
  LossReport r;
  r.l_mse = lm.item();
  r.l_diff = ld.item();
  r.l_edge = le.item();
  r.l_total = w.w_mse * r.l_mse + w.w_diff * r.l_diff + w.w_edge * r.l_edge;
  return {std::move(total), r};
}

// Volume / field conveniences evaluated in double.
inline double mse_loss(const Volume3D& a, const Volume3D& b) {
  if (!(a.shape() == b.shape())) throw std::invalid_argument("mse_loss: shape mismatch");
  return mse_loss(to_tensor<double>(a), to_tensor<double>(b)).item();
}
inline double diffusion_loss(const DisplacementField& f) { return diffusion_loss(to_tensor<double>(f)).item(); }
inline double edge_loss(const Volume3D& warped, const Volume3D& fixed) {
  if (!(warped.shape() == fixed.shape())) throw std::invalid_argument("edge_loss: shape mismatch");
  return edge_loss(to_tensor<double>(warped), to_tensor<double>(fixed)).item();
}
inline LossReport total_loss(const Volume3D& warped, const Volume3D& fixed, const DisplacementField& field,
                             const LossWeights& w = {}) {
  if (!(warped.shape() == fixed.shape()) || !(field.shape() == fixed.shape()))
    throw std::invalid_argument("total_loss: shape mismatch");
  return total_loss(to_tensor<double>(warped), to_tensor<double>(fixed), to_tensor<double>(field), w).report;
}

}  // namespace incepreg
