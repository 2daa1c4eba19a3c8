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

// 3D (shifted) window multi-head self-attention with relative position
// bias, in the Swin style.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "incepreg/ops.hpp"

namespace incepreg {

using Dims3 = std::array<std::size_t, 3>;  // (d, h, w) = (z, y, x)

// Token bookkeeping for one (grid, window, shift) combination. Tokens of a
// [N,C] sequence are in raster order over the grid; windowed order lists
// the tokens of window 0, then window 1, ... after a cyclic shift by -shift.
struct WindowLayout {
  Dims3 grid{}, window{}, shift{};
  std::size_t num_windows = 0, window_tokens = 0;
  std::vector<std::uint32_t> to_windows;    // windowed position -> raster index
  std::vector<std::uint32_t> from_windows;  // raster index -> windowed position
  std::vector<std::uint32_t> rel_index;     // T*T entries into the bias table
  std::size_t table_size = 0;
  std::vector<float> mask;                  // num_windows*T*T, empty when unshifted

  static WindowLayout make(const Dims3& grid, const Dims3& window, const Dims3& shift) {
    WindowLayout L;
    L.grid = grid;
    L.window = window;
    L.shift = shift;
    for (int a = 0; a < 3; ++a)
      if (window[a] == 0 || grid[a] % window[a] != 0 || shift[a] >= window[a])
        throw std::invalid_argument("window layout: grid " + std::to_string(grid[a]) + " not divisible by window " +
                                    std::to_string(window[a]) + " on axis " + std::to_string(a));
    const Dims3 nw{grid[0] / window[0], grid[1] / window[1], grid[2] / window[2]};
    L.num_windows = nw[0] * nw[1] * nw[2];
    L.window_tokens = window[0] * window[1] * window[2];
    const std::size_t N = grid[0] * grid[1] * grid[2], T = L.window_tokens;
    L.to_windows.resize(N);
    L.from_windows.resize(N);
    // Region labels of the shifted frame, for the attention mask.
    auto region = [&](std::size_t i, int a) -> int {
      if (shift[a] == 0) return 0;
      if (i < grid[a] - window[a]) return 0;
      if (i < grid[a] - shift[a]) return 1;
      return 2;
    };
    std::vector<int> label(N);
    std::size_t pos = 0;
    for (std::size_t wz = 0; wz < nw[0]; ++wz)
      for (std::size_t wy = 0; wy < nw[1]; ++wy)
        for (std::size_t wx = 0; wx < nw[2]; ++wx)
          for (std::size_t tz = 0; tz < window[0]; ++tz)
            for (std::size_t ty = 0; ty < window[1]; ++ty)
              for (std::size_t tx = 0; tx < window[2]; ++tx, ++pos) {
                const std::size_t sz = wz * window[0] + tz, sy = wy * window[1] + ty, sx = wx * window[2] + tx;
                const std::size_t z = (sz + shift[0]) % grid[0], y = (sy + shift[1]) % grid[1],
                                  x = (sx + shift[2]) % grid[2];
                const std::size_t raster = (z * grid[1] + y) * grid[2] + x;
                L.to_windows[pos] = static_cast<std::uint32_t>(raster);
                L.from_windows[raster] = static_cast<std::uint32_t>(pos);
                label[pos] = (region(sz, 0) * 3 + region(sy, 1)) * 3 + region(sx, 2);
              }
    const std::size_t sd = 2 * window[0] - 1, sh = 2 * window[1] - 1, sw = 2 * window[2] - 1;
    L.table_size = sd * sh * sw;
    L.rel_index.resize(T * T);
    auto coords = [&](std::size_t t) {
      return std::array<long, 3>{static_cast<long>(t / (window[1] * window[2])),
                                 static_cast<long>((t / window[2]) % window[1]), static_cast<long>(t % window[2])};
    };
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j) {
        const auto ci = coords(i), cj = coords(j);
        const std::size_t rz = static_cast<std::size_t>(ci[0] - cj[0] + static_cast<long>(window[0]) - 1);
        const std::size_t ry = static_cast<std::size_t>(ci[1] - cj[1] + static_cast<long>(window[1]) - 1);
        const std::size_t rx = static_cast<std::size_t>(ci[2] - cj[2] + static_cast<long>(window[2]) - 1);
        L.rel_index[i * T + j] = static_cast<std::uint32_t>((rz * sh + ry) * sw + rx);
      }
    if (shift[0] || shift[1] || shift[2]) {
      L.mask.assign(L.num_windows * T * T, 0.0f);
      for (std::size_t w = 0; w < L.num_windows; ++w)
        for (std::size_t i = 0; i < T; ++i)
          for (std::size_t j = 0; j < T; ++j)
            if (label[w * T + i] != label[w * T + j]) L.mask[(w * T + i) * T + j] = -100.0f;
    }
    return L;
  }
};

namespace attn_detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Strided = Eigen::Map<const RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <class T>
using StridedMut = Eigen::Map<RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

}  // namespace attn_detail

// Attention probabilities softmax(scale * Q K^T + bias + mask) for every
// window and head: [num_windows, heads, T, T]. qkv is [N, 3C] in windowed
// token order; bias_table is [table_size, heads].
template <class T>
std::vector<T> window_attention_probs(std::span<const T> qkv, std::span<const T> bias_table, const WindowLayout& L,
                                      std::size_t channels, std::size_t heads) {
  using namespace attn_detail;
  const std::size_t T_ = L.window_tokens, hd = channels / heads, ld = 3 * channels;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  std::vector<T> probs(L.num_windows * heads * T_ * T_);
  RowMat<T> S(T_, T_);
  for (std::size_t w = 0; w < L.num_windows; ++w)
    for (std::size_t h = 0; h < heads; ++h) {
      const T* base = qkv.data() + w * T_ * ld;
      Strided<T> Q(base + h * hd, T_, hd, Eigen::OuterStride<>(ld));
      Strided<T> K(base + channels + h * hd, T_, hd, Eigen::OuterStride<>(ld));
      S.noalias() = scale * (Q * K.transpose());
      T* P = probs.data() + (w * heads + h) * T_ * T_;
      for (std::size_t i = 0; i < T_; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < T_; ++j) {
          T s = S(i, j) + bias_table[L.rel_index[i * T_ + j] * heads + h];
          if (!L.mask.empty()) s += static_cast<T>(L.mask[(w * T_ + i) * T_ + j]);
          P[i * T_ + j] = s;
          mx = std::max(mx, s);
        }
        T total = 0;
        for (std::size_t j = 0; j < T_; ++j) total += (P[i * T_ + j] = std::exp(P[i * T_ + j] - mx));
        for (std::size_t j = 0; j < T_; ++j) P[i * T_ + j] /= total;
      }
    }
  return probs;
}

// Differentiable multi-head window attention: returns [N, C] (heads
// concatenated) in windowed token order.
template <class T>
Tensor<T> window_attention(const Tensor<T>& qkv, const Tensor<T>& bias_table, std::shared_ptr<const WindowLayout> L,
                           std::size_t heads) {
  using namespace attn_detail;
  const std::size_t N = qkv.dim(0), C = qkv.dim(1) / 3, T_ = L->window_tokens, hd = C / heads;
  ops::detail::require(qkv.rank() == 2 && qkv.dim(1) == 3 * C && C % heads == 0, "window_attention: qkv shape");
  ops::detail::require(N == L->num_windows * T_, "window_attention: token count does not match layout");
  ops::detail::require(bias_table.rank() == 2 && bias_table.dim(0) == L->table_size && bias_table.dim(1) == heads,
                       "window_attention: bias table shape");
  auto probs = window_attention_probs<T>(qkv.values(), bias_table.values(), *L, C, heads);
  std::vector<T> out(N * C);
  const std::size_t ld = 3 * C;
  for (std::size_t w = 0; w < L->num_windows; ++w)
    for (std::size_t h = 0; h < heads; ++h) {
      Eigen::Map<const RowMat<T>> P(probs.data() + (w * heads + h) * T_ * T_, T_, T_);
      Strided<T> V(qkv.values().data() + w * T_ * ld + 2 * C + h * hd, T_, hd, Eigen::OuterStride<>(ld));
      StridedMut<T> O(out.data() + w * T_ * C + h * hd, T_, hd, Eigen::OuterStride<>(C));
      O.noalias() = P * V;
    }
  auto qn = qkv.node(), bn = bias_table.node();
  return ad::make_op<T>({N, C}, std::move(out), {qkv, bias_table},
                        [qn, bn, L, heads, C, hd, T_, probs = std::move(probs)](ad::Node<T>& o) {
    const std::size_t ld = 3 * C;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    T* gq = qn->requires_grad ? qn->ensure_grad().data() : nullptr;
    T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
    RowMat<T> dP(T_, T_), dS(T_, T_);
    for (std::size_t w = 0; w < L->num_windows; ++w)
      for (std::size_t h = 0; h < heads; ++h) {
        Eigen::Map<const RowMat<T>> P(probs.data() + (w * heads + h) * T_ * T_, T_, T_);
        const T* base = qn->value.data() + w * T_ * ld;
        Strided<T> Q(base + h * hd, T_, hd, Eigen::OuterStride<>(ld));
        Strided<T> K(base + C + h * hd, T_, hd, Eigen::OuterStride<>(ld));
        Strided<T> V(base + 2 * C + h * hd, T_, hd, Eigen::OuterStride<>(ld));
        Strided<T> dO(o.grad.data() + w * T_ * C + h * hd, T_, hd, Eigen::OuterStride<>(C));
        dP.noalias() = dO * V.transpose();
        for (std::size_t i = 0; i < T_; ++i) {
          T dot = 0;
          for (std::size_t j = 0; j < T_; ++j) dot += dP(i, j) * P(i, j);
          for (std::size_t j = 0; j < T_; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot);
        }
        if (gb)
          for (std::size_t i = 0; i < T_; ++i)
            for (std::size_t j = 0; j < T_; ++j) gb[L->rel_index[i * T_ + j] * heads + h] += dS(i, j);
        if (gq) {
          T* gbase = gq + w * T_ * ld;
          StridedMut<T> dQ(gbase + h * hd, T_, hd, Eigen::OuterStride<>(ld));
          StridedMut<T> dK(gbase + C + h * hd, T_, hd, Eigen::OuterStride<>(ld));
          StridedMut<T> dV(gbase + 2 * C + h * hd, T_, hd, Eigen::OuterStride<>(ld));
          dQ.noalias() += scale * (dS * K);
          dK.noalias() += scale * (dS.transpose() * Q);
          dV.noalias() += P.transpose() * dO;
        }
      }
  });
}

}  // namespace incepreg
