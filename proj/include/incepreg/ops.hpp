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

// Differentiable tensor operations. Volumetric feature maps are laid out
// [C, D, H, W] (x fastest); token sequences are [N, C].

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "incepreg/tensor.hpp"

namespace incepreg::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using MapConstMat = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMat = Eigen::Map<RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <class T>
using StridedConstMat = Eigen::Map<const RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <class T>
void require_volume(const Tensor<T>& x, const char* op) {
  require(x.rank() == 4, std::string(op) + ": expected [C,D,H,W], got " + shape_str(x.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  auto an = a.node(), bn = b.node();
  return ad::make_op<T>(a.shape(), std::move(v), {a, b}, [an, bn](ad::Node<T>& o) {
    for (auto* n : {an.get(), bn.get()}) {
      if (!n->requires_grad) continue;
      auto& g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  auto an = a.node(), bn = b.node();
  return ad::make_op<T>(a.shape(), std::move(v), {a, b}, [an, bn](ad::Node<T>& o) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * s;
  auto an = a.node();
  return ad::make_op<T>(a.shape(), std::move(v), {a}, [an, s](ad::Node<T>& o) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  long double acc = 0;
  for (T x : a.values()) acc += x;
  auto an = a.node();
  return ad::make_op<T>({1}, {static_cast<T>(acc)}, {a}, [an](ad::Node<T>& o) {
    auto& g = an->ensure_grad();
    for (auto& x : g) x += o.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Mean of squared elements, fused to avoid materialising the square.
template <class T>
Tensor<T> mean_square(const Tensor<T>& a) {
  long double acc = 0;
  for (T x : a.values()) acc += static_cast<long double>(x) * x;
  const T inv_n = T(1) / static_cast<T>(a.numel());
  auto an = a.node();
  return ad::make_op<T>({1}, {static_cast<T>(acc * inv_n)}, {a}, [an, inv_n](ad::Node<T>& o) {
    auto& g = an->ensure_grad();
    const T c = T(2) * inv_n * o.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * an->value[i];
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] > T(0) ? a[i] : T(0);
  auto an = a.node();
  return ad::make_op<T>(a.shape(), std::move(v), {a}, [an](ad::Node<T>& o) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (an->value[i] > T(0)) g[i] += o.grad[i];
  });
}

// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = T(0.5) * a[i] * (T(1) + std::erf(a[i] * inv_sqrt2));
  auto an = a.node();
  return ad::make_op<T>(a.shape(), std::move(v), {a}, [an, inv_sqrt2](ad::Node<T>& o) {
    auto& g = an->ensure_grad();
    const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = an->value[i];
      const T d = T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * std::exp(T(-0.5) * x * x) * inv_sqrt_2pi;
      g[i] += o.grad[i] * d;
    }
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require(shape_numel(shape) == a.numel(),
                  "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> v(a.values().begin(), a.values().end());
  auto an = a.node();
  return ad::make_op<T>(std::move(shape), std::move(v), {a}, [an](ad::Node<T>& o) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

// Concatenate along the leading axis; trailing dims must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t lead = 0;
  for (const auto& p : parts) {
    detail::require(Shape(p.shape().begin() + 1, p.shape().end()) == tail,
                    "concat: trailing shape mismatch " + shape_str(p.shape()));
    lead += p.dim(0);
  }
  Shape out_shape = parts[0].shape();
  out_shape[0] = lead;
  std::vector<T> v;
  v.reserve(shape_numel(out_shape));
  for (const auto& p : parts) v.insert(v.end(), p.values().begin(), p.values().end());
  std::vector<std::shared_ptr<ad::Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return ad::make_op<T>(std::move(out_shape), std::move(v), parts, [nodes](ad::Node<T>& o) {
    std::size_t off = 0;
    for (const auto& n : nodes) {
      const std::size_t len = n->value.size();
      if (n->requires_grad) {
        auto& g = n->ensure_grad();
        for (std::size_t i = 0; i < len; ++i) g[i] += o.grad[off + i];
      }
      off += len;
    }
  });
}

// Channel c of a [C,...] tensor as [1,...].
template <class T>
Tensor<T> select_channel(const Tensor<T>& x, std::size_t c) {
  detail::require(x.rank() >= 1 && c < x.dim(0), "select_channel: channel out of range");
  const std::size_t V = x.numel() / x.dim(0);
  Shape s = x.shape();
  s[0] = 1;
  std::vector<T> v(x.values().begin() + c * V, x.values().begin() + (c + 1) * V);
  auto xn = x.node();
  return ad::make_op<T>(std::move(s), std::move(v), {x}, [xn, c, V](ad::Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < V; ++i) g[c * V + i] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Volumetric ops

struct ConvSpec {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

namespace detail {

struct ConvGeom {
  std::size_t cin, d, h, w, cout, k, stride, pad, od, oh, ow;
  std::size_t kvol() const { return k * k * k; }
  std::size_t krows() const { return cin * kvol(); }
  std::size_t plane() const { return oh * ow; }
};

// Fills the im2col block for output slice oz: rows (ci,kz,ky,kx), cols (oy,ox).
template <class T>
void im2col_slice(const T* x, const ConvGeom& g, std::size_t oz, T* cols) {
  const std::size_t P = g.plane();
  const long pad = static_cast<long>(g.pad);
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t kz = 0; kz < g.k; ++kz) {
      const long iz = static_cast<long>(oz * g.stride + kz) - pad;
      for (std::size_t ky = 0; ky < g.k; ++ky)
        for (std::size_t kx = 0; kx < g.k; ++kx, ++r) {
          T* row = cols + r * P;
          if (iz < 0 || iz >= static_cast<long>(g.d)) {
            std::fill(row, row + P, T(0));
            continue;
          }
          const T* src = x + (ci * g.d + static_cast<std::size_t>(iz)) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            T* dst = row + oy * g.ow;
            const long iy = static_cast<long>(oy * g.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill(dst, dst + g.ow, T(0));
              continue;
            }
            const T* line = src + static_cast<std::size_t>(iy) * g.w;
            if (g.stride == 1) {
              const long lo = std::min<long>(static_cast<long>(g.ow), std::max<long>(0, pad - static_cast<long>(kx)));
              const long hi = std::min<long>(static_cast<long>(g.ow), static_cast<long>(g.w) + pad - static_cast<long>(kx));
              std::fill(dst, dst + lo, T(0));
              if (hi > lo) std::memcpy(dst + lo, line + (lo + static_cast<long>(kx) - pad), sizeof(T) * static_cast<std::size_t>(hi - lo));
              std::fill(dst + std::max(hi, lo), dst + g.ow, T(0));
            } else {
              for (std::size_t ox = 0; ox < g.ow; ++ox) {
                const long ix = static_cast<long>(ox * g.stride + kx) - pad;
                dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : line[ix];
              }
            }
          }
        }
    }
}

template <class T>
void col2im_slice(const T* cols, const ConvGeom& g, std::size_t oz, T* gx) {
  const std::size_t P = g.plane();
  const long pad = static_cast<long>(g.pad);
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t kz = 0; kz < g.k; ++kz) {
      const long iz = static_cast<long>(oz * g.stride + kz) - pad;
      for (std::size_t ky = 0; ky < g.k; ++ky)
        for (std::size_t kx = 0; kx < g.k; ++kx, ++r) {
          if (iz < 0 || iz >= static_cast<long>(g.d)) continue;
          const T* row = cols + r * P;
          T* dst = gx + (ci * g.d + static_cast<std::size_t>(iz)) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            T* line = dst + static_cast<std::size_t>(iy) * g.w;
            const T* src = row + oy * g.ow;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - pad;
              if (ix >= 0 && ix < static_cast<long>(g.w)) line[ix] += src[ox];
            }
          }
        }
    }
}

}  // namespace detail

// 3D convolution (cross-correlation) with zero padding.
// x: [Cin,D,H,W], weight: [Cout,Cin,k,k,k], bias: [Cout] or undefined.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, ConvSpec spec = {}) {
  using namespace detail;
  require_volume(x, "conv3d");
  require(weight.rank() == 5 && weight.dim(2) == weight.dim(3) && weight.dim(3) == weight.dim(4),
          "conv3d: weight must be [Cout,Cin,k,k,k], got " + shape_str(weight.shape()));
  require(weight.dim(1) == x.dim(0), "conv3d: input has " + std::to_string(x.dim(0)) +
                                         " channels, weight expects " + std::to_string(weight.dim(1)));
  require(!bias.defined() || (bias.rank() == 1 && bias.dim(0) == weight.dim(0)), "conv3d: bias shape");
  require(spec.stride >= 1, "conv3d: stride must be >= 1");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), spec.stride, spec.pad, 0, 0, 0};
  for (std::size_t n : {g.d, g.h, g.w})
    require(n + 2 * g.pad >= g.k, "conv3d: kernel larger than padded input " + shape_str(x.shape()));
  g.od = (g.d + 2 * g.pad - g.k) / g.stride + 1;
  g.oh = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  const std::size_t K = g.krows(), P = g.plane(), OV = g.od * P;
  const bool pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;

  std::vector<T> out(g.cout * OV, T(0));
  MapConstMat<T> W(weight.values().data(), static_cast<long>(g.cout), static_cast<long>(K));
  if (pointwise) {
    MapConstMat<T> X(x.values().data(), static_cast<long>(g.cin), static_cast<long>(OV));
    MapMat<T> Y(out.data(), static_cast<long>(g.cout), static_cast<long>(OV));
    Y.noalias() = W * X;
  } else {
    std::vector<T> cols(K * P);
    for (std::size_t oz = 0; oz < g.od; ++oz) {
      im2col_slice(x.values().data(), g, oz, cols.data());
      MapConstMat<T> C(cols.data(), static_cast<long>(K), static_cast<long>(P));
      StridedMat<T> Y(out.data() + oz * P, static_cast<long>(g.cout), static_cast<long>(P), Eigen::OuterStride<>(static_cast<long>(OV)));
      Y.noalias() = W * C;
    }
  }
  if (bias.defined())
    for (std::size_t co = 0; co < g.cout; ++co) {
      const T b = bias[co];
      T* p = out.data() + co * OV;
      for (std::size_t i = 0; i < OV; ++i) p[i] += b;
    }

  auto xn = x.node(), wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return ad::make_op<T>({g.cout, g.od, g.oh, g.ow}, std::move(out), inputs,
                        [xn, wn, bn, g, pointwise](ad::Node<T>& o) {
    const std::size_t K = g.krows(), P = g.plane(), OV = g.od * P;
    if (bn && bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t co = 0; co < g.cout; ++co) {
        long double acc = 0;
        const T* p = o.grad.data() + co * OV;
        for (std::size_t i = 0; i < OV; ++i) acc += p[i];
        gb[co] += static_cast<T>(acc);
      }
    }
    const bool need_w = wn->requires_grad, need_x = xn->requires_grad;
    if (!need_w && !need_x) return;
    MapConstMat<T> W(wn->value.data(), static_cast<long>(g.cout), static_cast<long>(K));
    T* gw_ptr = need_w ? wn->ensure_grad().data() : nullptr;
    T* gx_ptr = need_x ? xn->ensure_grad().data() : nullptr;
    if (pointwise) {
      MapConstMat<T> G(o.grad.data(), static_cast<long>(g.cout), static_cast<long>(OV));
      MapConstMat<T> X(xn->value.data(), static_cast<long>(g.cin), static_cast<long>(OV));
      if (need_w) {
        MapMat<T> GW(gw_ptr, static_cast<long>(g.cout), static_cast<long>(K));
        GW.noalias() += G * X.transpose();
      }
      if (need_x) {
        MapMat<T> GX(gx_ptr, static_cast<long>(g.cin), static_cast<long>(OV));
        GX.noalias() += W.transpose() * G;
      }
      return;
    }
    std::vector<T> cols(K * P);
    RowMat<T> gcols;
    for (std::size_t oz = 0; oz < g.od; ++oz) {
      StridedConstMat<T> G(o.grad.data() + oz * P, static_cast<long>(g.cout), static_cast<long>(P), Eigen::OuterStride<>(static_cast<long>(OV)));
      if (need_w) {
        im2col_slice(xn->value.data(), g, oz, cols.data());
        MapConstMat<T> C(cols.data(), static_cast<long>(K), static_cast<long>(P));
        MapMat<T> GW(gw_ptr, static_cast<long>(g.cout), static_cast<long>(K));
        GW.noalias() += G * C.transpose();
      }
      if (need_x) {
        gcols.noalias() = W.transpose() * G;
        col2im_slice(gcols.data(), g, oz, gx_ptr);
      }
    }
  });
}

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, ConvSpec spec = {}) {
  return conv3d(x, weight, Tensor<T>{}, spec);
}

// Replicate-pads every spatial side of [C,D,H,W] by r voxels.
template <class T>
Tensor<T> pad_replicate(const Tensor<T>& x, std::size_t r) {
  detail::require_volume(x, "pad_replicate");
  const std::size_t C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t PD = D + 2 * r, PH = H + 2 * r, PW = W + 2 * r;
  auto clampi = [r](std::size_t i, std::size_t n) {
    const long v = static_cast<long>(i) - static_cast<long>(r);
    return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(n) - 1));
  };
  std::vector<std::size_t> src(PD * PH * PW);
  for (std::size_t z = 0; z < PD; ++z)
    for (std::size_t y = 0; y < PH; ++y)
      for (std::size_t xx = 0; xx < PW; ++xx)
        src[(z * PH + y) * PW + xx] = (clampi(z, D) * H + clampi(y, H)) * W + clampi(xx, W);
  const std::size_t V = D * H * W, PV = PD * PH * PW;
  std::vector<T> v(C * PV);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < PV; ++i) v[c * PV + i] = x[c * V + src[i]];
  auto xn = x.node();
  return ad::make_op<T>({C, PD, PH, PW}, std::move(v), {x}, [xn, src = std::move(src), C, V, PV](ad::Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < PV; ++i) g[c * V + src[i]] += o.grad[c * PV + i];
  });
}

// Zero-pads [C,D,H,W] at the high end of each spatial axis up to (d,h,w).
template <class T>
Tensor<T> pad_end(const Tensor<T>& x, std::size_t d, std::size_t h, std::size_t w) {
  detail::require_volume(x, "pad_end");
  const std::size_t C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::require(d >= D && h >= H && w >= W, "pad_end: target smaller than input");
  if (d == D && h == H && w == W) return x;
  std::vector<T> v(C * d * h * w, T(0));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        std::copy_n(x.values().data() + ((c * D + z) * H + y) * W, W, v.data() + ((c * d + z) * h + y) * w);
  auto xn = x.node();
  return ad::make_op<T>({C, d, h, w}, std::move(v), {x}, [xn, C, D, H, W, d, h, w](ad::Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < H; ++y) {
          const T* src = o.grad.data() + ((c * d + z) * h + y) * w;
          T* dst = g.data() + ((c * D + z) * H + y) * W;
          for (std::size_t xx = 0; xx < W; ++xx) dst[xx] += src[xx];
        }
  });
}

// Keeps the low corner (d,h,w) of every channel.
template <class T>
Tensor<T> crop(const Tensor<T>& x, std::size_t d, std::size_t h, std::size_t w) {
  detail::require_volume(x, "crop");
  const std::size_t C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::require(d <= D && h <= H && w <= W, "crop: target larger than input");
  if (d == D && h == H && w == W) return x;
  std::vector<T> v(C * d * h * w);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t z = 0; z < d; ++z)
      for (std::size_t y = 0; y < h; ++y)
        std::copy_n(x.values().data() + ((c * D + z) * H + y) * W, w, v.data() + ((c * d + z) * h + y) * w);
  auto xn = x.node();
  return ad::make_op<T>({C, d, h, w}, std::move(v), {x}, [xn, C, D, H, W, d, h, w](ad::Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t z = 0; z < d; ++z)
        for (std::size_t y = 0; y < h; ++y) {
          const T* src = o.grad.data() + ((c * d + z) * h + y) * w;
          T* dst = g.data() + ((c * D + z) * H + y) * W;
          for (std::size_t xx = 0; xx < w; ++xx) dst[xx] += src[xx];
        }
  });
}

// 3x3x3 max-pool, stride 1, padded so that spatial dims are preserved.
// Evaluated separably (x, then y, then z) while tracking the source voxel.
template <class T>
Tensor<T> max_pool3(const Tensor<T>& x) {
  detail::require_volume(x, "max_pool3");
  const std::size_t C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t V = D * H * W;
  std::vector<T> v(x.numel());
  std::vector<std::uint32_t> arg(x.numel());
  std::vector<T> a(V), b(V);
  std::vector<std::uint32_t> ia(V), ib(V);
  const std::size_t strides[3] = {1, W, H * W};
  const std::size_t extents[3] = {W, H, D};
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = x.values().data() + c * V;
    std::copy_n(src, V, a.data());
    for (std::size_t i = 0; i < V; ++i) ia[i] = static_cast<std::uint32_t>(i);
    for (int axis = 0; axis < 3; ++axis) {
      const std::size_t s = strides[axis], n = extents[axis];
      for (std::size_t i = 0; i < V; ++i) {
        const std::size_t pos = (i / s) % n;
        T best = a[i];
        std::uint32_t bi = ia[i];
        if (pos > 0 && a[i - s] > best) { best = a[i - s]; bi = ia[i - s]; }
        if (pos + 1 < n && a[i + s] > best) { best = a[i + s]; bi = ia[i + s]; }
        b[i] = best;
        ib[i] = bi;
      }
      std::swap(a, b);
      std::swap(ia, ib);
    }
    std::copy_n(a.data(), V, v.data() + c * V);
    std::copy_n(ia.data(), V, arg.data() + c * V);
  }
  auto xn = x.node();
  return ad::make_op<T>(x.shape(), std::move(v), {x}, [xn, arg = std::move(arg), C, V](ad::Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < V; ++i) g[c * V + arg[c * V + i]] += o.grad[c * V + i];
  });
}

// Per-channel instance normalisation (no affine parameters).
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps = T(1e-5)) {
  detail::require_volume(x, "instance_norm");
  const std::size_t C = x.dim(0), V = x.numel() / C;
  std::vector<T> v(x.numel()), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    const T* p = x.values().data() + c * V;
    long double m = 0, s = 0;
    for (std::size_t i = 0; i < V; ++i) m += p[i];
    m /= V;
    for (std::size_t i = 0; i < V; ++i) s += (p[i] - m) * (p[i] - m);
    inv_std[c] = static_cast<T>(1.0L / std::sqrt(s / V + eps));
    for (std::size_t i = 0; i < V; ++i) v[c * V + i] = static_cast<T>((p[i] - m)) * inv_std[c];
  }
  auto xn = x.node();
  std::vector<T> xhat = v;
  return ad::make_op<T>(x.shape(), std::move(v), {x}, [xn, xhat = std::move(xhat), inv_std = std::move(inv_std), C, V](ad::Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t c = 0; c < C; ++c) {
      long double mg = 0, mgx = 0;
      for (std::size_t i = 0; i < V; ++i) {
        mg += o.grad[c * V + i];
        mgx += o.grad[c * V + i] * xhat[c * V + i];
      }
      mg /= V;
      mgx /= V;
      for (std::size_t i = 0; i < V; ++i)
        g[c * V + i] += inv_std[c] * static_cast<T>(o.grad[c * V + i] - mg - xhat[c * V + i] * mgx);
    }
  });
}

// Linear 2x upsampling along one spatial axis (1=D, 2=H, 3=W) with
// half-pixel centres, i.e. align_corners=false semantics.
template <class T>
Tensor<T> upsample2_axis(const Tensor<T>& x, std::size_t axis) {
  detail::require_volume(x, "upsample2_axis");
  detail::require(axis >= 1 && axis <= 3, "upsample2_axis: axis must be spatial");
  Shape os = x.shape();
  const std::size_t n = os[axis];
  os[axis] = 2 * n;
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < 4; ++a) inner *= os[a];
  std::size_t outer = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= os[a];
  std::vector<T> v(shape_numel(os));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t lo = i > 0 ? i - 1 : 0, hi = i + 1 < n ? i + 1 : n - 1;
      const T* c = x.values().data() + (o * n + i) * inner;
      const T* l = x.values().data() + (o * n + lo) * inner;
      const T* h = x.values().data() + (o * n + hi) * inner;
      T* e = v.data() + (o * 2 * n + 2 * i) * inner;
      T* f = e + inner;
      for (std::size_t k = 0; k < inner; ++k) {
        e[k] = T(0.75) * c[k] + T(0.25) * l[k];
        f[k] = T(0.75) * c[k] + T(0.25) * h[k];
      }
    }
  auto xn = x.node();
  return ad::make_op<T>(std::move(os), std::move(v), {x}, [xn, outer, n, inner](ad::Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t oo = 0; oo < outer; ++oo)
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i > 0 ? i - 1 : 0, hi = i + 1 < n ? i + 1 : n - 1;
        const T* e = o.grad.data() + (oo * 2 * n + 2 * i) * inner;
        const T* f = e + inner;
        T* c = g.data() + (oo * n + i) * inner;
        T* l = g.data() + (oo * n + lo) * inner;
        T* h = g.data() + (oo * n + hi) * inner;
        for (std::size_t k = 0; k < inner; ++k) {
          c[k] += T(0.75) * (e[k] + f[k]);
          l[k] += T(0.25) * e[k];
          h[k] += T(0.25) * f[k];
        }
      }
  });
}

template <class T>
Tensor<T> upsample2(const Tensor<T>& x) {
  return upsample2_axis(upsample2_axis(upsample2_axis(x, 3), 2), 1);
}

// ---------------------------------------------------------------------------
// Token ops

// [C,D,H,W] -> [D*H*W, C]
template <class T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  detail::require_volume(x, "to_tokens");
  const std::size_t C = x.dim(0), N = x.numel() / C;
  std::vector<T> v(x.numel());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < N; ++i) v[i * C + c] = x[c * N + i];
  auto xn = x.node();
  return ad::make_op<T>({N, C}, std::move(v), {x}, [xn, C, N](ad::Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < N; ++i) g[c * N + i] += o.grad[i * C + c];
  });
}

// [D*H*W, C] -> [C,D,H,W]
template <class T>
Tensor<T> from_tokens(const Tensor<T>& x, std::size_t d, std::size_t h, std::size_t w) {
  detail::require(x.rank() == 2 && x.dim(0) == d * h * w, "from_tokens: token count mismatch");
  const std::size_t N = x.dim(0), C = x.dim(1);
  std::vector<T> v(x.numel());
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) v[c * N + i] = x[i * C + c];
  auto xn = x.node();
  return ad::make_op<T>({C, d, h, w}, std::move(v), {x}, [xn, C, N](ad::Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t c = 0; c < C; ++c) g[i * C + c] += o.grad[c * N + i];
  });
}

// y = x W^T + b with x: [N,Cin], W: [Cout,Cin], b: [Cout] (optional).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  using namespace detail;
  require(x.rank() == 2 && weight.rank() == 2 && weight.dim(1) == x.dim(1),
          "linear: " + shape_str(x.shape()) + " x " + shape_str(weight.shape()));
  require(!bias.defined() || (bias.rank() == 1 && bias.dim(0) == weight.dim(0)), "linear: bias shape");
  const long N = static_cast<long>(x.dim(0)), Ci = static_cast<long>(x.dim(1)), Co = static_cast<long>(weight.dim(0));
  std::vector<T> v(static_cast<std::size_t>(N * Co));
  MapMat<T> Y(v.data(), N, Co);
  Y.noalias() = MapConstMat<T>(x.values().data(), N, Ci) * MapConstMat<T>(weight.values().data(), Co, Ci).transpose();
  if (bias.defined())
    for (long i = 0; i < N; ++i)
      for (long j = 0; j < Co; ++j) Y(i, j) += bias[static_cast<std::size_t>(j)];
  auto xn = x.node(), wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return ad::make_op<T>({x.dim(0), weight.dim(0)}, std::move(v), inputs, [xn, wn, bn, N, Ci, Co](ad::Node<T>& o) {
    MapConstMat<T> G(o.grad.data(), N, Co);
    if (xn->requires_grad) {
      MapMat<T> GX(xn->ensure_grad().data(), N, Ci);
      GX.noalias() += G * MapConstMat<T>(wn->value.data(), Co, Ci);
    }
    if (wn->requires_grad) {
      MapMat<T> GW(wn->ensure_grad().data(), Co, Ci);
      GW.noalias() += G.transpose() * MapConstMat<T>(xn->value.data(), N, Ci);
    }
    if (bn && bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (long j = 0; j < Co; ++j) gb[static_cast<std::size_t>(j)] += G.col(j).sum();
    }
  });
}

// Layer normalisation over the last axis of [N,C] with affine gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require(x.rank() == 2 && gamma.numel() == x.dim(1) && beta.numel() == x.dim(1), "layer_norm: shape");
  const std::size_t N = x.dim(0), C = x.dim(1);
  std::vector<T> v(x.numel()), xhat(x.numel()), inv_std(N);
  for (std::size_t i = 0; i < N; ++i) {
    const T* p = x.values().data() + i * C;
    T m = 0, s = 0;
    for (std::size_t c = 0; c < C; ++c) m += p[c];
    m /= static_cast<T>(C);
    for (std::size_t c = 0; c < C; ++c) s += (p[c] - m) * (p[c] - m);
    inv_std[i] = T(1) / std::sqrt(s / static_cast<T>(C) + eps);
    for (std::size_t c = 0; c < C; ++c) {
      xhat[i * C + c] = (p[c] - m) * inv_std[i];
      v[i * C + c] = xhat[i * C + c] * gamma[c] + beta[c];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return ad::make_op<T>(x.shape(), std::move(v), {x, gamma, beta},
                        [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), N, C](ad::Node<T>& o) {
    if (gn->requires_grad || bn->requires_grad) {
      auto& gg = gn->ensure_grad();
      auto& gb = bn->ensure_grad();
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < C; ++c) {
          gg[c] += o.grad[i * C + c] * xhat[i * C + c];
          gb[c] += o.grad[i * C + c];
        }
    }
    if (!xn->requires_grad) return;
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < N; ++i) {
      T mg = 0, mgx = 0;
      for (std::size_t c = 0; c < C; ++c) {
        const T gy = o.grad[i * C + c] * gn->value[c];
        mg += gy;
        mgx += gy * xhat[i * C + c];
      }
      mg /= static_cast<T>(C);
      mgx /= static_cast<T>(C);
      for (std::size_t c = 0; c < C; ++c) {
        const T gy = o.grad[i * C + c] * gn->value[c];
        gx[i * C + c] += inv_std[i] * (gy - mg - xhat[i * C + c] * mgx);
      }
    }
  });
}

// Row gather: out[m] = x[index[m]] for x: [N,C]. Result is [M,C].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::uint32_t> index) {
  detail::require(x.rank() == 2, "gather_rows: expected [N,C]");
  const std::size_t N = x.dim(0), C = x.dim(1), M = index.size();
  std::vector<T> v(M * C);
  for (std::size_t m = 0; m < M; ++m) {
    detail::require(index[m] < N, "gather_rows: index out of range");
    std::copy_n(x.values().data() + index[m] * C, C, v.data() + m * C);
  }
  auto xn = x.node();
  return ad::make_op<T>({M, C}, std::move(v), {x}, [xn, index = std::move(index), C](ad::Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t m = 0; m < index.size(); ++m) {
      T* dst = g.data() + index[m] * C;
      const T* src = o.grad.data() + m * C;
      for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
    }
  });
}

}  // namespace incepreg::ops
