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

// Named parameter store, a portable seeded RNG and the Adam optimiser.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "incepreg/tensor.hpp"

namespace incepreg {

// mt19937_64 with hand-rolled distributions so streams are identical across
// standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }
  std::uint64_t next() { return eng_(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0;
  bool has_spare_ = false;
};

// Ordered (by name) collection of leaf tensors. Names are dotted paths such
// as "fusion.moving.t1ce.b3x3.weight"; prefixes address subtrees.
template <class T>
class ModelParams {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    if (tensors_.count(name)) throw std::invalid_argument("duplicate parameter name " + name);
    t.node()->requires_grad = true;
    return tensors_[name] = std::move(t);
  }

  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    return const_cast<Tensor<T>&>(static_cast<const ModelParams&>(*this).at(name));
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  std::map<std::string, Tensor<T>>& items() { return tensors_; }
  const std::map<std::string, Tensor<T>>& items() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }

  std::vector<std::string> names(const std::string& prefix = "") const {
    std::vector<std::string> out;
    for (const auto& [k, v] : tensors_)
      if (k.compare(0, prefix.size(), prefix) == 0) out.push_back(k);
    return out;
  }

  std::size_t count(const std::string& prefix = "") const {
    std::size_t n = 0;
    for (const auto& k : names(prefix)) n += at(k).numel();
    return n;
  }

  void merge(const ModelParams& other) {
    for (const auto& [k, v] : other.tensors_) add(k, v);
  }

  void zero_grad() {
    for (auto& [k, v] : tensors_) v.zero_grad();
  }

  bool all_finite() const {
    for (const auto& [k, v] : tensors_)
      for (T x : v.values())
        if (!std::isfinite(x)) return false;
    return true;
  }

  // Deep copy with converted scalar type.
  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& [k, v] : tensors_)
      out.add(k, Tensor<U>::from(v.shape(), std::vector<U>(v.values().begin(), v.values().end())));
    return out;
  }

  ModelParams clone() const { return cast<T>(); }

  bool operator==(const ModelParams& o) const {
    if (tensors_.size() != o.tensors_.size()) return false;
    for (const auto& [k, v] : tensors_) {
      auto it = o.tensors_.find(k);
      if (it == o.tensors_.end() || it->second.shape() != v.shape()) return false;
      if (!std::equal(v.values().begin(), v.values().end(), it->second.values().begin())) return false;
    }
    return true;
  }

 private:
  std::map<std::string, Tensor<T>> tensors_;
};

// Fan-in scaled uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
Tensor<T> uniform_init(Rng& rng, Shape shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> normal_init(Rng& rng, Shape shape, double stddev) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(stddev * std::clamp(rng.normal(), -2.0, 2.0));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moments are keyed by parameter name.
template <class T>
class Adam {
 public:
  explicit Adam(const ModelParams<T>& params, AdamConfig cfg = {}) : cfg_(cfg) {
    for (const auto& [k, v] : params.items()) {
      m_[k].assign(v.numel(), T(0));
      v_[k].assign(v.numel(), T(0));
    }
  }

  void step(ModelParams<T>& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(cfg_.eps);
    for (auto& [name, p] : params.items()) {
      if (!p.has_grad()) continue;
      auto w = p.mutable_values();
      auto g = p.grad();
      auto& m = m_.at(name);
      auto& v = v_.at(name);
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  std::map<std::string, std::vector<T>>& first_moments() { return m_; }
  std::map<std::string, std::vector<T>>& second_moments() { return v_; }
  const std::map<std::string, std::vector<T>>& first_moments() const { return m_; }
  const std::map<std::string, std::vector<T>>& second_moments() const { return v_; }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::vector<T>> m_, v_;
};

}  // namespace incepreg
