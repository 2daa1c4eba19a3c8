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

// Minimal reverse-mode automatic differentiation over dense row-major
// tensors. A Tensor is a handle to a graph node; ops build new nodes and
// attach a backward closure when any input requires a gradient.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace incepreg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace ad {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace ad

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape), T(0));
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape), fill);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw std::invalid_argument("tensor: value count does not match shape " + shape_str(shape));
    auto n = std::make_shared<ad::Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> values() const { return node_->value; }
  // Only meaningful on leaves; mutating an interior node invalidates its graph.
  std::span<T> mutable_values() { return node_->value; }
  const T& operator[](std::size_t i) const { return node_->value[i]; }
  T item() const {
    if (numel() != 1) throw std::logic_error("tensor: item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->grad.empty(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  // Copy of the values with no graph history.
  Tensor detach() const { return from(shape(), node_->value, false); }

  // Seeds d(self)/d(self) = 1 and propagates through the graph.
  void backward() const;

  const std::shared_ptr<ad::Node<T>>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<ad::Node<T>> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<ad::Node<T>> node_;
};

namespace ad {

// Builds the output node of an op. The closure receives the output node and
// must accumulate into parents that require a gradient.
template <class T, class Backward>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                  Backward&& backward) {
  auto out = std::make_shared<Node<T>>();
  out->shape = std::move(shape);
  out->value = std::move(value);
  bool rg = false;
  for (const auto& in : inputs) rg = rg || (in.defined() && in.requires_grad());
  if (rg) {
    out->requires_grad = true;
    out->parents.reserve(inputs.size());
    for (const auto& in : inputs) out->parents.push_back(in.node());
    out->backward = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(out));
}

}  // namespace ad

template <class T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw std::logic_error("backward: root must be a scalar");
  if (!requires_grad()) return;
  using N = ad::Node<T>;
  std::vector<N*> order;
  std::unordered_set<N*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<N*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      N* p = n->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    N* n = *it;
    if (!n->backward || n->grad.empty()) continue;
    n->backward(*n);
    // Interior gradients are not needed once propagated.
    if (n != node_.get()) std::vector<T>().swap(n->grad);
  }
}

}  // namespace incepreg
