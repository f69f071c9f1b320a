// Copyright 2026 The numgame Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <vector>

#include "numgame/error.hpp"

namespace numgame::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Allocator for tensor storage. Every buffer starts on a 64-byte boundary,
/// so vectorised kernels see the same alignment (and hence the same
/// summation order) on every run regardless of heap layout.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// One vertex of the recorded computation. `backward` reads this node's
/// grad and accumulates into the grads of `parents`.
template <typename T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Buffer<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for its lifetime (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor handle. Copies share the underlying node.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    Buffer<T> v(numel(shape), T(0));
    return from_buffer(std::move(shape), std::move(v), requires_grad);
  }

  static BasicTensor full(Shape shape, T fill, bool requires_grad = false) {
    Buffer<T> v(numel(shape), fill);
    return from_buffer(std::move(shape), std::move(v), requires_grad);
  }

  static BasicTensor from(Shape shape, const std::vector<T>& values, bool requires_grad = false) {
    return from_buffer(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad);
  }

  static BasicTensor from_buffer(Shape shape, Buffer<T> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw ShapeMismatch("tensor shape " + to_string(shape) + " does not hold " +
                          std::to_string(values.size()) + " values");
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return BasicTensor(std::move(n));
  }

  static BasicTensor scalar(T v, bool requires_grad = false) {
    return from(Shape{1}, std::vector<T>{v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->grad.empty(); }

  T item() const {
    if (size() != 1) throw ShapeMismatch("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  T operator[](std::size_t i) const { return node_->value[i]; }

  void zero_grad() { node_->grad.clear(); }

  /// Detached copy: same values, no history.
  BasicTensor detach() const { return from_buffer(shape(), node_->value, false); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensor = BasicTensor<float>;

namespace detail {

template <typename T>
bool all_finite(std::span<const T> v) {
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
    constexpr Bits kExp = std::is_same_v<T, float> ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
    bool bad = false;
    for (T x : v) bad |= (std::bit_cast<Bits>(x) & kExp) == kExp;
    return !bad;
  } else {
    return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
  }
}

template <typename T>
void check_finite(const char* op, std::span<const T> v) {
  if (all_finite(v)) return;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NonFiniteValue(std::string("non-finite value produced by '") + op + "' at element " +
                           std::to_string(i));
    }
  }
}

}  // namespace detail

/// Builds an op result. History is only recorded when grad mode is on and at
/// least one parent needs a gradient.
template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, Buffer<T> value,
                           std::vector<BasicTensor<T>> parents,
                           std::function<void(Node<T>&)> backward) {
  detail::check_finite<T>(op, value);
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  if (grad_enabled()) {
    bool any = false;
    for (auto& p : parents) any = any || p.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (auto& p : parents) n->parents.push_back(p.node());
      n->backward = std::move(backward);
    }
  }
  return BasicTensor<T>(std::move(n));
}

/// Reverse pass from a scalar root. Leaf grads accumulate across calls until
/// cleared with zero_grad().
template <typename T>
void backward(const BasicTensor<T>& root) {
  if (root.size() != 1) throw NonScalarRoot("backward root has shape " + to_string(root.shape()));
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->backward || n->grad.empty()) continue;
    n->backward(*n);
    for (auto& p : n->parents) {
      if (!p->grad.empty()) {
        detail::check_finite<T>(n->op, std::span<const T>(p->grad));
      }
    }
  }
}

}  // namespace numgame::diff
