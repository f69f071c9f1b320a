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

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "numgame/diff/tensor.hpp"
#include "numgame/rng.hpp"

namespace numgame::diff {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

/// Grad buffer of parent `i`, or nullptr when that parent is a constant.
template <typename T>
T* parent_grad(Node<T>& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

template <typename T>
void require_same_shape(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <typename T>
void require_rank(const char* op, const BasicTensor<T>& a, std::size_t r) {
  if (a.rank() != r) {
    throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                        to_string(a.shape()));
  }
}

template <typename T, typename F, typename G>
BasicTensor<T> unary(const char* op, const BasicTensor<T>& x, F f, G dfdx_from_out) {
  Buffer<T> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result<T>(op, x.shape(), std::move(out), {x}, [dfdx_from_out](Node<T>& self) {
    T* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xin = self.parents[0]->value;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      gx[i] += self.grad[i] * dfdx_from_out(xin[i], self.value[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape("add", a, b);
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (T* g = detail::parent_grad(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (T* g = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (T* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (T* g = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

/// a * s + c
template <typename T>
BasicTensor<T> affine_scalar(const BasicTensor<T>& a, T s, T c = T(0)) {
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s + c;
  return make_result<T>("affine_scalar", a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    }
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  return affine_scalar(a, s);
}

/// Identity in the forward pass; multiplies the incoming gradient by s.
template <typename T>
BasicTensor<T> grad_scale(const BasicTensor<T>& a, T s) {
  Buffer<T> out(a.values().begin(), a.values().end());
  return make_result<T>("grad_scale", a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    }
  });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return detail::unary(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
  return detail::unary(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T out) { return T(1) - out * out; });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return detail::unary(
      "sigmoid", x,
      [](T v) {
        return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
      },
      [](T, T out) { return out * (T(1) - out); });
}

template <typename T>
BasicTensor<T> clamp(const BasicTensor<T>& x, T lo, T hi) {
  return detail::unary(
      "clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T in, T) { return (in > lo && in < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions and shape plumbing

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  return make_result<T>("sum", Shape{1}, {s}, {x}, [](Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      const T go = self.grad[0];
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += go;
    }
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeMismatch("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  Buffer<T> out(x.values().begin(), x.values().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {x}, [](Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

/// Columns [begin, end) of a matrix.
template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_rank("slice_cols", x, 2);
  const std::size_t n = x.dim(0), m = x.dim(1), w = end - begin;
  if (begin >= end || end > m) throw ShapeMismatch("slice_cols out of range");
  Buffer<T> out(n * w);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = x[r * m + begin + c];
  }
  return make_result<T>("slice_cols", Shape{n, w}, std::move(out), {x},
                        [n, m, w, begin](Node<T>& self) {
                          if (T* g = detail::parent_grad(self, 0)) {
                            for (std::size_t r = 0; r < n; ++r) {
                              for (std::size_t c = 0; c < w; ++c) {
                                g[r * m + begin + c] += self.grad[r * w + c];
                              }
                            }
                          }
                        });
}

/// Column j of an [N, M] matrix as an [N] vector.
template <typename T>
BasicTensor<T> column(const BasicTensor<T>& x, std::size_t j) {
  auto s = slice_cols(x, j, j + 1);
  return reshape(s, Shape{x.dim(0)});
}

/// Rows of `x` picked by `idx` (repeats allowed); backward scatter-adds.
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::vector<std::size_t> idx) {
  detail::require_rank("gather_rows", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  Buffer<T> out(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw IndexOutOfRange("gather_rows index " + std::to_string(idx[r]));
    std::copy_n(x.values().data() + idx[r] * d, d, out.data() + r * d);
  }
  Shape shape{idx.size(), d};  // before idx is moved into the closure
  return make_result<T>("gather_rows", std::move(shape), std::move(out), {x},
                        [idx = std::move(idx), d](Node<T>& self) {
                          if (T* g = detail::parent_grad(self, 0)) {
                            for (std::size_t r = 0; r < idx.size(); ++r) {
                              for (std::size_t c = 0; c < d; ++c) g[idx[r] * d + c] += self.grad[r * d + c];
                            }
                          }
                        });
}

/// Stacks [N_i, D] matrices along rows.
template <typename T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows of nothing");
  const std::size_t d = numel(parts[0].shape()) / parts[0].dim(0);
  Shape shape = parts[0].shape();
  std::size_t rows = 0;
  Buffer<T> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (numel(p.shape()) / p.dim(0) != d) throw ShapeMismatch("concat_rows row width");
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
    rows += p.dim(0);
  }
  shape[0] = rows;
  return make_result<T>("concat_rows", std::move(shape), std::move(out), parts,
                        [offsets](Node<T>& self) {
                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                            if (T* g = detail::parent_grad(self, k)) {
                              const std::size_t len = self.parents[k]->value.size();
                              for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offsets[k] + i];
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) throw ShapeMismatch("matmul " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Buffer<T> out(n * m);
  detail::MapMat<T>(out.data(), n, m).noalias() =
      detail::ConstMapMat<T>(a.values().data(), n, k) * detail::ConstMapMat<T>(b.values().data(), k, m);
  return make_result<T>("matmul", Shape{n, m}, std::move(out), {a, b}, [n, k, m](Node<T>& self) {
    detail::ConstMapMat<T> go(self.grad.data(), n, m);
    if (T* g = detail::parent_grad(self, 0)) {
      detail::MapMat<T>(g, n, k).noalias() +=
          go * detail::ConstMapMat<T>(self.parents[1]->value.data(), k, m).transpose();
    }
    if (T* g = detail::parent_grad(self, 1)) {
      detail::MapMat<T>(g, k, m).noalias() +=
          detail::ConstMapMat<T>(self.parents[0]->value.data(), n, k).transpose() * go;
    }
  });
}

/// x [N, M] + b [M] broadcast over rows.
template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& b) {
  detail::require_rank("add_bias", x, 2);
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (b.size() != m) throw ShapeMismatch("add_bias width");
  Buffer<T> out(x.values().begin(), x.values().end());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] += b[c];
  }
  return make_result<T>("add_bias", x.shape(), std::move(out), {x, b}, [n, m](Node<T>& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (T* g = detail::parent_grad(self, 1)) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < m; ++c) g[c] += self.grad[r * m + c];
      }
    }
  });
}

/// Row-wise softmax of an [N, M] matrix.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  detail::require_rank("softmax", x, 2);
  const std::size_t n = x.dim(0), m = x.dim(1);
  Buffer<T> out(n * m);
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = x.values().data() + r * m;
    const T mx = *std::max_element(row, row + m);
    T z = T(0);
    for (std::size_t c = 0; c < m; ++c) z += (out[r * m + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] /= z;
  }
  return make_result<T>("softmax", x.shape(), std::move(out), {x}, [n, m](Node<T>& self) {
    T* g = detail::parent_grad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      const T* y = self.value.data() + r * m;
      const T* gy = self.grad.data() + r * m;
      T dot = T(0);
      for (std::size_t c = 0; c < m; ++c) dot += y[c] * gy[c];
      for (std::size_t c = 0; c < m; ++c) g[r * m + c] += y[c] * (gy[c] - dot);
    }
  });
}

/// scores[b, j] = scale * <q[b], c[b * J + j]> for q [B, D], c [B*J, D].
template <typename T>
BasicTensor<T> batched_scores(const BasicTensor<T>& q, const BasicTensor<T>& c, std::size_t per_row,
                              T scale_factor = T(1)) {
  detail::require_rank("batched_scores", q, 2);
  detail::require_rank("batched_scores", c, 2);
  const std::size_t b = q.dim(0), d = q.dim(1), J = per_row;
  if (c.dim(0) != b * J || c.dim(1) != d) {
    throw ShapeMismatch("batched_scores " + to_string(q.shape()) + " vs " + to_string(c.shape()));
  }
  Buffer<T> out(b * J);
  for (std::size_t r = 0; r < b; ++r) {
    const T* qr = q.values().data() + r * d;
    for (std::size_t j = 0; j < J; ++j) {
      const T* cr = c.values().data() + (r * J + j) * d;
      T s = T(0);
      for (std::size_t k = 0; k < d; ++k) s += qr[k] * cr[k];
      out[r * J + j] = s * scale_factor;
    }
  }
  return make_result<T>("batched_scores", Shape{b, J}, std::move(out), {q, c},
                        [b, d, J, scale_factor](Node<T>& self) {
                          const auto& qv = self.parents[0]->value;
                          const auto& cv = self.parents[1]->value;
                          T* gq = detail::parent_grad(self, 0);
                          T* gc = detail::parent_grad(self, 1);
                          for (std::size_t r = 0; r < b; ++r) {
                            for (std::size_t j = 0; j < J; ++j) {
                              const T go = self.grad[r * J + j] * scale_factor;
                              if (go == T(0)) continue;
                              const std::size_t ci = (r * J + j) * d;
                              for (std::size_t k = 0; k < d; ++k) {
                                if (gq) gq[r * d + k] += go * cv[ci + k];
                                if (gc) gc[ci + k] += go * qv[r * d + k];
                              }
                            }
                          }
                        });
}

/// Per-row multi-class hinge: sum_{j != t} max(0, margin - s_t + s_j).
template <typename T>
BasicTensor<T> multiclass_hinge(const BasicTensor<T>& scores, const std::vector<std::size_t>& targets,
                                T margin) {
  detail::require_rank("multiclass_hinge", scores, 2);
  const std::size_t b = scores.dim(0), J = scores.dim(1);
  if (targets.size() != b) throw ShapeMismatch("multiclass_hinge: one target per row required");
  Buffer<T> out(b, T(0));
  for (std::size_t r = 0; r < b; ++r) {
    if (targets[r] >= J) throw IndexOutOfRange("hinge target " + std::to_string(targets[r]));
    const T* s = scores.values().data() + r * J;
    for (std::size_t j = 0; j < J; ++j) {
      if (j == targets[r]) continue;
      out[r] += std::max(T(0), margin - s[targets[r]] + s[j]);
    }
  }
  return make_result<T>("multiclass_hinge", Shape{b}, std::move(out), {scores},
                        [b, J, targets, margin](Node<T>& self) {
                          T* g = detail::parent_grad(self, 0);
                          if (!g) return;
                          const auto& sv = self.parents[0]->value;
                          for (std::size_t r = 0; r < b; ++r) {
                            const std::size_t t = targets[r];
                            const T* s = sv.data() + r * J;
                            for (std::size_t j = 0; j < J; ++j) {
                              if (j == t) continue;
                              if (margin - s[t] + s[j] > T(0)) {
                                g[r * J + j] += self.grad[r];
                                g[r * J + t] -= self.grad[r];
                              }
                            }
                          }
                        });
}

/// Temperature-relaxed categorical sample with straight-through
/// discretisation: the forward value is the hard one-hot of
/// argmax(logits + gumbel noise); the backward pass uses the Jacobian of
/// softmax((logits + noise) / tau).
template <typename T>
BasicTensor<T> gumbel_straight_through(const BasicTensor<T>& logits, T tau, Rng& rng) {
  detail::require_rank("gumbel_straight_through", logits, 2);
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  Buffer<T> soft(n * m), hard(n * m, T(0));
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = logits.values().data() + r * m;
    T* y = soft.data() + r * m;
    for (std::size_t c = 0; c < m; ++c) y[c] = (row[c] + static_cast<T>(rng.gumbel())) / tau;
    const std::size_t best = static_cast<std::size_t>(std::max_element(y, y + m) - y);
    const T mx = y[best];
    T z = T(0);
    for (std::size_t c = 0; c < m; ++c) z += (y[c] = std::exp(y[c] - mx));
    for (std::size_t c = 0; c < m; ++c) y[c] /= z;
    hard[r * m + best] = T(1);
  }
  return make_result<T>("gumbel_straight_through", logits.shape(), std::move(hard), {logits},
                        [n, m, tau, soft = std::move(soft)](Node<T>& self) {
                          T* g = detail::parent_grad(self, 0);
                          if (!g) return;
                          for (std::size_t r = 0; r < n; ++r) {
                            const T* y = soft.data() + r * m;
                            const T* gy = self.grad.data() + r * m;
                            T dot = T(0);
                            for (std::size_t c = 0; c < m; ++c) dot += y[c] * gy[c];
                            for (std::size_t c = 0; c < m; ++c) g[r * m + c] += y[c] * (gy[c] - dot) / tau;
                          }
                        });
}

/// Hard one-hot of the row-wise argmax; no gradient.
template <typename T>
BasicTensor<T> argmax_one_hot(const BasicTensor<T>& logits) {
  detail::require_rank("argmax_one_hot", logits, 2);
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  Buffer<T> hard(n * m, T(0));
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = logits.values().data() + r * m;
    hard[r * m + static_cast<std::size_t>(std::max_element(row, row + m) - row)] = T(1);
  }
  return BasicTensor<T>::from_buffer(logits.shape(), std::move(hard));
}

// ---------------------------------------------------------------------------
// Convolution and pooling, NCHW layout

namespace detail {

/// cols[(c*k + ky)*k + kx, y*W + x] for one image of a same-padded stride-1
/// conv. `cols` must hold C*k*k*H*W values.
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k, T* cols) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t hw = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = x + c * hw;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* d = cols + ((c * k + ky) * k + kx) * hw;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(W, static_cast<std::ptrdiff_t>(W) - dx);
        for (std::size_t y = 0; y < H; ++y) {
          T* row = d + y * W;
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(row, row + W, T(0));
            continue;
          }
          std::fill(row, row + x0, T(0));
          std::copy(src + sy * W + x0 + dx, src + sy * W + x1 + dx, row + x0);
          std::fill(row + x1, row + W, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k, T* gx) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t hw = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    T* dst = gx + c * hw;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* s = cols + ((c * k + ky) * k + kx) * hw;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(W, static_cast<std::ptrdiff_t>(W) - dx);
        for (std::size_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
          T* drow = dst + sy * W + dx;
          const T* srow = s + y * W;
          for (std::ptrdiff_t xx = x0; xx < x1; ++xx) drow[xx] += srow[xx];
        }
      }
    }
  }
}

}  // namespace detail

/// Same-padded, stride-1 2D convolution. x [N,C,H,W], w [O,C,k,k], b [O].
/// Works one image at a time so the unfolded patch matrix stays in cache;
/// the backward pass unfolds again rather than keeping it.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  detail::require_rank("conv2d", x, 4);
  detail::require_rank("conv2d", w, 4);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), k = w.dim(2);
  if (w.dim(1) != C || w.dim(3) != k || k % 2 == 0 || b.size() != O) {
    throw ShapeMismatch("conv2d input " + to_string(x.shape()) + " weight " + to_string(w.shape()));
  }
  const std::size_t hw = H * W, K = C * k * k;
  Buffer<T> cols(K * hw);
  Buffer<T> out(N * O * hw);
  detail::ConstMapMat<T> wm(w.values().data(), O, K);
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(x.values().data() + n * C * hw, C, H, W, k, cols.data());
    detail::MapMat<T> y(out.data() + n * O * hw, O, hw);
    y.noalias() = wm * detail::ConstMapMat<T>(cols.data(), K, hw);
    for (std::size_t o = 0; o < O; ++o) y.row(o).array() += b[o];
  }
  return make_result<T>(
      "conv2d", Shape{N, O, H, W}, std::move(out), {x, w, b}, [N, C, H, W, O, k, hw, K](Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        T* gw = detail::parent_grad(self, 1);
        T* gb = detail::parent_grad(self, 2);
        const auto& xv = self.parents[0]->value;
        detail::ConstMapMat<T> wm(self.parents[1]->value.data(), O, K);
        Buffer<T> cols(K * hw);
        detail::RowMat<T> gcols(K, hw);
        for (std::size_t n = 0; n < N; ++n) {
          detail::ConstMapMat<T> go(self.grad.data() + n * O * hw, O, hw);
          if (gb) {
            for (std::size_t o = 0; o < O; ++o) gb[o] += go.row(o).sum();
          }
          if (gw) {
            detail::im2col(xv.data() + n * C * hw, C, H, W, k, cols.data());
            detail::MapMat<T>(gw, O, K).noalias() += go * detail::ConstMapMat<T>(cols.data(), K, hw).transpose();
          }
          if (gx) {
            gcols.noalias() = wm.transpose() * go;
            detail::col2im(gcols.data(), C, H, W, k, gx + n * C * hw);
          }
        }
      });
}

/// Non-overlapping k x k max pooling (H, W divisible by k).
template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t k = 2) {
  detail::require_rank("max_pool2d", x, 4);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % k || W % k) throw ShapeMismatch("max_pool2d: spatial size not divisible by window");
  const std::size_t Ho = H / k, Wo = W / k;
  Buffer<T> out(N * C * Ho * Wo);
  std::vector<std::size_t> arg(out.size());
  const auto xv = x.values();
  for (std::size_t p = 0; p < N * C; ++p) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = p * H * W + (oy * k) * W + ox * k;
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t i = p * H * W + (oy * k + dy) * W + ox * k + dx;
            if (xv[i] > xv[best]) best = i;
          }
        }
        const std::size_t o = (p * Ho + oy) * Wo + ox;
        out[o] = xv[best];
        arg[o] = best;
      }
    }
  }
  return make_result<T>("max_pool2d", Shape{N, C, Ho, Wo}, std::move(out), {x},
                        [arg = std::move(arg)](Node<T>& self) {
                          if (T* g = detail::parent_grad(self, 0)) {
                            for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
                          }
                        });
}

/// Non-overlapping k x k mean pooling.
template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, std::size_t k = 2) {
  detail::require_rank("avg_pool2d", x, 4);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % k || W % k) throw ShapeMismatch("avg_pool2d: spatial size not divisible by window");
  const std::size_t Ho = H / k, Wo = W / k;
  const T inv = T(1) / static_cast<T>(k * k);
  Buffer<T> out(N * C * Ho * Wo, T(0));
  const auto xv = x.values();
  for (std::size_t p = 0; p < N * C; ++p) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t xx = 0; xx < W; ++xx) {
        out[(p * Ho + y / k) * Wo + xx / k] += xv[p * H * W + y * W + xx] * inv;
      }
    }
  }
  return make_result<T>("avg_pool2d", Shape{N, C, Ho, Wo}, std::move(out), {x},
                        [N, C, H, W, Ho, Wo, k, inv](Node<T>& self) {
                          T* g = detail::parent_grad(self, 0);
                          if (!g) return;
                          for (std::size_t p = 0; p < N * C; ++p) {
                            for (std::size_t y = 0; y < H; ++y) {
                              for (std::size_t xx = 0; xx < W; ++xx) {
                                g[p * H * W + y * W + xx] += self.grad[(p * Ho + y / k) * Wo + xx / k] * inv;
                              }
                            }
                          }
                        });
}

}  // namespace numgame::diff
