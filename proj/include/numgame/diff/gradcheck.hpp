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
#include <cmath>
#include <functional>
#include <vector>

#include "numgame/diff/tensor.hpp"

namespace numgame::diff {

/// Compares the reverse-mode gradient of a scalar function against central
/// differences. Returns max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
/// Coordinates for which `skip(i)` returns true are left out (kinks).
template <typename T>
double grad_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f,
                  const BasicTensor<T>& x, T eps,
                  const std::function<bool(std::size_t)>& skip = nullptr) {
  auto probe = BasicTensor<T>::from(x.shape(), std::vector<T>(x.values().begin(), x.values().end()), true);
  auto y = f(probe);
  backward(y);
  std::vector<T> analytic(probe.size(), T(0));
  if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (skip && skip(i)) continue;
    std::vector<T> v(x.values().begin(), x.values().end());
    v[i] = x[i] + eps;
    const double up = static_cast<double>(f(BasicTensor<T>::from(x.shape(), v)).item());
    v[i] = x[i] - eps;
    const double down = static_cast<double>(f(BasicTensor<T>::from(x.shape(), v)).item());
    const double numeric = (up - down) / (2.0 * static_cast<double>(eps));
    if (!std::isfinite(numeric)) throw NonFiniteValue("grad_check: non-finite finite difference");
    const double err = std::abs(static_cast<double>(analytic[i]) - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace numgame::diff
