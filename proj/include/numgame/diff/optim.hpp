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

#include <cmath>
#include <vector>

#include "numgame/diff/layers.hpp"

namespace numgame::diff {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global gradient-norm clip; <= 0 disables.
  double clip_norm = 0.0;
};

/// Adaptive per-parameter step sizes from running first and second moments.
template <typename T = float>
class Adam {
 public:
  Adam(ParameterList<T> params, AdamOptions options = {}) : params_(std::move(params)), options_(options) {
    for (const auto& p : params_) {
      first_.emplace_back(p.tensor.size(), 0.0);
      second_.emplace_back(p.tensor.size(), 0.0);
    }
  }

  void step() {
    ++steps_;
    double scale = 1.0;
    if (options_.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& p : params_) {
        for (T g : p.tensor.grad()) sq += static_cast<double>(g) * g;
      }
      const double norm = std::sqrt(sq);
      if (norm > options_.clip_norm) scale = options_.clip_norm / norm;
    }
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& t = params_[k].tensor;
      if (!t.has_grad()) continue;
      auto v = t.mutable_values();
      const auto g = t.grad();
      auto& m1 = first_[k];
      auto& m2 = second_[k];
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double gi = static_cast<double>(g[i]) * scale;
        m1[i] = options_.beta1 * m1[i] + (1.0 - options_.beta1) * gi;
        m2[i] = options_.beta2 * m2[i] + (1.0 - options_.beta2) * gi * gi;
        const double update = options_.learning_rate * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + options_.epsilon);
        v[i] = static_cast<T>(static_cast<double>(v[i]) - update);
      }
    }
  }

  void zero_grad() { diff::zero_grad(params_); }

  double learning_rate() const { return options_.learning_rate; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }

  long steps() const { return steps_; }
  const ParameterList<T>& parameters() const { return params_; }

 private:
  ParameterList<T> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  long steps_ = 0;
};

}  // namespace numgame::diff
