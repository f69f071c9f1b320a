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
#include <string>
#include <utility>
#include <vector>

#include "numgame/diff/ops.hpp"
#include "numgame/rng.hpp"

namespace numgame::diff {

template <typename T>
struct NamedParameter {
  std::string name;
  BasicTensor<T> tensor;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

template <typename T>
BasicTensor<T> uniform_parameter(Shape shape, T bound, Rng& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return BasicTensor<T>::from(std::move(shape), std::move(v), true);
}

/// y = x W + b, x [N, in].
template <typename T = float>
class Affine {
 public:
  Affine() = default;
  Affine(std::size_t in, std::size_t out, Rng& rng)
      : weight_(uniform_parameter<T>({in, out}, static_cast<T>(std::sqrt(6.0 / static_cast<double>(in + out))), rng)),
        bias_(BasicTensor<T>::zeros({out}, true)) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return add_bias(matmul(x, weight_), bias_); }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight_});
    out.push_back({prefix + ".bias", bias_});
  }

  std::size_t in_features() const { return weight_.dim(0); }
  std::size_t out_features() const { return weight_.dim(1); }
  const BasicTensor<T>& weight() const { return weight_; }
  const BasicTensor<T>& bias() const { return bias_; }

 private:
  BasicTensor<T> weight_;
  BasicTensor<T> bias_;
};

template <typename T = float>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Rng& rng)
      : weight_(uniform_parameter<T>(
            {out_channels, in_channels, kernel, kernel},
            static_cast<T>(std::sqrt(6.0 / static_cast<double>(in_channels * kernel * kernel))), rng)),
        bias_(BasicTensor<T>::zeros({out_channels}, true)) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return conv2d(x, weight_, bias_); }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight_});
    out.push_back({prefix + ".bias", bias_});
  }

 private:
  BasicTensor<T> weight_;
  BasicTensor<T> bias_;
};

template <typename T>
struct LstmState {
  BasicTensor<T> h;
  BasicTensor<T> c;
};

/// Gated recurrent cell (LSTM). Gate order in the fused matrices: input,
/// forget, candidate, output. Forget bias starts at 1.
template <typename T = float>
class LstmCell {
 public:
  LstmCell() = default;
  LstmCell(std::size_t input, std::size_t hidden, Rng& rng) : hidden_(hidden) {
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hidden)));
    input_weight_ = uniform_parameter<T>({input, 4 * hidden}, bound, rng);
    hidden_weight_ = uniform_parameter<T>({hidden, 4 * hidden}, bound, rng);
    std::vector<T> b(4 * hidden, T(0));
    for (std::size_t i = hidden; i < 2 * hidden; ++i) b[i] = T(1);
    bias_ = BasicTensor<T>::from({4 * hidden}, std::move(b), true);
  }

  LstmState<T> operator()(const BasicTensor<T>& x, const LstmState<T>& s) const {
    auto gates = add_bias(add(matmul(x, input_weight_), matmul(s.h, hidden_weight_)), bias_);
    const std::size_t H = hidden_;
    auto i = sigmoid(slice_cols(gates, 0, H));
    auto f = sigmoid(slice_cols(gates, H, 2 * H));
    auto g = tanh(slice_cols(gates, 2 * H, 3 * H));
    auto o = sigmoid(slice_cols(gates, 3 * H, 4 * H));
    auto c = add(mul(f, s.c), mul(i, g));
    auto h = mul(o, tanh(c));
    return {h, c};
  }

  LstmState<T> zero_state(std::size_t batch) const {
    return {BasicTensor<T>::zeros({batch, hidden_}), BasicTensor<T>::zeros({batch, hidden_})};
  }

  std::size_t hidden_size() const { return hidden_; }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".input_weight", input_weight_});
    out.push_back({prefix + ".hidden_weight", hidden_weight_});
    out.push_back({prefix + ".bias", bias_});
  }

 private:
  std::size_t hidden_ = 0;
  BasicTensor<T> input_weight_;
  BasicTensor<T> hidden_weight_;
  BasicTensor<T> bias_;
};

template <typename T>
std::size_t parameter_count(const ParameterList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

template <typename T>
void zero_grad(ParameterList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace numgame::diff
