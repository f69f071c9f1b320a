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

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "numgame/error.hpp"

namespace numgame {

/// Square grayscale canvas, row-major, values in [0, 1] with 0 = black.
struct Raster {
  std::size_t side = 0;
  std::vector<float> pixels;

  Raster() = default;
  explicit Raster(std::size_t s, float fill = 1.0f) : side(s), pixels(s * s, fill) {}

  float& at(std::size_t row, std::size_t col) { return pixels[row * side + col]; }
  float at(std::size_t row, std::size_t col) const { return pixels[row * side + col]; }

  friend bool operator==(const Raster&, const Raster&) = default;
};

/// Area-averaging downsample to `target` x `target`; each source pixel falls
/// into bin floor(i * target / side).
inline std::vector<float> downsample(std::span<const float> pixels, std::size_t side, std::size_t target) {
  std::vector<float> out(target * target, 0.0f);
  std::vector<float> weight(target * target, 0.0f);
  for (std::size_t r = 0; r < side; ++r) {
    const std::size_t br = r * target / side;
    for (std::size_t c = 0; c < side; ++c) {
      const std::size_t bc = c * target / side;
      out[br * target + bc] += pixels[r * side + c];
      weight[br * target + bc] += 1.0f;
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= std::max(weight[i], 1.0f);
  return out;
}

inline std::vector<float> downsample(const Raster& r, std::size_t target) {
  return downsample(r.pixels, r.side, target);
}

inline void write_png(const std::filesystem::path& path, const Raster& r) {
  cv::Mat img(static_cast<int>(r.side), static_cast<int>(r.side), CV_8UC1);
  for (std::size_t i = 0; i < r.side; ++i) {
    for (std::size_t j = 0; j < r.side; ++j) {
      const float v = std::clamp(r.at(i, j), 0.0f, 1.0f);
      img.at<std::uint8_t>(static_cast<int>(i), static_cast<int>(j)) =
          static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  if (!cv::imwrite(path.string(), img)) throw IoError("cannot write " + path.string());
}

inline Raster read_png(const std::filesystem::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (img.empty()) throw IoError("cannot read " + path.string());
  if (img.rows != img.cols) throw IoError(path.string() + " is not square");
  Raster r(static_cast<std::size_t>(img.rows));
  for (std::size_t i = 0; i < r.side; ++i) {
    for (std::size_t j = 0; j < r.side; ++j) {
      r.at(i, j) = static_cast<float>(img.at<std::uint8_t>(static_cast<int>(i), static_cast<int>(j))) / 255.0f;
    }
  }
  return r;
}

}  // namespace numgame
