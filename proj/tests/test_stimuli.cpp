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

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>
#include <vector>

#include "numgame/stimuli.hpp"

using namespace numgame;

namespace {

// Union-find over black pixels with 4-neighbourhood; independent of the
// library's flood fill.
std::size_t components_oracle(const Raster& r) {
  const std::size_t s = r.side;
  std::vector<std::size_t> parent(s * s);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  auto black = [&](std::size_t i, std::size_t j) { return r.at(i, j) < 0.5f; };
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      if (!black(i, j)) continue;
      if (i + 1 < s && black(i + 1, j)) parent[find(i * s + j)] = find((i + 1) * s + j);
      if (j + 1 < s && black(i, j + 1)) parent[find(i * s + j)] = find(i * s + j + 1);
    }
  }
  std::set<std::size_t> roots;
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      if (black(i, j)) roots.insert(find(i * s + j));
    }
  }
  return roots.size();
}

double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

DatasetSpec small_spec() {
  DatasetSpec s;
  s.classes = {1, 2, 3};
  s.counts = {6, 5, 4};
  s.seed = 11;
  return s;
}

}  // namespace

TEST_CASE("single dot radius follows the closed form", "[stimuli]") {
  Rng rng(1);
  const auto img = generate_dot_image(1, 256, {0.05, 0.05}, rng);
  REQUIRE(img.dots.size() == 1);
  const double r = std::sqrt(0.05 * 256.0 * 256.0 / (1.0 * M_PI));
  CHECK(img.dots[0].r == Catch::Approx(r).epsilon(0.02));
  CHECK(r == Catch::Approx(32.3).margin(0.05));
  const double bf = black_fraction(img.canvas);
  CHECK(bf >= 0.048);
  CHECK(bf <= 0.052);
}

TEST_CASE("five dots on a full-size canvas", "[stimuli]") {
  Rng rng(2);
  const auto img = generate_dot_image(5, 256, {0.05, 0.10}, rng);
  CHECK(count_components(img.canvas) == 5);
  CHECK(components_oracle(img.canvas) == 5);
  CHECK(img.black_fraction >= 0.05);
  CHECK(img.black_fraction <= 0.10);
}

TEST_CASE("numerosity below one is rejected", "[stimuli]") {
  Rng rng(3);
  CHECK_THROWS_AS(generate_dot_image(0, 64, {0.05, 0.10}, rng), InvalidNumerosity);
  CHECK_THROWS_AS(generate_dot_image(-2, 64, {0.05, 0.10}, rng), InvalidNumerosity);
}

TEST_CASE("infeasible numerosity reports the constraint", "[stimuli]") {
  Rng rng(4);
  CHECK_THROWS_AS(generate_dot_image(15, 64, {0.05, 0.10}, rng), InfeasibleConstraint);
  DatasetSpec spec;
  spec.classes = {1, 15};
  spec.counts = {2, 2};
  try {
    build_dataset(spec);
    FAIL("expected InfeasibleConstraint");
  } catch (const InfeasibleConstraint& e) {
    CHECK(std::string(e.what()).find("15") != std::string::npos);
  }
}

TEST_CASE("component counting on constructed canvases", "[stimuli]") {
  Raster white(16);
  CHECK(count_components(white) == 0);

  Raster blob(16);
  for (std::size_t j = 2; j < 12; ++j) blob.at(5, j) = 0.0f;  // bar joining two squares
  for (std::size_t i = 3; i < 8; ++i) {
    blob.at(i, 2) = 0.0f;
    blob.at(i, 11) = 0.0f;
  }
  CHECK(count_components(blob) == 1);

  Raster diagonal(8);
  diagonal.at(2, 2) = 0.0f;
  diagonal.at(3, 3) = 0.0f;  // touches only at a corner
  CHECK(count_components(diagonal) == 2);
}

TEST_CASE("generated images match the union-find oracle", "[stimuli]") {
  Rng rng(5);
  for (int n = 1; n <= 5; ++n) {
    for (int k = 0; k < 10; ++k) {
      const auto img = generate_dot_image(n, 64, {0.05, 0.10}, rng);
      CHECK(components_oracle(img.canvas) == static_cast<std::size_t>(n));
    }
  }
}

TEST_CASE("dot span geometry", "[stimuli]") {
  DotImage one;
  one.dots = {{30.0, 30.0, 5.0}};
  CHECK(dot_span(one) == Catch::Approx(10.0 * std::sqrt(2.0)));

  DotImage corners;
  corners.dots = {{5.0, 5.0, 4.0}, {59.0, 59.0, 4.0}};  // extents touch the 1 px margin
  CHECK(dot_span(corners) == Catch::Approx(62.0 * std::sqrt(2.0)));

  Rng rng(6);
  for (int k = 0; k < 50; ++k) {
    const auto img = generate_dot_image(1 + k % 5, 64, {0.05, 0.10}, rng);
    CHECK(dot_span(img) <= 64.0 * std::sqrt(2.0));
  }
}

TEST_CASE("dot placement invariants hold on random images", "[stimuli]") {
  Rng rng(7);
  for (int k = 0; k < 300; ++k) {
    const int n = 1 + k % 5;
    const auto img = generate_dot_image(n, 64, {0.05, 0.10}, rng);
    REQUIRE(img.dots.size() == static_cast<std::size_t>(n));
    REQUIRE(img.numerosity == n);
    CHECK(count_components(img.canvas) == static_cast<std::size_t>(n));
    CHECK(img.black_fraction == black_fraction(img.canvas));
    CHECK(img.black_fraction >= 0.05);
    CHECK(img.black_fraction <= 0.10);
    for (std::size_t a = 0; a < img.dots.size(); ++a) {
      const auto& d = img.dots[a];
      CHECK(d.r >= 3.0);
      CHECK(d.x - d.r >= 1.0);
      CHECK(d.y - d.r >= 1.0);
      CHECK(d.x + d.r <= 63.0);
      CHECK(d.y + d.r <= 63.0);
      for (std::size_t b = a + 1; b < img.dots.size(); ++b) {
        const auto& e = img.dots[b];
        CHECK(std::hypot(d.x - e.x, d.y - e.y) > d.r + e.r);
      }
    }
  }
}

TEST_CASE("black fraction is uncorrelated with numerosity", "[stimuli]") {
  // 5000 images keep the sampling std of r near 0.014, well inside 0.1.
  Rng rng(7);
  std::vector<double> ns, fractions;
  for (int k = 0; k < 5000; ++k) {
    const int n = 1 + k % 5;
    ns.push_back(n);
    fractions.push_back(generate_dot_image(n, 64, {0.05, 0.10}, rng).black_fraction);
  }
  CHECK(std::abs(pearson_oracle(ns, fractions)) <= 0.1);
}

TEST_CASE("frequency setups", "[stimuli]") {
  CHECK(frequency_counts("uniform", 5, 700) == std::vector<std::size_t>(5, 700));
  CHECK(frequency_counts("increase", 5, 700) == std::vector<std::size_t>{100, 200, 300, 400, 700});
  CHECK(frequency_counts("decrease", 5, 700) == std::vector<std::size_t>{700, 400, 300, 200, 100});
  CHECK(frequency_counts("increase", 5, 140) == std::vector<std::size_t>{20, 40, 60, 80, 140});
  CHECK_THROWS_AS(frequency_counts("zigzag", 5, 700), InvalidSpec);
}

TEST_CASE("dataset spec validation", "[stimuli]") {
  auto spec = small_spec();
  spec.classes = {2, 1, 3};
  CHECK_THROWS_AS(spec.validate(), InvalidSpec);
  spec = small_spec();
  spec.counts = {1, 0, 1};
  CHECK_THROWS_AS(spec.validate(), InvalidSpec);
  spec = small_spec();
  spec.area = {0.0, 0.1};
  CHECK_THROWS_AS(spec.validate(), InvalidSpec);
  spec = small_spec();
  spec.counts = {1, 1};
  CHECK_THROWS_AS(spec.validate(), InvalidSpec);
}

TEST_CASE("dataset counts, splits and determinism", "[stimuli]") {
  const auto spec = small_spec();
  const auto a = build_dataset(spec);
  const auto b = build_dataset(spec);
  for (std::size_t k = 0; k < spec.classes.size(); ++k) {
    const int c = spec.classes[k];
    REQUIRE(a.images(c).size() == spec.counts[k]);
    for (std::size_t i = 0; i < spec.counts[k]; ++i) CHECK(a.images(c)[i].canvas == b.images(c)[i].canvas);
    const auto& tr = a.split(c, Split::Train);
    const auto& te = a.split(c, Split::Test);
    std::set<std::size_t> all(tr.begin(), tr.end());
    for (auto i : te) CHECK(all.insert(i).second);
    CHECK(all.size() == spec.counts[k]);
    CHECK_FALSE(te.empty());
    CHECK_FALSE(tr.empty());
  }
  auto other = spec;
  other.seed = 12;
  CHECK(build_dataset(other).images(1)[0].canvas != a.images(1)[0].canvas);
  CHECK(other.hash() != spec.hash());
}

TEST_CASE("uniform full-count dataset", "[stimuli]") {
  DatasetSpec spec;
  spec.classes = {1, 2, 3, 4, 5};
  spec.counts = frequency_counts("uniform", 5, 700);
  const auto ds = build_dataset(spec);
  for (int c = 1; c <= 5; ++c) CHECK(ds.images(c).size() == 700);
  CHECK(ds.size() == 3500);
}

TEST_CASE("dataset persistence round trip and reuse", "[stimuli]") {
  const auto root = std::filesystem::temp_directory_path() / "numgame_test_datasets";
  std::filesystem::remove_all(root);
  const auto spec = small_spec();
  const auto built = load_or_build_dataset(root, spec);
  const auto dir = root / spec.hash();
  REQUIRE(std::filesystem::exists(dir / "manifest.json"));
  REQUIRE(std::filesystem::exists(dir / image_filename(2, 3)));
  const auto loaded = load_or_build_dataset(root, spec);
  for (int c : spec.classes) {
    for (std::size_t i = 0; i < built.images(c).size(); ++i) {
      CHECK(loaded.images(c)[i].canvas == built.images(c)[i].canvas);
      CHECK(loaded.images(c)[i].dots.size() == built.images(c)[i].dots.size());
    }
    CHECK(loaded.split(c, Split::Test) == built.split(c, Split::Test));
  }
  std::size_t dirs = 0;
  for (const auto& e : std::filesystem::directory_iterator(root)) dirs += e.is_directory();
  CHECK(dirs == 1);
  std::filesystem::remove_all(root);
}
