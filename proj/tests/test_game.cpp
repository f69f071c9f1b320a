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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "numgame/game.hpp"

using namespace numgame;

namespace {

Dataset small_dataset(std::uint64_t seed = 1, std::size_t per_class = 12) {
  DatasetSpec spec;
  spec.classes = {1, 2, 3};
  spec.counts = {per_class, per_class, per_class};
  spec.canvas_side = 32;
  spec.area = {0.10, 0.14};
  spec.seed = seed;
  return build_dataset(spec);
}

GameConfig small_game(Channel channel = Channel::Discrete) {
  GameConfig cfg;
  cfg.channel = channel;
  cfg.classes = {1, 2, 3};
  cfg.embed_dim = 16;
  cfg.hidden = 16;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.eval_episodes = 30;
  cfg.seed = 5;
  return cfg;
}

double hinge_formula(const std::vector<double>& s, std::size_t t, double margin) {
  double loss = 0.0;
  for (std::size_t j = 0; j < s.size(); ++j) {
    if (j == t) continue;
    const double m = margin - s[t] + s[j];
    if (m > 0) loss += m;
  }
  return loss;
}

}  // namespace

TEST_CASE("episodes satisfy their invariants", "[game]") {
  const auto ds = small_dataset();
  Rng rng(2);
  for (auto cond : {Condition::Same, Condition::Diff}) {
    std::vector<std::size_t> position_counts(3, 0);
    for (int i = 0; i < 300; ++i) {
      const auto ep = assemble_episode(ds, cond, {1, 2, 3}, 3, rng);
      REQUIRE(ep.candidates.size() == 3);
      std::set<int> classes;
      std::size_t same_class = 0;
      for (const auto& c : ep.candidates) {
        classes.insert(c.numerosity);
        same_class += c.numerosity == ep.sender.numerosity;
        const auto& test = ds.split(c.numerosity, Split::Test);
        CHECK(std::binary_search(test.begin(), test.end(), c.index));
      }
      CHECK(classes.size() == 3);
      CHECK(same_class == 1);
      CHECK(ep.target().numerosity == ep.sender.numerosity);
      if (cond == Condition::Same) {
        CHECK(ep.target() == ep.sender);
        CHECK(ds.image(ep.target()).canvas.pixels == ds.image(ep.sender).canvas.pixels);
      } else {
        CHECK(ep.target().index != ep.sender.index);
      }
      ++position_counts[ep.target_index];
    }
    // target position is uniform: each slot gets 100 +- 5 sd
    for (auto c : position_counts) CHECK((c > 55 && c < 145));
  }
}

TEST_CASE("five classes give one candidate per class", "[game]") {
  InstancePool pool;
  for (int c = 1; c <= 5; ++c) pool[c] = {0, 1, 2};
  Rng rng(3);
  const auto ep = assemble_episode({3, 1}, pool, Condition::Diff, {1, 2, 3, 4, 5}, 5, rng);
  std::vector<int> got;
  for (const auto& c : ep.candidates) got.push_back(c.numerosity);
  std::sort(got.begin(), got.end());
  CHECK(got == std::vector<int>{1, 2, 3, 4, 5});
}

TEST_CASE("episode assembly errors", "[game]") {
  InstancePool pool{{1, {0}}, {2, {0, 1}}};
  Rng rng(4);
  CHECK_THROWS_AS(assemble_episode({1, 0}, pool, Condition::Same, {1, 2}, 3, rng), InsufficientClasses);
  CHECK_THROWS_AS(assemble_episode({1, 0}, pool, Condition::Diff, {1, 2}, 2, rng), InsufficientInstances);
  CHECK_NOTHROW(assemble_episode({1, 0}, pool, Condition::Same, {1, 2}, 2, rng));
  CHECK_THROWS_AS(assemble_episode({3, 0}, pool, Condition::Same, {1, 2}, 2, rng), InsufficientClasses);
}

TEST_CASE("hinge loss reference values", "[game]") {
  CHECK(hinge_loss(std::vector<double>{5, 0, 0, 0, 0}, 0, 1.0) == 0.0);
  CHECK(hinge_loss(std::vector<double>{0, 0}, 0, 1.0) == 1.0);
  CHECK(hinge_loss(std::vector<double>{0.5, 1.0, -0.2}, 0, 1.0) == Catch::Approx(1.8).margin(1e-12));
  CHECK_THROWS_AS(hinge_loss(std::vector<double>{0, 0}, 2, 1.0), IndexOutOfRange);
  CHECK_THROWS_AS(hinge_loss(std::vector<double>{0, 0}, 0, 0.0), ConfigError);
}

TEST_CASE("hinge loss properties on random scores", "[game]") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.index(6);
    std::vector<double> s(n);
    for (auto& v : s) v = rng.uniform(-3, 3);
    const std::size_t t = rng.index(n);
    const double margin = rng.uniform(0.1, 2.0);
    const double h = hinge_loss(s, t, margin);
    CHECK(h == Catch::Approx(hinge_formula(s, t, margin)).margin(1e-6));
    CHECK(h >= 0.0);
    bool satisfied = true;
    for (std::size_t j = 0; j < n; ++j) satisfied = satisfied && (j == t || s[t] >= s[j] + margin);
    CHECK((h == 0.0) == satisfied);

    // the differentiable op agrees with the scalar version
    auto row = diff::BasicTensor<double>::from({1, n}, s);
    CHECK(diff::multiclass_hinge(row, {t}, margin).item() == Catch::Approx(h).margin(1e-12));
  }
}

TEST_CASE("length penalty", "[game]") {
  Message m;
  m.tokens = {1, 2, 1, 1, 2};
  m.effective_len = 5;
  CHECK(length_penalty(m, 0.0) == 0.0);
  CHECK(length_penalty(m, 0.005) == Catch::Approx(0.025).margin(1e-15));
  CHECK_THROWS_AS(length_penalty(m, -1.0), ConfigError);
}

TEST_CASE("game config validation", "[game]") {
  auto cfg = small_game();
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.candidates_for({1, 2, 3}) == 3);
  CHECK(cfg.candidates_for({1, 2, 3, 4, 5, 6}) == 5);
  cfg.length_coef = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_game();
  cfg.classes = {1};
  CHECK_THROWS_AS(cfg.validate(), InsufficientClasses);
}

TEST_CASE("correctness does not depend on candidate order", "[game]") {
  const auto ds = small_dataset();
  AgentPair agents(small_game().agent_config(32), 6);
  Rng rng(7);
  auto eps = sample_episodes(ds, Condition::Diff, {1, 2, 3}, 3, 40, rng);
  const auto base = play_episodes(agents, ds, eps);
  for (auto& ep : eps) {
    const auto target = ep.target();
    std::rotate(ep.candidates.begin(), ep.candidates.begin() + 1, ep.candidates.end());
    for (std::size_t k = 0; k < ep.candidates.size(); ++k) {
      if (ep.candidates[k] == target) ep.target_index = k;
    }
  }
  const auto rotated = play_episodes(agents, ds, eps);
  REQUIRE(rotated.size() == base.size());
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(rotated.records[i].correct == base.records[i].correct);
  CHECK(accuracy(base) ==
        static_cast<double>(std::count_if(base.records.begin(), base.records.end(),
                                          [](const auto& r) { return r.correct; })) /
            static_cast<double>(base.size()));
}

TEST_CASE("evaluation transcripts", "[game]") {
  const auto ds = small_dataset();
  for (auto channel : {Channel::Discrete, Channel::Sketch}) {
    AgentPair agents(small_game(channel).agent_config(32), 8);
    Rng rng(9);
    const auto t = evaluate(agents, ds, {1, 2, 3}, Condition::Diff, 3, 25, rng);
    REQUIRE(t.size() == 25);
    CHECK(t.channel == channel);
    for (const auto& r : t.records) {
      CHECK(r.phase == "eval");
      CHECK(r.target_n == r.sender.numerosity);
      CHECK(r.correct == (r.predicted_n == r.target_n));
      if (channel == Channel::Discrete) {
        CHECK(r.tokens.size() == 5);
        CHECK(r.eff_len == effective_length(r.tokens, true));
      } else {
        CHECK(r.strokes.size() == 20);
      }
    }
    CHECK(mean_length(t, 32) >= 0.0);
  }
}

TEST_CASE("training is reproducible from the seed", "[game]") {
  const auto ds = small_dataset();
  for (auto channel : {Channel::Discrete, Channel::Sketch}) {
    const auto cfg = small_game(channel);
    std::vector<int> seen;
    TrainOptions opts;
    opts.on_epoch = [&](const EpochMetrics& m) { seen.push_back(m.epoch); };
    const auto a = train(cfg, ds, opts);
    const auto b = train(cfg, ds);
    CHECK(seen == std::vector<int>{1, 2});
    REQUIRE(a.history.size() == 2);
    REQUIRE(b.history.size() == 2);
    for (std::size_t e = 0; e < 2; ++e) {
      CHECK(a.history[e].accuracy == b.history[e].accuracy);
      CHECK(a.history[e].cond_entropy == b.history[e].cond_entropy);
      CHECK(a.history[e].mean_len == b.history[e].mean_len);
      CHECK(a.history[e].train_loss == b.history[e].train_loss);
      CHECK(std::isfinite(a.history[e].train_loss));
    }
    const auto pa = a.agents.parameters(), pb = b.agents.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(std::equal(pa[i].tensor.values().begin(), pa[i].tensor.values().end(), pb[i].tensor.values().begin()));
    }
    CHECK(a.transcript.size() == cfg.eval_episodes);
  }
}

TEST_CASE("batch pools give every Diff sender a second instance", "[game]") {
  // Without extras a lone sender would be the only pooled image of its class.
  const auto ds = small_dataset(1, 14);
  auto cfg = small_game();
  cfg.condition = Condition::Diff;
  cfg.pool_extras = 0;
  cfg.batch_size = 1;
  cfg.epochs = 1;
  const auto res = train(cfg, ds);
  REQUIRE(res.history.size() == 1);
  CHECK(std::isfinite(res.history[0].train_loss));
}

TEST_CASE("divergence keeps the last good parameters", "[game]") {
  const auto ds = small_dataset();
  auto cfg = small_game();
  cfg.lr = 1e37;
  cfg.grad_clip = 0.0;
  cfg.epochs = 3;
  bool diverged = false;
  try {
    train(cfg, ds);
  } catch (const DivergenceDetected& e) {
    diverged = true;
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
  CHECK(diverged);
}

TEST_CASE("metrics csv round trip", "[game]") {
  const auto dir = std::filesystem::temp_directory_path() / "numgame_game_test";
  std::filesystem::create_directories(dir);
  std::vector<EpochMetrics> h{{1, 0.25, 1.5, 4.0, 0.0}, {2, 0.5, 0.75, 3.5, 0.0}};
  write_metrics_csv(dir / "m.csv", h);
  const auto back = read_metrics_csv(dir / "m.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[1].epoch == 2);
  CHECK(back[1].accuracy == 0.5);
  CHECK(back[1].cond_entropy == 0.75);
  CHECK(back[1].mean_len == 3.5);
  CHECK_THROWS_AS(read_metrics_csv(dir / "absent.csv"), MissingMetrics);
  std::filesystem::remove_all(dir);
}

TEST_CASE("sketch dumps carry the target in the filename", "[game]") {
  const auto dir = std::filesystem::temp_directory_path() / "numgame_sketch_dump";
  std::filesystem::remove_all(dir);
  Transcript t;
  t.channel = Channel::Sketch;
  TranscriptRecord r;
  r.target_n = 4;
  r.strokes = {0.1f, 0.1f, 0.9f, 0.9f};
  t.append(r);
  dump_sketches(dir, t, 32);
  CHECK(std::filesystem::exists(dir / "n4_e0.png"));
  CHECK(read_png(dir / "n4_e0.png").side == 32);
  std::filesystem::remove_all(dir);
}

TEST_CASE("variable-length loss is the expectation over stopping positions", "[game]") {
  Rng rng(11);
  const std::size_t B = 2, L = 3, V = 3, C = 2, D = 4;
  const float scale = 0.5f, lambda = 0.05f;
  auto rand_tensor = [&](diff::Shape shape) {
    std::vector<float> v(diff::numel(shape));
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1.5, 1.5));
    return Tensor::from(std::move(shape), std::move(v));
  };
  DiscreteSender::Output sent;
  std::vector<Tensor> queries;
  for (std::size_t t = 0; t < L; ++t) {
    sent.logits.push_back(rand_tensor({B, V}));
    sent.symbols.push_back(Tensor::zeros({B, V}));
    queries.push_back(rand_tensor({B, D}));
  }
  const auto cands = rand_tensor({B * C, D});
  const std::vector<std::size_t> targets{1, 0};
  GameConfig cfg;

  auto hinge = [&](std::size_t t, std::size_t b) {
    std::vector<double> s(C);
    for (std::size_t j = 0; j < C; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < D; ++k) dot += queries[t][b * D + k] * cands[(b * C + j) * D + k];
      s[j] = scale * dot;
    }
    return hinge_formula(s, targets[b], 1.0);
  };
  const auto loss = detail::discrete_loss(sent, queries, cands, targets, C, cfg, scale, lambda);
  REQUIRE(loss.size() == B);
  for (std::size_t b = 0; b < B; ++b) {
    double expected = 0.0, survive = 1.0;
    for (std::size_t t = 0; t < L; ++t) {
      double z = 0;
      for (std::size_t v = 0; v < V; ++v) z += std::exp(sent.logits[t][b * V + v]);
      const double stop = std::exp(sent.logits[t][b * V + kTerminator]) / z;
      expected += survive * stop * (hinge(t, b) + lambda * static_cast<double>(t));
      survive *= 1.0 - stop;
    }
    expected += survive * (hinge(L - 1, b) + lambda * static_cast<double>(L));
    CHECK(loss[b] == Catch::Approx(expected).epsilon(1e-5));
  }

  cfg.variable_length = false;
  const auto fixed = detail::discrete_loss(sent, queries, cands, targets, C, cfg, scale, lambda);
  for (std::size_t b = 0; b < B; ++b) CHECK(fixed[b] == Catch::Approx(hinge(L - 1, b)).epsilon(1e-5));
}

TEST_CASE("learning-rate and length schedules", "[game]") {
  GameConfig cfg;
  cfg.lr = 1e-3;
  cfg.lr_floor = 0.1;
  cfg.length_coef = 0.05;
  cfg.length_warmup = 0.25;
  CHECK(detail::scheduled_lr(cfg, 0, 101) == Catch::Approx(1e-3));
  CHECK(detail::scheduled_lr(cfg, 50, 101) == Catch::Approx(0.55e-3));
  CHECK(detail::scheduled_lr(cfg, 100, 101) == Catch::Approx(1e-4));
  CHECK(detail::warmed_lambda(cfg, 0, 100) == 0.0f);
  CHECK(detail::warmed_lambda(cfg, 10, 100) == Catch::Approx(0.02));
  CHECK(detail::warmed_lambda(cfg, 60, 100) == Catch::Approx(0.05));
  cfg.length_warmup = 0.0;
  CHECK(detail::warmed_lambda(cfg, 0, 100) == Catch::Approx(0.05));
}

TEST_CASE("game config json round trip", "[game]") {
  GameConfig cfg;
  cfg.channel = Channel::Sketch;
  cfg.classes = {1, 2, 4};
  cfg.length_coef = 0.005;
  cfg.condition = Condition::Same;
  const auto back = GameConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK_THROWS_AS(GameConfig::from_json({{"no_such_key", 1}}), ConfigError);
  CHECK_THROWS_AS(GameConfig::from_json({{"epochs", "many"}}), ConfigError);
}

TEST_CASE("checkpoints restore agents that replay the final evaluation", "[game]") {
  const auto ds = small_dataset();
  const auto dir = std::filesystem::temp_directory_path() / "numgame_ckpt_replay";
  std::filesystem::create_directories(dir);
  for (auto channel : {Channel::Discrete, Channel::Sketch}) {
    const auto cfg = small_game(channel);
    TrainOptions opts;
    opts.checkpoint = dir / "agents.bin";
    const auto res = train(cfg, ds, opts);
    const auto loaded = load_agents(dir / "agents.bin");
    CHECK(loaded.canvas_side == 32);
    CHECK(loaded.config.to_json() == cfg.to_json());
    Rng r1(17), r2(17);
    const auto a = evaluate(res.agents, ds, cfg.classes, cfg.condition, 3, 20, r1);
    const auto b = evaluate(loaded.agents, ds, cfg.classes, cfg.condition, 3, 20, r2);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a.records[i].predicted_n == b.records[i].predicted_n);
      CHECK(a.records[i].tokens == b.records[i].tokens);
      CHECK(a.records[i].strokes == b.records[i].strokes);
    }
  }
  std::ofstream(dir / "junk.bin") << "not a checkpoint\n";
  CHECK_THROWS_AS(load_agents(dir / "junk.bin"), IoError);
  std::filesystem::remove_all(dir);
}
