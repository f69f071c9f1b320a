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
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "numgame/experiment.hpp"

using namespace numgame;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("numgame_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Every regular file under `root`, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
  }
  return out;
}

ExperimentSpec tiny_spec(const fs::path& out, const fs::path& data_dir) {
  ExperimentSpec spec = parse_experiment(R"(
preset = "fig3-length-reg"
seeds = [0, 1]

[game]
classes = [1, 2, 3]
embed_dim = 16
hidden = 16
epochs = 2
batch_size = 8
eval_episodes = 30

[data]
canvas_side = 32
per_class = 12
area = [0.10, 0.14]

[axes]
lambdas = [0.0, 0.05]
)");
  spec.out = out;
  spec.data_dir = data_dir;
  return spec;
}

}  // namespace

TEST_CASE("csv files round trip quoted fields", "[experiment]") {
  const auto dir = fresh_dir("csv");
  CsvTable t;
  t.header = {"name", "value"};
  t.rows = {{"plain", "1"}, {"with,comma", "say \"hi\""}, {"", "3"}};
  write_csv(dir / "t.csv", t);
  const auto back = read_csv(dir / "t.csv");
  CHECK(back.header == t.header);
  CHECK(back.rows == t.rows);
  CHECK(back.column("value") == 1);
  CHECK_THROWS_AS(back.column("missing"), MissingMetrics);
  CHECK_THROWS_AS(read_csv(dir / "absent.csv"), MissingMetrics);
  CHECK(std::isnan(parse_number("")));
  CHECK(parse_number("0.25") == 0.25);
}

TEST_CASE("experiment files parse into specs", "[experiment]") {
  const auto spec = parse_experiment(R"(
preset = "fig4-frequency"
seeds = [3, 4]
out = "runs/x"
workers = 2
[game]
epochs = 7
[data]
per_class = 50
[axes]
setups = ["uniform"]
)");
  CHECK(spec.preset == "fig4-frequency");
  CHECK(spec.seeds == std::vector<std::uint64_t>{3, 4});
  CHECK(spec.out == fs::path("runs/x"));
  CHECK(spec.workers == 2);
  CHECK(spec.game.at("epochs") == 7);
  CHECK(spec.dataset_root() == fs::path("runs/datasets"));

  CHECK_THROWS_AS(parse_experiment("bogus = 1"), ConfigError);
  CHECK_THROWS_AS(parse_experiment("seeds = \"zero\""), ConfigError);
  CHECK_THROWS_AS(parse_experiment("preset = "), ConfigError);

  auto bad_game = parse_experiment("preset = \"fig3-length-reg\"\n[game]\nepoch = 3");
  bad_game.out = "x";
  CHECK_THROWS_AS(plan_preset(bad_game), ConfigError);
  auto bad_data = parse_experiment("preset = \"fig3-length-reg\"\n[data]\ncanvas = 3");
  CHECK_THROWS_AS(plan_preset(bad_data), ConfigError);
}

TEST_CASE("presets expand with overrides on top of preset values", "[experiment]") {
  ExperimentSpec spec;
  spec.out = "unused";

  SECTION("defaults") {
    spec.preset = "fig3-length-reg";
    const auto plan = plan_preset(spec);
    REQUIRE(plan.cells.size() == 3);
    CHECK(plan.cells[0].game.length_coef == 0.0);
    CHECK(plan.cells[1].game.length_coef == 0.005);
    CHECK(plan.cells[2].game.length_coef == 0.05);
    for (const auto& c : plan.cells) {
      CHECK(c.game.variable_length);
      CHECK(c.data.canvas_side == 64);
      CHECK(c.data.counts == std::vector<std::size_t>(5, 140));
      CHECK(c.data.hash() == plan.cells[0].data.hash());
    }
  }
  SECTION("frequency setups") {
    spec.preset = "fig4-frequency";
    const auto plan = plan_preset(spec);
    REQUIRE(plan.cells.size() == 6);
    std::map<std::string, std::vector<std::size_t>> counts;
    for (const auto& c : plan.cells) counts[c.name] = c.data.counts;
    CHECK(counts["discrete-increase"] == std::vector<std::size_t>{20, 40, 60, 80, 140});
    CHECK(counts["discrete-decrease"] == std::vector<std::size_t>{140, 80, 60, 40, 20});
    CHECK(counts["sketch-uniform"] == std::vector<std::size_t>(5, 140));
    CHECK(plan.cells[0].game.length_coef == 0.005);
  }
  SECTION("file values beat preset values") {
    spec.preset = "fig4-frequency";
    spec.game = {{"length_coef", 0.01}, {"epochs", 4}};
    spec.axes = {{"channels", {"discrete"}}};
    const auto plan = plan_preset(spec);
    REQUIRE(plan.cells.size() == 3);
    for (const auto& c : plan.cells) {
      CHECK(c.game.length_coef == 0.01);
      CHECK(c.game.epochs == 4);
    }
  }
  SECTION("vocabulary sweep is fixed length") {
    spec.preset = "table1-vocab-sweep";
    const auto plan = plan_preset(spec);
    REQUIRE(plan.cells.size() == 4);
    CHECK(plan.cells.back().game.vocab_size == 100);
    for (const auto& c : plan.cells) {
      CHECK_FALSE(c.game.variable_length);
      CHECK(c.game.max_len == 5);
    }
  }
  SECTION("interpolation holds out the gaps") {
    spec.preset = "fig5-interpolation";
    const auto plan = plan_preset(spec);
    REQUIRE(plan.cells.size() == 2);
    CHECK(plan.cells[0].game.classes == std::vector<int>{1, 2, 4, 5});
    CHECK(plan.cells[0].data.classes == std::vector<int>{1, 2, 3, 4, 5});
    REQUIRE(plan.cells[0].test_sets.size() == 2);
    CHECK(plan.cells[0].test_sets[1].name == "+3");
    CHECK(plan.cells[1].test_sets[1].name == "+4");
  }
  SECTION("extrapolation keeps only numerosities that fit") {
    spec.preset = "fig5-extrapolation";
    DataSettings data;
    const auto plan = plan_preset(spec);
    REQUIRE(plan.cells.size() == 1);
    const auto& c = plan.cells[0];
    CHECK(c.game.classes == std::vector<int>{1, 2, 3, 4, 5});
    std::size_t dropped = 0;
    for (int n : {6, 7, 8, 10, 15}) {
      const bool fits = detail::numerosity_feasible(n, data);
      const bool present = std::any_of(c.test_sets.begin(), c.test_sets.end(),
                                       [&](const TestSet& t) { return t.name == "+" + std::to_string(n); });
      CHECK(fits == present);
      dropped += !fits;
    }
    CHECK(plan.notes.size() == dropped);
    CHECK(c.test_sets.front().name == "train");
  }
  SECTION("training 1 to 20 tests on 25") {
    spec.preset = "fig5-extrapolation";
    std::vector<int> train;
    for (int n = 1; n <= 20; ++n) train.push_back(n);
    spec.axes = {{"train", train}};
    spec.data = {{"canvas_side", 128}, {"per_class", 4}};
    const auto plan = plan_preset(spec);
    const auto& sets = plan.cells[0].test_sets;
    CHECK(sets.size() + plan.notes.size() == 2);
    if (sets.size() == 2) CHECK(sets[1].name == "+25");
  }
  SECTION("class overrides are rejected where axes define them") {
    spec.preset = "fig5-extrapolation";
    spec.game = {{"classes", {1, 2}}};
    CHECK_THROWS_AS(plan_preset(spec), ConfigError);
  }
  SECTION("a game channel narrows the channel axis") {
    spec.preset = "fig2-same-diff";
    spec.game = {{"channel", "sketch"}, {"condition", "same"}};
    const auto plan = plan_preset(spec);
    REQUIRE(plan.cells.size() == 1);
    CHECK(plan.cells[0].name == "sketch-same");
    spec.preset = "fig3-length-reg";
    CHECK_THROWS_AS(plan_preset(spec), ConfigError);
    spec.preset = "fig4-frequency";
    const auto freq = plan_preset(spec);
    REQUIRE(freq.cells.size() == 3);
    for (const auto& c : freq.cells) {
      CHECK(c.game.channel == Channel::Sketch);
      CHECK(c.game.condition == Condition::Same);
    }
  }
  SECTION("discrete-only presets reject the sketch channel") {
    spec.preset = "table1-vocab-sweep";
    spec.axes = {{"channels", {"sketch"}}};
    CHECK_THROWS_AS(plan_preset(spec), ConfigError);
  }
  SECTION("every named preset plans") {
    for (const auto& name : preset_names()) {
      spec.preset = name;
      CHECK_NOTHROW(plan_preset(spec));
    }
  }
}

TEST_CASE("unknown presets are rejected", "[experiment]") {
  ExperimentSpec spec;
  spec.preset = "fig9-nothing";
  spec.out = "x";
  CHECK_THROWS_AS(plan_preset(spec), UnknownPreset);
  try {
    plan_preset(spec);
  } catch (const UnknownPreset& e) {
    CHECK(std::string(e.what()).find("fig2-same-diff") != std::string::npos);
  }
}

TEST_CASE("mean and standard deviation", "[experiment]") {
  const auto m = mean_std({1.0, 2.0, 3.0, 4.0});
  CHECK(m.mean == Catch::Approx(2.5));
  CHECK(m.std == Catch::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(m.n == 4);
  CHECK(mean_std({7.0}).std == 0.0);
  CHECK(mean_std({std::nan(""), 2.0}).n == 1);
  CHECK(std::isnan(mean_std({}).mean));
}

TEST_CASE("worker pool runs every job and reports the first failure", "[experiment]") {
  std::vector<int> done(20, 0);
  std::vector<std::function<void()>> jobs;
  for (int i = 0; i < 20; ++i) jobs.push_back([&done, i] { done[i] = 1; });
  run_jobs(jobs, 3);
  CHECK(std::count(done.begin(), done.end(), 1) == 20);

  jobs.clear();
  for (int i = 0; i < 6; ++i) {
    jobs.push_back([i] {
      if (i == 2) throw InsufficientClasses("job 2");
      if (i == 4) throw IoError("job 4");
    });
  }
  CHECK_THROWS_AS(run_jobs(jobs, 3), InsufficientClasses);

  const CellError e("DivergenceDetected", "fig3/lambda-0/seed1", "loss is nan");
  CHECK(e.kind() == "DivergenceDetected");
  CHECK(std::string(e.what()).find("seed1") != std::string::npos);

  CHECK(worker_count(5) == 5);
  ::setenv("NUMGAME_WORKERS", "3", 1);
  CHECK(worker_count() == 3);
  ::unsetenv("NUMGAME_WORKERS");
  CHECK(worker_count() >= 1);
}

TEST_CASE("a preset run is deterministic and shares datasets", "[experiment]") {
  const auto root = fresh_dir("preset");
  auto a = tiny_spec(root / "a", root / "datasets");
  a.workers = 1;
  auto b = tiny_spec(root / "b", root / "datasets");
  b.workers = 2;
  const auto summary = run_preset(a);
  run_preset(b);

  std::size_t datasets = 0;
  for (const auto& e : fs::directory_iterator(root / "datasets")) datasets += e.is_directory();
  CHECK(datasets == 1);

  const auto ta = tree(root / "a"), tb = tree(root / "b");
  std::size_t csvs = 0;
  for (const auto& [rel, body] : ta) {
    if (rel.size() < 4 || rel.substr(rel.size() - 4) != ".csv") continue;
    ++csvs;
    INFO(rel);
    REQUIRE(tb.count(rel));
    CHECK(tb.at(rel) == body);
  }
  CHECK(csvs > 10);
  CHECK(ta.at("summary.json") == tb.at("summary.json"));

  for (const auto* cell : {"lambda-0", "lambda-0.05"}) {
    for (const auto* seed : {"seed0", "seed1"}) {
      const auto d = std::string("cells/") + cell + "/" + seed + "/";
      for (const auto* f : {"config.json", "metrics.csv", "transcript.jsonl", "checkpoint.bin", "mapping.csv",
                            "result.json"}) {
        INFO(d + f);
        CHECK(ta.count(d + f));
      }
    }
  }
  CHECK(ta.count("report/accuracy.csv"));
  CHECK(ta.count("report/final.csv"));
  CHECK(ta.count("plots/accuracy.svg"));
  CHECK(ta.count("plots/accuracy.png"));
  CHECK(ta.count("plots/mean_len.svg"));

  const auto acc = read_csv(root / "a" / "report" / "accuracy.csv");
  CHECK(acc.header == std::vector<std::string>{"epoch", "lambda-0_mean", "lambda-0_std", "lambda-0.05_mean",
                                                "lambda-0.05_std"});
  CHECK(acc.rows.size() == 2);

  // The summary mean is the mean of the per-seed results.
  const auto& cell = summary.at("cells").at("lambda-0.05");
  const double s0 = cell.at("per_seed").at("0").at("final").at("accuracy");
  const double s1 = cell.at("per_seed").at("1").at("final").at("accuracy");
  CHECK(cell.at("metrics").at("accuracy").at("mean").get<double>() == Catch::Approx((s0 + s1) / 2));
}

TEST_CASE("a cell error names its cell and keeps its kind", "[experiment]") {
  const auto root = fresh_dir("cellerr");
  auto spec = tiny_spec(root / "out", root / "datasets");
  spec.seeds = {0};
  spec.axes = {{"lambdas", {0.0}}};
  spec.game["lr"] = 1e37;
  spec.game["grad_clip"] = 0.0;
  try {
    run_preset(spec);
    FAIL("expected a divergence");
  } catch (const Error& e) {
    CHECK(e.kind() == "DivergenceDetected");
    CHECK(std::string(e.what()).find("lambda-0/seed0") != std::string::npos);
  }
}

TEST_CASE("plots render from persisted csv files", "[experiment]") {
  const auto dir = fresh_dir("plots");
  CHECK_THROWS_AS(render_plots(dir), MissingMetrics);

  fs::create_directories(dir / "report");
  CsvTable acc;
  acc.header = {"epoch", "full_mean", "full_std", "hollow_mean", "hollow_std"};
  acc.rows = {{"1", "0.5", "0.1", "", ""}, {"2", "0.7", "0.05", "", ""}};
  write_csv(dir / "report" / "accuracy.csv", acc);
  CsvTable empty = acc;
  for (auto& r : empty.rows) r = {r[0], "", "", "", ""};
  write_csv(dir / "report" / "cond_entropy.csv", empty);
  CsvTable dis;
  dis.header = {"numerosity", "1", "2"};
  dis.rows = {{"1", "0.1", "0.4"}, {"2", "0.4", "0.2"}};
  write_csv(dir / "report" / "dissimilarity_sketch-uniform.csv", dis);

  const auto notes = render_plots(dir);
  CHECK(fs::exists(dir / "plots" / "accuracy.svg"));
  CHECK(fs::exists(dir / "plots" / "accuracy.png"));
  CHECK(fs::exists(dir / "plots" / "dissimilarity_sketch-uniform.svg"));
  CHECK(fs::exists(dir / "plots" / "dissimilarity_sketch-uniform.png"));
  CHECK_FALSE(fs::exists(dir / "plots" / "cond_entropy.svg"));

  const auto svg = slurp(dir / "plots" / "accuracy.svg");
  CHECK(svg.find("full") != std::string::npos);
  CHECK(svg.find("hollow") == std::string::npos);

  auto mentions = [&](const std::string& s) {
    return std::any_of(notes.begin(), notes.end(), [&](const std::string& n) { return n.find(s) != std::string::npos; });
  };
  CHECK(mentions("hollow"));
  CHECK(mentions("cond_entropy"));
  CHECK(mentions("mean_len"));
  CHECK(slurp(dir / "plots" / "NOTES.txt").find("hollow") != std::string::npos);
}

TEST_CASE("command-line value syntax", "[experiment]") {
  CHECK(parse_class_list("1..5") == std::vector<int>{1, 2, 3, 4, 5});
  CHECK(parse_class_list("1,2,4,5") == std::vector<int>{1, 2, 4, 5});
  CHECK(parse_class_list("1..3,7") == std::vector<int>{1, 2, 3, 7});
  CHECK_THROWS_AS(parse_class_list("5..1"), ConfigError);
  CHECK_THROWS_AS(parse_class_list("a"), ConfigError);
  CHECK_THROWS_AS(parse_class_list("2x"), ConfigError);

  CHECK(parse_counts("uniform:700", 5) == std::vector<std::size_t>(5, 700));
  CHECK(parse_counts("increase:140", 5) == std::vector<std::size_t>{20, 40, 60, 80, 140});
  CHECK(parse_counts("3,4", 2) == std::vector<std::size_t>{3, 4});
  CHECK_THROWS_AS(parse_counts("3,4", 3), ConfigError);
  CHECK_THROWS_AS(parse_counts("sideways:10", 5), ConfigError);
  CHECK_THROWS_AS(parse_counts("uniform:many", 5), ConfigError);

  const auto a = parse_area("0.05:0.10");
  CHECK(a.lo == 0.05);
  CHECK(a.hi == 0.10);
  CHECK_THROWS_AS(parse_area("0.05"), ConfigError);
}
