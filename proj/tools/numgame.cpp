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

// numgame: dataset generation, training, evaluation and preset experiments.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "numgame/experiment.hpp"
#include "numgame/platform.hpp"

namespace fs = std::filesystem;
using namespace numgame;

namespace {

void log_line(const std::string& s) { std::cerr << s << '\n'; }

// Flags shared by train and preset; unset ones leave file or preset values.
struct Overrides {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::string channel;
  std::string condition;
  std::string data_dir;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "TOML experiment file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seeds, "run seed (repeatable)");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--channel", o.channel, "discrete or sketch");
  cmd->add_option("--condition", o.condition, "same or diff");
  cmd->add_option("--data-dir", o.data_dir, "dataset cache directory");
}

ExperimentSpec spec_from(const Overrides& o) {
  ExperimentSpec spec = o.config.empty() ? ExperimentSpec{} : load_experiment(o.config);
  if (!o.seeds.empty()) spec.seeds = o.seeds;
  if (!o.out.empty()) spec.out = o.out;
  if (!o.data_dir.empty()) spec.data_dir = o.data_dir;
  if (!o.channel.empty()) parse_channel(o.channel);  // validate early
  if (!o.condition.empty()) spec.game["condition"] = to_string(parse_condition(o.condition));
  return spec;
}

int gen_data(const std::string& classes, const std::string& counts, std::size_t canvas, const std::string& area,
             std::uint64_t seed, double train_fraction, const std::string& out) {
  DatasetSpec spec;
  spec.classes = parse_class_list(classes);
  spec.counts = parse_counts(counts, spec.classes.size());
  spec.canvas_side = canvas;
  spec.area = parse_area(area);
  spec.seed = seed;
  spec.train_fraction = train_fraction;
  spec.validate();
  const auto ds = build_dataset(spec);
  save_dataset(ds, out);
  std::cout << "wrote " << ds.size() << " images (" << spec.hash() << ") to " << out << '\n';
  return 0;
}

int train_cmd(const Overrides& o, const std::string& setup, const std::string& dump) {
  auto spec = spec_from(o);
  if (spec.out.empty()) throw ConfigError("--out is required");
  if (!o.channel.empty()) spec.game["channel"] = o.channel;
  GameConfig game;
  game.apply_overrides(spec.game);
  DataSettings data;
  data.apply_overrides(spec.data);
  Cell cell;
  cell.name = "train";
  cell.game = game;
  cell.data = data.spec(game.classes, setup);
  fs::create_directories(spec.out);
  const auto ds = load_or_build_dataset(spec.dataset_root(), cell.data);
  nlohmann::json results = nlohmann::json::array();
  for (auto seed : spec.seeds) {
    const auto dir = spec.seeds.size() == 1 ? spec.out : spec.out / ("seed" + std::to_string(seed));
    const auto r = run_cell(cell, seed, ds, dir, log_line);
    if (!dump.empty()) {
      if (game.channel != Channel::Sketch) throw WrongChannel("--dump-sketches needs the sketch channel");
      dump_sketches(spec.seeds.size() == 1 ? fs::path(dump) : fs::path(dump) / ("seed" + std::to_string(seed)),
                    read_transcript(dir / "transcript.jsonl", game.variable_length,
                                    game.agent_config(ds.spec().canvas_side).thickness),
                    ds.spec().canvas_side);
    }
    std::cout << r.dump() << '\n';
  }
  return 0;
}

int eval_cmd(const std::string& checkpoint, const std::string& data, const std::string& data_dir,
             const std::string& classes, const std::string& condition, std::size_t episodes, std::uint64_t seed,
             const std::string& out, const std::string& dump) {
  auto loaded = load_agents(checkpoint);
  const auto& cfg = loaded.config;
  Dataset ds;
  if (!data.empty()) {
    ds = load_dataset(data);
  } else {
    const auto config = fs::path(checkpoint).parent_path() / "config.json";
    std::ifstream in(config);
    if (!in) throw IoError("no --data given and no " + config.string() + " beside the checkpoint");
    const auto j = nlohmann::json::parse(in);
    ds = load_or_build_dataset(data_dir.empty() ? fs::path("datasets") : fs::path(data_dir),
                               DatasetSpec::from_json(j.at("dataset")));
  }
  if (ds.spec().canvas_side != loaded.canvas_side) {
    throw ShapeMismatch("agents were trained on " + std::to_string(loaded.canvas_side) + " px images, dataset has " +
                        std::to_string(ds.spec().canvas_side));
  }
  const auto cls = classes.empty() ? cfg.classes : parse_class_list(classes);
  const auto cond = condition.empty() ? cfg.condition : parse_condition(condition);
  Rng rng(derive_seed({seed, fnv1a("cli-eval")}));
  const auto t = evaluate(loaded.agents, ds, cls, cond, cfg.candidates_for(cls), episodes, rng);
  Rng code_rng(derive_seed({seed, fnv1a("report")}));
  const std::set<int> trained(cfg.classes.begin(), cfg.classes.end());
  const auto codes = t.channel == Channel::Discrete
                         ? code_messages(t)
                         : code_sketches(t, loaded.canvas_side, cfg.cluster_count(), code_rng, trained).codes;
  if (!out.empty()) write_transcript(out, t);
  if (!dump.empty()) dump_sketches(dump, t, loaded.canvas_side);
  nlohmann::json r = {{"episodes", t.size()},
                      {"accuracy", accuracy(t)},
                      {"cond_entropy", conditional_entropy(code_table(t, codes))},
                      {"mean_len", mean_length(t, loaded.canvas_side)}};
  std::cout << r.dump() << '\n';
  return 0;
}

int preset_cmd(const std::string& name, const Overrides& o, std::size_t workers) {
  auto spec = spec_from(o);
  if (!name.empty()) spec.preset = name;
  if (spec.preset.empty()) throw ConfigError("no preset named on the command line or in the config file");
  if (spec.out.empty()) spec.out = fs::path("runs") / spec.preset;
  if (!o.channel.empty()) spec.axes["channels"] = {o.channel};
  if (!o.condition.empty()) spec.axes["conditions"] = {o.condition};
  if (workers > 0) spec.workers = workers;
  const auto summary = run_preset(spec, log_line);
  for (const auto& n : summary.at("notes")) std::cout << "note: " << n.get<std::string>() << '\n';
  std::cout << "summary: " << (spec.out / "summary.json").string() << '\n';
  return 0;
}

int report_cmd(const std::string& dir) {
  for (const auto& n : render_plots(dir)) std::cout << "note: " << n << '\n';
  std::cout << "plots: " << (fs::path(dir) / "plots").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"numerosity referential games"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a dot-image dataset");
  std::string classes = "1..5", counts = "uniform:700", area = "0.05:0.10", gen_out;
  std::size_t canvas = 64;
  std::uint64_t gen_seed = 0;
  double train_fraction = 0.85;
  gen->add_option("--classes", classes, "numerosities, e.g. 1..5 or 1,2,4")->capture_default_str();
  gen->add_option("--counts", counts, "uniform:N, increase:N, decrease:N or a list")->capture_default_str();
  gen->add_option("--canvas", canvas, "canvas side in pixels")->capture_default_str();
  gen->add_option("--area", area, "black-area fraction range lo:hi")->capture_default_str();
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen->add_option("--train-fraction", train_fraction, "share of each class used for training")->capture_default_str();
  gen->add_option("--out", gen_out, "output directory")->required();

  Overrides train_o, preset_o;
  std::string setup = "uniform", train_dump;
  auto* train = app.add_subcommand("train", "train one agent pair per seed");
  add_common(train, train_o);
  train->add_option("--setup", setup, "class frequencies: uniform, increase or decrease")->capture_default_str();
  train->add_option("--dump-sketches", train_dump, "write final eval sketches as PNGs here");

  auto* eval = app.add_subcommand("eval", "play evaluation episodes with a saved agent pair");
  std::string checkpoint, eval_data, eval_data_dir, eval_classes, eval_condition, eval_out, eval_dump;
  std::size_t episodes = 500;
  std::uint64_t eval_seed = 0;
  eval->add_option("checkpoint", checkpoint, "checkpoint.bin written by train")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "dataset directory written by gen-data");
  eval->add_option("--data-dir", eval_data_dir, "dataset cache used when --data is absent");
  eval->add_option("--classes", eval_classes, "numerosities to play (default: the trained ones)");
  eval->add_option("--condition", eval_condition, "same or diff (default: as trained)");
  eval->add_option("--episodes", episodes, "episode count")->capture_default_str();
  eval->add_option("--seed", eval_seed, "episode sampling seed")->capture_default_str();
  eval->add_option("--out", eval_out, "transcript file (JSON lines)");
  eval->add_option("--dump-sketches", eval_dump, "write sketches as PNGs here");

  auto* preset = app.add_subcommand("preset", "run a named experiment over all its cells and seeds");
  std::string preset_name;
  std::size_t workers = 0;
  preset->add_option("name", preset_name, "preset name (may come from --config instead)");
  add_common(preset, preset_o);
  preset->add_option("--workers", workers, "parallel runs (default: NUMGAME_WORKERS or all cores)");

  auto* report = app.add_subcommand("report", "render plots for an experiment directory");
  std::string report_dir;
  report->add_option("dir", report_dir, "experiment output directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return gen_data(classes, counts, canvas, area, gen_seed, train_fraction, gen_out);
    if (*train) return train_cmd(train_o, setup, train_dump);
    if (*eval) {
      return eval_cmd(checkpoint, eval_data, eval_data_dir, eval_classes, eval_condition, episodes, eval_seed, eval_out,
                      eval_dump);
    }
    if (*preset) return preset_cmd(preset_name, preset_o, workers);
    if (*report) return report_cmd(report_dir);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
