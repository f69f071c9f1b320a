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
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "numgame/error.hpp"
#include "numgame/game.hpp"
#include "numgame/metrics.hpp"
#include "numgame/plots.hpp"
#include "numgame/stimuli.hpp"

namespace numgame {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// CSV

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw MissingMetrics("no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

}  // namespace detail

inline void write_csv(const fs::path& path, const CsvTable& t) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  auto line = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << detail::csv_field(row[i]);
    out << '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
}

inline CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingMetrics("cannot read " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw MissingMetrics(path.string() + " is empty");
  t.header = detail::split_csv_line(line);
  while (std::getline(in, line)) {
    if (!line.empty()) t.rows.push_back(detail::split_csv_line(line));
  }
  return t;
}

inline double parse_number(const std::string& s) {
  if (s.empty()) return std::nan("");
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  return end == s.c_str() ? std::nan("") : v;
}

// ---------------------------------------------------------------------------
// Command-line value syntax

/// "1..5" (inclusive range), "1,2,4,5", or a mix such as "1..3,7".
inline std::vector<int> parse_class_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string part;
  auto to_int = [&](const std::string& s) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw ConfigError("bad class list '" + text + "'");
    return v;
  };
  while (std::getline(ss, part, ',')) {
    const auto dots = part.find("..");
    if (dots == std::string::npos) {
      out.push_back(to_int(part));
    } else {
      const int lo = to_int(part.substr(0, dots)), hi = to_int(part.substr(dots + 2));
      if (hi < lo) throw ConfigError("empty range '" + part + "'");
      for (int n = lo; n <= hi; ++n) out.push_back(n);
    }
  }
  if (out.empty()) throw ConfigError("empty class list");
  return out;
}

/// "uniform:700", "increase:140", "decrease:140" or explicit "20,40,60".
inline std::vector<std::size_t> parse_counts(const std::string& text, std::size_t num_classes) {
  const auto colon = text.find(':');
  try {
    if (colon != std::string::npos) {
      const auto n = static_cast<std::size_t>(std::stoul(text.substr(colon + 1)));
      return frequency_counts(text.substr(0, colon), num_classes, n);
    }
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(static_cast<std::size_t>(std::stoul(part)));
    if (out.size() != num_classes) throw ConfigError("need one count per class in '" + text + "'");
    return out;
  } catch (const std::logic_error&) {
    throw ConfigError("bad counts '" + text + "'");
  } catch (const InvalidSpec& e) {
    throw ConfigError(e.what());
  }
}

/// "0.05:0.10"
inline AreaRange parse_area(const std::string& text) {
  const auto colon = text.find(':');
  try {
    if (colon == std::string::npos) throw std::invalid_argument("no colon");
    return {std::stod(text.substr(0, colon)), std::stod(text.substr(colon + 1))};
  } catch (const std::logic_error&) {
    throw ConfigError("bad area range '" + text + "' (expected lo:hi)");
  }
}

// ---------------------------------------------------------------------------
// Experiment specification

/// One experiment: a preset plus overrides. Precedence is CLI > file >
/// preset defaults; the CLI applies its flags after loading the file.
struct ExperimentSpec {
  std::string preset;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  fs::path out;
  fs::path data_dir;  // empty: a "datasets" directory next to `out`
  nlohmann::json game = nlohmann::json::object();  // GameConfig overrides
  nlohmann::json data = nlohmann::json::object();  // dataset overrides
  nlohmann::json axes = nlohmann::json::object();  // preset sweep axes
  std::size_t workers = 0;                          // 0: NUMGAME_WORKERS or all cores

  void validate() const {
    if (seeds.empty()) throw ConfigError("seed list is empty");
    if (out.empty()) throw ConfigError("no output directory");
  }

  fs::path dataset_root() const {
    if (!data_dir.empty()) return data_dir;
    const auto parent = out.parent_path();
    return parent.empty() ? fs::path("datasets") : parent / "datasets";
  }
};

namespace detail {

inline nlohmann::json toml_to_json(const toml::node& n) {
  if (const auto* t = n.as_table()) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : *t) j[std::string(k.str())] = toml_to_json(v);
    return j;
  }
  if (const auto* a = n.as_array()) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& v : *a) j.push_back(toml_to_json(v));
    return j;
  }
  if (const auto* v = n.as_string()) return v->get();
  if (const auto* v = n.as_integer()) return v->get();
  if (const auto* v = n.as_floating_point()) return v->get();
  if (const auto* v = n.as_boolean()) return v->get();
  throw ConfigError("unsupported TOML value (dates and times are not settings)");
}

}  // namespace detail

/// Reads an experiment file. Top-level keys: preset, seeds, out, data_dir,
/// workers; tables [game], [data], [axes].
inline ExperimentSpec parse_experiment(const std::string& text, const std::string& source = "config") {
  toml::table tbl;
  try {
    tbl = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    throw ConfigError(source + ": " + std::string(e.description()));
  }
  const auto j = detail::toml_to_json(tbl);
  ExperimentSpec spec;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "preset") spec.preset = v.get<std::string>();
      else if (key == "seeds") spec.seeds = v.get<std::vector<std::uint64_t>>();
      else if (key == "out") spec.out = v.get<std::string>();
      else if (key == "data_dir") spec.data_dir = v.get<std::string>();
      else if (key == "workers") spec.workers = v.get<std::size_t>();
      else if (key == "game") spec.game = v;
      else if (key == "data") spec.data = v;
      else if (key == "axes") spec.axes = v;
      else throw ConfigError(source + ": unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(source + ": key '" + key + "': " + e.what());
    }
  }
  return spec;
}

inline ExperimentSpec load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment(ss.str(), path.string());
}

/// Dataset settings shared by every preset. `counts` is uniform:N,
/// increase:N or decrease:N (N = count of the largest class).
struct DataSettings {
  std::size_t canvas_side = 64;
  std::size_t per_class = 140;
  AreaRange area{0.05, 0.10};
  std::uint64_t seed = 0;
  double train_fraction = 0.85;

  void apply_overrides(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("data settings must be a table");
    for (const auto& [key, v] : j.items()) {
      try {
        if (key == "canvas_side") canvas_side = v.get<std::size_t>();
        else if (key == "per_class") per_class = v.get<std::size_t>();
        else if (key == "area") area = {v.at(0).get<double>(), v.at(1).get<double>()};
        else if (key == "seed") seed = v.get<std::uint64_t>();
        else if (key == "train_fraction") train_fraction = v.get<double>();
        else throw ConfigError("unknown data setting '" + key + "'");
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("data setting '" + key + "': " + e.what());
      }
    }
  }

  DatasetSpec spec(const std::vector<int>& classes, const std::string& frequency = "uniform") const {
    DatasetSpec s;
    s.classes = classes;
    s.canvas_side = canvas_side;
    s.area = area;
    s.seed = seed;
    s.train_fraction = train_fraction;
    if (frequency == "uniform") {
      s.counts.assign(classes.size(), per_class);
    } else {
      s.counts = frequency_counts(frequency, classes.size(), per_class);
    }
    return s;
  }
};

// ---------------------------------------------------------------------------
// Presets

struct TestSet {
  std::string name;
  std::vector<int> classes;
};

/// One trained configuration of a preset; run once per seed.
struct Cell {
  std::string name;
  GameConfig game;
  DatasetSpec data;
  std::vector<TestSet> test_sets;
  bool dissimilarity = false;
  nlohmann::json labels = nlohmann::json::object();
};

struct PresetPlan {
  std::string preset;
  std::vector<Cell> cells;
  std::vector<std::string> notes;
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> kNames{"fig2-same-diff",     "fig3-length-reg",   "fig4-frequency",
                                               "fig5-extrapolation", "fig5-interpolation", "table1-vocab-sweep",
                                               "figA3-dissimilarity", "figA4-sketch-zeroshot"};
  return kNames;
}

namespace detail {

template <typename T>
std::vector<T> axis(const nlohmann::json& axes, const std::string& key, std::vector<T> fallback) {
  if (!axes.contains(key)) return fallback;
  try {
    auto v = axes.at(key).get<std::vector<T>>();
    if (v.empty()) throw ConfigError("axis '" + key + "' is empty");
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("axis '" + key + "': " + e.what());
  }
}

inline std::string format_label(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline std::string join_classes(const std::vector<int>& c) {
  std::string s;
  for (std::size_t i = 0; i < c.size(); ++i) s += (i ? "-" : "") + std::to_string(c[i]);
  return s;
}

/// True when a few images of numerosity n can be generated on this canvas.
inline bool numerosity_feasible(int n, const DataSettings& d) {
  Rng rng(derive_seed({d.seed, fnv1a("feasibility"), static_cast<std::uint64_t>(n)}));
  try {
    for (int i = 0; i < 3; ++i) generate_dot_image(n, d.canvas_side, d.area, rng);
    return true;
  } catch (const InfeasibleConstraint&) {
    return false;
  }
}

inline std::vector<int> union_classes(std::vector<int> a, const std::vector<int>& b) {
  a.insert(a.end(), b.begin(), b.end());
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  return a;
}

inline std::vector<Channel> channels_axis(const nlohmann::json& axes, std::vector<std::string> fallback,
                                          const std::string& preset, bool discrete_only = false) {
  std::vector<Channel> out;
  for (const auto& s : axis<std::string>(axes, "channels", std::move(fallback))) {
    out.push_back(parse_channel(s));
    if (discrete_only && out.back() != Channel::Discrete) {
      throw ConfigError(preset + " is defined for the discrete channel only");
    }
  }
  return out;
}

}  // namespace detail

/// Expands a preset into cells. Game overrides from the spec are applied on
/// top of each cell's preset values.
inline PresetPlan plan_preset(const ExperimentSpec& spec) {
  using detail::axis;
  PresetPlan plan;
  plan.preset = spec.preset;
  const auto p_name = [&] { return spec.preset; };
  DataSettings data;
  data.apply_overrides(spec.data);
  // A channel in the game table narrows the preset's channel axis (and a
  // condition its condition axis) instead of overriding every cell.
  nlohmann::json game_over = spec.game, ax = spec.axes;
  if (game_over.contains("channel")) {
    if (!ax.contains("channels")) ax["channels"] = nlohmann::json::array({game_over["channel"]});
    game_over.erase("channel");
  }
  if (spec.preset == "fig2-same-diff" && game_over.contains("condition")) {
    if (!ax.contains("conditions")) ax["conditions"] = nlohmann::json::array({game_over["condition"]});
    game_over.erase("condition");
  }

  GameConfig base;
  base.apply_overrides(game_over);

  // Game overrides win over preset values; the dataset covers the trained
  // classes plus any held-out ones.
  auto make_cell = [&](const std::string& name, GameConfig g, const std::vector<int>& held_out = {},
                       const std::string& frequency = "uniform") {
    g.apply_overrides(game_over);
    Cell c;
    c.name = name;
    c.data = data.spec(detail::union_classes(g.classes, held_out), frequency);
    c.game = std::move(g);
    return c;
  };
  auto fixed_classes = [&](const std::string& what) {
    if (game_over.contains("classes")) throw ConfigError(p_name() + " takes its " + what + " from the axes table");
  };
  auto conditions = [&](std::vector<std::string> fallback) {
    std::vector<Condition> out;
    for (const auto& s : axis<std::string>(ax, "conditions", std::move(fallback))) out.push_back(parse_condition(s));
    return out;
  };
  // Keeps only numerosities that fit on the canvas; dropped ones become notes.
  auto feasible = [&](const std::vector<int>& wanted) {
    std::vector<int> keep;
    for (int n : wanted) {
      if (detail::numerosity_feasible(n, data)) {
        keep.push_back(n);
      } else {
        plan.notes.push_back("numerosity " + std::to_string(n) + " does not fit the area range on a " +
                             std::to_string(data.canvas_side) + " px canvas; its test set was dropped");
      }
    }
    return keep;
  };
  auto default_ood = [&](const std::vector<int>& train) {
    const int top = *std::max_element(train.begin(), train.end());
    return top >= 20 ? std::vector<int>{25} : std::vector<int>{6, 7, 8, 10, 15};
  };
  auto extrapolation_cell = [&](Channel ch, const std::vector<int>& train, const std::vector<int>& ood) {
    GameConfig g = base;
    g.channel = ch;
    g.classes = train;
    const auto keep = feasible(ood);
    Cell c = make_cell(to_string(ch) + "-train" + detail::join_classes(train), g, keep);
    c.test_sets.push_back({"train", train});
    for (int n : keep) c.test_sets.push_back({"+" + std::to_string(n), detail::union_classes(train, {n})});
    c.labels = {{"channel", to_string(ch)}, {"train", train}, {"ood", keep}};
    return c;
  };
  auto interpolation_cell = [&](Channel ch, const std::vector<int>& train) {
    std::vector<int> holes;
    for (int n = train.front() + 1; n < train.back(); ++n) {
      if (std::find(train.begin(), train.end(), n) == train.end()) holes.push_back(n);
    }
    if (holes.empty()) throw ConfigError("training set " + detail::join_classes(train) + " has no hole to interpolate");
    GameConfig g = base;
    g.channel = ch;
    g.classes = train;
    Cell c = make_cell(to_string(ch) + "-train" + detail::join_classes(train), g, holes);
    c.test_sets.push_back({"train", train});
    for (int n : holes) c.test_sets.push_back({"+" + std::to_string(n), detail::union_classes(train, {n})});
    c.labels = {{"channel", to_string(ch)}, {"train", train}, {"holes", holes}};
    return c;
  };
  const std::vector<int> one_to_five{1, 2, 3, 4, 5};

  const auto& p = spec.preset;
  if (p == "fig2-same-diff") {
    for (auto ch : detail::channels_axis(ax, {"discrete", "sketch"}, p)) {
      for (auto cond : conditions({"same", "diff"})) {
        GameConfig g = base;
        g.channel = ch;
        g.condition = cond;
        auto c = make_cell(to_string(ch) + "-" + to_string(cond), g);
        c.labels = {{"channel", to_string(ch)}, {"condition", to_string(cond)}};
        plan.cells.push_back(std::move(c));
      }
    }
  } else if (p == "fig3-length-reg") {
    detail::channels_axis(ax, {"discrete"}, p, true);
    for (double lambda : axis<double>(ax, "lambdas", {0.0, 0.005, 0.05})) {
      GameConfig g = base;
      g.variable_length = true;
      g.length_coef = lambda;
      auto c = make_cell("lambda-" + detail::format_label(lambda), g);
      c.labels = {{"lambda", lambda}};
      plan.cells.push_back(std::move(c));
    }
  } else if (p == "fig4-frequency" || p == "figA3-dissimilarity") {
    const bool a3 = p == "figA3-dissimilarity";
    for (auto ch : detail::channels_axis(ax, a3 ? std::vector<std::string>{"sketch"}
                                                : std::vector<std::string>{"discrete", "sketch"},
                                         p)) {
      for (const auto& setup : axis<std::string>(ax, "setups", {"uniform", "increase", "decrease"})) {
        GameConfig g = base;
        g.channel = ch;
        g.classes = one_to_five;
        if (ch == Channel::Discrete) g.length_coef = 0.005;
        auto c = make_cell(to_string(ch) + "-" + setup, g, {}, setup);
        c.dissimilarity = ch == Channel::Sketch;
        c.labels = {{"channel", to_string(ch)}, {"setup", setup}};
        plan.cells.push_back(std::move(c));
      }
    }
    if (a3) plan.notes.push_back("dissimilarities are mean Euclidean distances between 16x16 downsampled sketches, "
                                 "computed in pixel space without a stochastic embedding");
  } else if (p == "fig5-extrapolation") {
    fixed_classes("training classes");
    const auto train = axis<int>(ax, "train", one_to_five);
    const auto ood = axis<int>(ax, "ood", default_ood(train));
    for (auto ch : detail::channels_axis(ax, {"discrete"}, p)) plan.cells.push_back(extrapolation_cell(ch, train, ood));
  } else if (p == "fig5-interpolation") {
    fixed_classes("training classes");
    const auto sets = axis<std::vector<int>>(ax, "train_sets", {{1, 2, 4, 5}, {1, 2, 3, 5}});
    for (auto ch : detail::channels_axis(ax, {"discrete"}, p)) {
      for (const auto& train : sets) plan.cells.push_back(interpolation_cell(ch, train));
    }
  } else if (p == "table1-vocab-sweep") {
    detail::channels_axis(ax, {"discrete"}, p, true);
    for (auto v : axis<std::size_t>(ax, "vocab", {3, 5, 10, 100})) {
      GameConfig g = base;
      g.classes = one_to_five;
      g.variable_length = false;
      g.max_len = 5;
      g.vocab_size = v;
      auto c = make_cell("vocab-" + std::to_string(v), g);
      c.labels = {{"vocab", v}, {"max_len", c.game.max_len}};
      plan.cells.push_back(std::move(c));
    }
  } else if (p == "figA4-sketch-zeroshot") {
    fixed_classes("training classes");
    for (auto ch : detail::channels_axis(ax, {"sketch"}, p)) {
      if (ch != Channel::Sketch) throw ConfigError(p + " is defined for the sketch channel only");
    }
    const auto train = axis<int>(ax, "train", one_to_five);
    plan.cells.push_back(extrapolation_cell(Channel::Sketch, train, axis<int>(ax, "ood", default_ood(train))));
    for (const auto& set : axis<std::vector<int>>(ax, "train_sets", {{1, 2, 4, 5}, {1, 2, 3, 5}})) {
      plan.cells.push_back(interpolation_cell(Channel::Sketch, set));
    }
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw UnknownPreset("'" + p + "' (known: " + known + ")");
  }
  for (const auto& c : plan.cells) c.game.validate();
  return plan;
}

// ---------------------------------------------------------------------------
// Worker pool

inline std::size_t worker_count(std::size_t requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("NUMGAME_WORKERS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs every job on at most `workers` threads. If jobs fail, the error of
/// the lowest-numbered failing job is rethrown after all threads join.
inline void run_jobs(const std::vector<std::function<void()>>& jobs, std::size_t workers) {
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        jobs[i]();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::min(std::max<std::size_t>(1, workers), jobs.size());
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < n; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// A module error annotated with the experiment cell that raised it. Keeps
/// the original error kind.
class CellError : public Error {
 public:
  CellError(const std::string& kind, const std::string& where, const std::string& what)
      : Error(kind, where + ": " + what) {}
};

// ---------------------------------------------------------------------------
// Running one cell

using Log = std::function<void(const std::string&)>;

inline fs::path cell_dir(const fs::path& out, const std::string& cell, std::uint64_t seed) {
  return out / "cells" / cell / ("seed" + std::to_string(seed));
}

namespace detail {

inline CsvTable mapping_csv(const MappingMatrix& m) {
  CsvTable t;
  t.header.push_back("numerosity");
  t.header.insert(t.header.end(), m.columns.begin(), m.columns.end());
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    std::vector<std::string> row{std::to_string(m.rows[i])};
    for (auto v : m.counts[i]) row.push_back(std::to_string(v));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline CsvTable matrix_csv(const DissimilarityMatrix& m) {
  CsvTable t;
  t.header.push_back("numerosity");
  for (int c : m.classes) t.header.push_back(std::to_string(c));
  for (std::size_t i = 0; i < m.classes.size(); ++i) {
    std::vector<std::string> row{std::to_string(m.classes[i])};
    for (double v : m.values[i]) row.push_back(format_fixed(v));
    t.rows.push_back(std::move(row));
  }
  return t;
}

/// First few eval sketches per class, for grids.
inline Transcript sketch_samples(const Transcript& t, std::size_t per_class) {
  Transcript out = t;
  out.records.clear();
  std::map<int, std::size_t> seen;
  for (const auto& r : t.records) {
    if (seen[r.target_n]++ < per_class) out.append(r);
  }
  std::stable_sort(out.records.begin(), out.records.end(),
                   [](const auto& a, const auto& b) { return a.target_n < b.target_n; });
  return out;
}

inline std::vector<std::string> codes_for(const Transcript& t, const Cell& cell, std::size_t side, Rng& rng,
                                          const std::set<int>& fit_classes = {}) {
  if (t.channel == Channel::Discrete) return code_messages(t);
  return code_sketches(t, side, cell.game.cluster_count(), rng, fit_classes).codes;
}

}  // namespace detail

/// Trains one cell for one seed and writes its artifacts into `dir`:
/// config.json, metrics.csv, transcript.jsonl, checkpoint.bin, mapping.csv,
/// result.json, plus sketches/, dissimilarity.csv and generalisation.csv
/// where they apply.
inline nlohmann::json run_cell(const Cell& cell, std::uint64_t seed, const Dataset& ds, const fs::path& dir,
                               const Log& log = nullptr) {
  GameConfig cfg = cell.game;
  cfg.seed = seed;
  const std::size_t side = ds.spec().canvas_side;
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << nlohmann::json{{"cell", cell.name},
                                                       {"game", cfg.to_json()},
                                                       {"dataset", ds.spec().to_json()},
                                                       {"dataset_hash", ds.spec_hash()},
                                                       {"labels", cell.labels}}
                                            .dump(2)
                                     << '\n';
  TrainOptions opts;
  opts.checkpoint = dir / "checkpoint.bin";
  if (log) {
    opts.on_epoch = [&](const EpochMetrics& m) {
      log(cell.name + " seed " + std::to_string(seed) + " epoch " + std::to_string(m.epoch) + " acc " +
          format_fixed(m.accuracy, 3) + " H " + format_fixed(m.cond_entropy, 3) + " len " + format_fixed(m.mean_len, 2));
    };
  }
  auto res = train(cfg, ds, opts);
  write_metrics_csv(dir / "metrics.csv", res.history);
  write_transcript(dir / "transcript.jsonl", res.transcript);

  nlohmann::json result;
  result["cell"] = cell.name;
  result["seed"] = seed;
  const auto& last = res.history.back();
  result["final"] = {{"accuracy", last.accuracy}, {"cond_entropy", last.cond_entropy}, {"mean_len", last.mean_len}};

  Rng code_rng(derive_seed({seed, fnv1a("report")}));
  std::vector<std::string> codes;
  if (cfg.channel == Channel::Discrete) {
    codes = code_messages(res.transcript);
  } else {
    auto coding = code_sketches(res.transcript, side, cfg.cluster_count(), code_rng);
    std::vector<int> labels;
    for (const auto& r : res.transcript.records) labels.push_back(r.target_n);
    result["final"]["purity"] = cluster_purity(coding.model.assignment, labels);
    const auto corr = span_correlation(res.transcript, ds);
    result["final"]["span_corr"] = corr.r;
    result["final"]["span_corr_degenerate"] = corr.degenerate;
    dump_sketches(dir / "sketches", detail::sketch_samples(res.transcript, 3), side);
    if (cell.dissimilarity) {
      std::map<int, std::vector<std::vector<float>>> by_class;
      for (std::size_t i = 0; i < res.transcript.size(); ++i) {
        by_class[res.transcript.records[i].target_n].push_back(coding.features[i]);
      }
      write_csv(dir / "dissimilarity.csv", detail::matrix_csv(pairwise_dissimilarity(by_class, cfg.classes)));
    }
    codes = std::move(coding.codes);
  }
  write_csv(dir / "mapping.csv", detail::mapping_csv(mapping_matrix(code_table(res.transcript, codes, true))));

  if (!cell.test_sets.empty()) {
    std::map<std::string, CodedTranscript> sets;
    std::vector<std::string> names;
    const std::set<int> trained(cfg.classes.begin(), cfg.classes.end());
    for (const auto& ts : cell.test_sets) {
      Rng eval_rng(derive_seed({seed, fnv1a("test-set"), fnv1a(ts.name)}));
      auto t = evaluate(res.agents, ds, ts.classes, cfg.condition, cfg.candidates_for(ts.classes), cfg.eval_episodes,
                        eval_rng, Split::Test, static_cast<int>(cfg.epochs), "test:" + ts.name);
      Rng ts_code_rng(derive_seed({seed, fnv1a("report"), fnv1a(ts.name)}));
      auto ts_codes = detail::codes_for(t, cell, side, ts_code_rng, trained);
      write_csv(dir / ("mapping_" + ts.name + ".csv"), detail::mapping_csv(mapping_matrix(code_table(t, ts_codes))));
      sets.emplace(ts.name, CodedTranscript{std::move(t), std::move(ts_codes)});
      names.push_back(ts.name);
    }
    const auto rep = generalisation_report(cfg.classes, sets, names);
    CsvTable g;
    g.header = {"test_set", "novel_classes", "accuracy", "in_distribution_accuracy", "novel_accuracy",
                "ceiling_code", "ceiling_reuse", "ceiling_reuse_flag", "cond_entropy"};
    result["test_sets"] = nlohmann::json::object();
    for (const auto& name : names) {
      const auto& e = *std::find_if(rep.entries.begin(), rep.entries.end(),
                                    [&](const auto& x) { return x.test_set == name; });
      const bool has_novel = !e.novel_classes.empty();
      g.rows.push_back({e.test_set, detail::join_classes(e.novel_classes), format_fixed(e.accuracy),
                        format_fixed(e.in_distribution_accuracy), has_novel ? format_fixed(e.novel_accuracy) : "",
                        e.ceiling_code, has_novel ? format_fixed(e.ceiling_reuse) : "",
                        has_novel ? (e.ceiling_reuse_flag ? "1" : "0") : "", format_fixed(e.conditional_entropy)});
      nlohmann::json je = {{"accuracy", e.accuracy},
                           {"in_distribution_accuracy", e.in_distribution_accuracy},
                           {"cond_entropy", e.conditional_entropy},
                           {"novel_classes", e.novel_classes}};
      if (has_novel) {
        je["novel_accuracy"] = e.novel_accuracy;
        je["ceiling_reuse"] = e.ceiling_reuse;
        je["ceiling_reuse_flag"] = e.ceiling_reuse_flag;
        je["novel_code_distribution"] = e.novel_code_distribution;
      }
      result["test_sets"][name] = je;
    }
    write_csv(dir / "generalisation.csv", g);
  }
  std::ofstream(dir / "result.json") << result.dump(2) << '\n';
  return result;
}

// ---------------------------------------------------------------------------
// Aggregation

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  std::vector<double> x;
  for (double d : v) {
    if (std::isfinite(d)) x.push_back(d);
  }
  m.n = x.size();
  if (x.empty()) return {std::nan(""), std::nan(""), 0};
  for (double d : x) m.mean += d;
  m.mean /= static_cast<double>(x.size());
  if (x.size() > 1) {
    double s = 0.0;
    for (double d : x) s += (d - m.mean) * (d - m.mean);
    m.std = std::sqrt(s / static_cast<double>(x.size() - 1));
  }
  return m;
}

namespace detail {

inline std::string fmt_or_empty(double v) { return std::isfinite(v) ? format_fixed(v) : ""; }

/// Flattens the numeric leaves of a cell result (final.* and test_sets.*).
inline std::map<std::string, double> scalar_metrics(const nlohmann::json& result) {
  std::map<std::string, double> out;
  for (const auto& [k, v] : result.at("final").items()) {
    if (v.is_number()) out[k] = v.get<double>();
  }
  if (result.contains("test_sets")) {
    for (const auto& [ts, body] : result["test_sets"].items()) {
      for (const auto& [k, v] : body.items()) {
        if (v.is_number()) out[ts + "." + k] = v.get<double>();
        if (v.is_boolean()) out[ts + "." + k] = v.get<bool>() ? 1.0 : 0.0;
      }
    }
  }
  return out;
}

}  // namespace detail

/// Reads every cell's artifacts and writes report/*.csv and summary.json.
/// Only persisted files are used, so this can be rerun on its own.
inline nlohmann::json aggregate(const PresetPlan& plan, const std::vector<std::uint64_t>& seeds, const fs::path& out) {
  const fs::path report = out / "report";
  fs::create_directories(report);
  nlohmann::json summary;
  summary["preset"] = plan.preset;
  summary["seeds"] = seeds;
  summary["cells"] = nlohmann::json::object();
  std::vector<std::string> notes = plan.notes;

  // per-epoch curves
  const std::vector<std::string> metrics{"accuracy", "cond_entropy", "mean_len"};
  std::map<std::string, CsvTable> curves;
  std::size_t max_epochs = 0;
  std::map<std::string, std::map<std::uint64_t, std::vector<EpochMetrics>>> histories;
  for (const auto& cell : plan.cells) {
    for (auto seed : seeds) {
      auto h = read_metrics_csv(cell_dir(out, cell.name, seed) / "metrics.csv");
      max_epochs = std::max(max_epochs, h.size());
      histories[cell.name][seed] = std::move(h);
    }
  }
  for (const auto& m : metrics) {
    CsvTable t;
    t.header.push_back("epoch");
    for (const auto& cell : plan.cells) {
      t.header.push_back(cell.name + "_mean");
      t.header.push_back(cell.name + "_std");
    }
    for (std::size_t e = 0; e < max_epochs; ++e) {
      std::vector<std::string> row{std::to_string(e + 1)};
      for (const auto& cell : plan.cells) {
        std::vector<double> v;
        for (auto seed : seeds) {
          const auto& h = histories[cell.name][seed];
          if (e >= h.size()) continue;
          v.push_back(m == "accuracy" ? h[e].accuracy : m == "cond_entropy" ? h[e].cond_entropy : h[e].mean_len);
        }
        const auto ms = mean_std(v);
        row.push_back(detail::fmt_or_empty(ms.mean));
        row.push_back(detail::fmt_or_empty(ms.std));
      }
      t.rows.push_back(std::move(row));
    }
    write_csv(report / (m + ".csv"), t);
  }

  // final scalars
  CsvTable final_t;
  final_t.header = {"cell", "metric", "mean", "std", "n"};
  std::map<std::string, std::map<std::string, MeanStd>> finals;
  for (const auto& cell : plan.cells) {
    std::map<std::string, std::vector<double>> values;
    nlohmann::json per_seed = nlohmann::json::object();
    for (auto seed : seeds) {
      std::ifstream in(cell_dir(out, cell.name, seed) / "result.json");
      if (!in) throw MissingMetrics("no result.json for " + cell.name + " seed " + std::to_string(seed));
      const auto r = nlohmann::json::parse(in);
      per_seed[std::to_string(seed)] = r;
      for (const auto& [k, v] : detail::scalar_metrics(r)) values[k].push_back(v);
    }
    nlohmann::json jc;
    jc["labels"] = cell.labels;
    jc["game"] = cell.game.to_json();
    jc["dataset_hash"] = cell.data.hash();
    jc["per_seed"] = per_seed;
    for (const auto& [k, v] : values) {
      const auto ms = mean_std(v);
      finals[cell.name][k] = ms;
      final_t.rows.push_back({cell.name, k, detail::fmt_or_empty(ms.mean), detail::fmt_or_empty(ms.std),
                              std::to_string(ms.n)});
      jc["metrics"][k] = {{"mean", ms.mean}, {"std", ms.std}, {"values", v}};
    }
    summary["cells"][cell.name] = jc;
  }
  write_csv(report / "final.csv", final_t);

  // generalisation table
  CsvTable gen;
  gen.header = {"cell", "test_set", "accuracy_mean", "accuracy_std", "novel_accuracy_mean", "novel_accuracy_std",
                "ceiling_reuse_mean", "ceiling_reuse_flags", "cond_entropy_mean"};
  for (const auto& cell : plan.cells) {
    for (const auto& ts : cell.test_sets) {
      const auto& f = finals[cell.name];
      auto get = [&](const std::string& k) {
        auto it = f.find(ts.name + "." + k);
        return it == f.end() ? MeanStd{std::nan(""), std::nan(""), 0} : it->second;
      };
      const auto flags = get("ceiling_reuse_flag");
      gen.rows.push_back({cell.name, ts.name, detail::fmt_or_empty(get("accuracy").mean),
                          detail::fmt_or_empty(get("accuracy").std), detail::fmt_or_empty(get("novel_accuracy").mean),
                          detail::fmt_or_empty(get("novel_accuracy").std),
                          detail::fmt_or_empty(get("ceiling_reuse").mean),
                          flags.n ? std::to_string(static_cast<long>(std::lround(flags.mean * flags.n))) + "/" +
                                        std::to_string(flags.n)
                                  : "",
                          detail::fmt_or_empty(get("cond_entropy").mean)});
    }
  }
  if (!gen.rows.empty()) write_csv(report / "generalisation.csv", gen);

  // vocabulary table
  if (plan.preset == "table1-vocab-sweep") {
    CsvTable t;
    t.header = {"max_len", "vocab", "accuracy_mean", "accuracy_std", "entropy_mean", "entropy_std"};
    for (const auto& cell : plan.cells) {
      const auto& f = finals[cell.name];
      t.rows.push_back({std::to_string(cell.game.max_len), std::to_string(cell.game.vocab_size),
                        format_fixed(f.at("accuracy").mean), format_fixed(f.at("accuracy").std),
                        format_fixed(f.at("cond_entropy").mean), format_fixed(f.at("cond_entropy").std)});
    }
    write_csv(report / "table.csv", t);
  }

  // mean dissimilarity per cell
  for (const auto& cell : plan.cells) {
    if (!cell.dissimilarity) continue;
    CsvTable mean_t;
    std::vector<std::vector<double>> acc;
    std::size_t n = 0;
    for (auto seed : seeds) {
      const auto t = read_csv(cell_dir(out, cell.name, seed) / "dissimilarity.csv");
      if (acc.empty()) {
        mean_t.header = t.header;
        acc.assign(t.rows.size(), std::vector<double>(t.header.size() - 1, 0.0));
      }
      for (std::size_t i = 0; i < t.rows.size() && i < acc.size(); ++i) {
        for (std::size_t j = 1; j < t.rows[i].size() && j - 1 < acc[i].size(); ++j) acc[i][j - 1] += parse_number(t.rows[i][j]);
      }
      ++n;
    }
    for (std::size_t i = 0; i < acc.size(); ++i) {
      std::vector<std::string> row{mean_t.header[i + 1]};
      for (double v : acc[i]) row.push_back(format_fixed(v / static_cast<double>(n)));
      mean_t.rows.push_back(std::move(row));
    }
    write_csv(report / ("dissimilarity_" + cell.name + ".csv"), mean_t);
  }

  // directional observations
  if (plan.preset == "fig4-frequency" || plan.preset == "figA3-dissimilarity") {
    std::map<std::string, std::pair<std::string, double>> lowest;  // channel -> (setup, accuracy)
    for (const auto& cell : plan.cells) {
      const auto ch = cell.labels.value("channel", "");
      const double acc = finals[cell.name].at("accuracy").mean;
      if (!lowest.count(ch) || acc < lowest[ch].second) lowest[ch] = {cell.labels.value("setup", ""), acc};
    }
    for (const auto& [ch, v] : lowest) {
      summary["lowest_accuracy_setup"][ch] = v.first;
      notes.push_back(ch + ": lowest mean accuracy in the " + v.first + " setup (" + format_fixed(v.second, 3) + ")");
    }
  }
  if (plan.preset == "fig2-same-diff") {
    for (const auto& cell : plan.cells) {
      if (cell.labels.value("condition", "") != "same") continue;
      const auto ch = cell.labels.value("channel", "");
      const auto diff_name = ch + "-diff";
      if (!histories.count(diff_name)) continue;
      for (auto seed : seeds) {
        const auto& hs = histories[cell.name][seed];
        const auto& hd = histories[diff_name][seed];
        std::vector<int> epochs;
        for (std::size_t e = 0; e < std::min(hs.size(), hd.size()); ++e) {
          if (hs[e].accuracy < hd[e].accuracy) epochs.push_back(hs[e].epoch);
        }
        if (!epochs.empty()) {
          notes.push_back(ch + " seed " + std::to_string(seed) + ": Same accuracy below Diff at " +
                          std::to_string(epochs.size()) + " of " + std::to_string(hs.size()) + " epochs");
        }
      }
    }
  }
  summary["notes"] = notes;

  const auto tmp = out / "summary.json.tmp";
  std::ofstream(tmp) << summary.dump(2) << '\n';
  fs::rename(tmp, out / "summary.json");
  return summary;
}

// ---------------------------------------------------------------------------
// Plots

/// Renders every chart of an experiment directory from its CSV artifacts
/// into <dir>/plots. Returns the notes about skipped charts (also written
/// to plots/NOTES.txt).
inline std::vector<std::string> render_plots(const fs::path& dir) {
  const fs::path report = dir / "report";
  if (!fs::exists(report / "accuracy.csv")) throw MissingMetrics("no report/accuracy.csv under " + dir.string());
  const fs::path plots_dir = dir / "plots";
  fs::create_directories(plots_dir);
  std::vector<std::string> notes;

  const std::vector<std::pair<std::string, std::string>> metrics{
      {"accuracy", "accuracy"}, {"cond_entropy", "H(N|M) [bits]"}, {"mean_len", "mean message length"}};
  for (const auto& [m, ylabel] : metrics) {
    if (!fs::exists(report / (m + ".csv"))) {
      notes.push_back(m + ": no series file, plot omitted");
      continue;
    }
    const auto t = read_csv(report / (m + ".csv"));
    plots::LinePlot p;
    p.title = m + " per epoch";
    p.xlabel = "epoch";
    p.ylabel = ylabel;
    for (std::size_t c = 1; c + 1 < t.header.size(); c += 2) {
      plots::Series s;
      s.label = t.header[c].substr(0, t.header[c].size() - 5);  // strip "_mean"
      for (const auto& row : t.rows) {
        s.x.push_back(parse_number(row[0]));
        s.y.push_back(parse_number(row[c]));
        s.err.push_back(parse_number(row[c + 1]));
      }
      if (s.empty()) notes.push_back(m + ": series '" + s.label + "' is empty and was left out");
      p.series.push_back(std::move(s));
    }
    if (!plots::write_line_plot(plots_dir / m, p)) notes.push_back(m + ": every series is empty, plot omitted");
  }

  if (fs::exists(report / "generalisation.csv")) {
    const auto t = read_csv(report / "generalisation.csv");
    std::map<std::string, std::vector<const std::vector<std::string>*>> by_cell;
    std::vector<std::string> order;
    for (const auto& row : t.rows) {
      if (!by_cell.count(row[0])) order.push_back(row[0]);
      by_cell[row[0]].push_back(&row);
    }
    for (const auto& cell : order) {
      plots::LinePlot p;
      p.title = "generalisation: " + cell;
      p.xlabel = "test set";
      p.ylabel = "accuracy";
      plots::Series all{"all episodes", {}, {}, {}}, novel{"novel class", {}, {}, {}};
      for (std::size_t i = 0; i < by_cell[cell].size(); ++i) {
        const auto& row = *by_cell[cell][i];
        p.xticks.push_back(row[1]);
        all.x.push_back(static_cast<double>(i));
        all.y.push_back(parse_number(row[2]));
        all.err.push_back(parse_number(row[3]));
        novel.x.push_back(static_cast<double>(i));
        novel.y.push_back(parse_number(row[4]));
        novel.err.push_back(parse_number(row[5]));
      }
      p.series = {all, novel};
      plots::write_line_plot(plots_dir / ("generalisation_" + cell), p);
    }
  }

  if (fs::exists(report / "table.csv")) {
    const auto t = read_csv(report / "table.csv");
    plots::LinePlot p;
    p.title = "fixed-length messages: vocabulary sweep";
    p.xlabel = "vocabulary size";
    p.ylabel = "value";
    plots::Series acc{"accuracy", {}, {}, {}}, ent{"H(N|M) [bits]", {}, {}, {}};
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      p.xticks.push_back(t.rows[i][1]);
      acc.x.push_back(static_cast<double>(i));
      acc.y.push_back(parse_number(t.rows[i][2]));
      acc.err.push_back(parse_number(t.rows[i][3]));
      ent.x.push_back(static_cast<double>(i));
      ent.y.push_back(parse_number(t.rows[i][4]));
      ent.err.push_back(parse_number(t.rows[i][5]));
    }
    p.series = {acc, ent};
    plots::write_line_plot(plots_dir / "vocab_table", p);
  }

  auto heatmap_from = [&](const fs::path& csv, const std::string& title, const fs::path& stem) {
    const auto t = read_csv(csv);
    plots::Heatmap h;
    h.title = title;
    h.cols.assign(t.header.begin() + 1, t.header.end());
    for (const auto& row : t.rows) {
      h.rows.push_back(row[0]);
      std::vector<double> v;
      for (std::size_t j = 1; j < row.size(); ++j) v.push_back(parse_number(row[j]));
      h.values.push_back(std::move(v));
    }
    if (h.rows.empty() || h.cols.empty()) {
      notes.push_back(csv.filename().string() + ": empty matrix, heatmap omitted");
      return;
    }
    plots::write_heatmap(stem, h);
  };
  for (const auto& entry : fs::directory_iterator(report)) {
    const auto name = entry.path().stem().string();
    if (name.rfind("dissimilarity_", 0) == 0) heatmap_from(entry.path(), "dissimilarity " + name.substr(14), plots_dir / name);
  }

  const fs::path cells = dir / "cells";
  if (fs::exists(cells)) {
    std::vector<fs::path> cell_dirs;
    for (const auto& e : fs::directory_iterator(cells)) cell_dirs.push_back(e.path());
    std::sort(cell_dirs.begin(), cell_dirs.end());
    for (const auto& cd : cell_dirs) {
      const auto cell = cd.filename().string();
      std::vector<fs::path> seed_dirs;
      for (const auto& e : fs::directory_iterator(cd)) seed_dirs.push_back(e.path());
      std::sort(seed_dirs.begin(), seed_dirs.end());
      std::vector<std::string> row_labels;
      std::set<int> classes;
      std::vector<std::map<int, fs::path>> firsts;
      for (const auto& sd : seed_dirs) {
        std::vector<fs::path> maps;
        for (const auto& e : fs::directory_iterator(sd)) {
          const auto fn = e.path().filename().string();
          if (fn.rfind("mapping", 0) == 0 && e.path().extension() == ".csv") maps.push_back(e.path());
        }
        std::sort(maps.begin(), maps.end());
        for (const auto& m : maps) {
          const auto stem = "mapping_" + cell + "_" + sd.filename().string() +
                            (m.stem().string() == "mapping" ? "" : m.stem().string().substr(7));
          heatmap_from(m, "codes: " + cell + " " + sd.filename().string() + " " + m.stem().string(), plots_dir / stem);
        }
        if (!fs::exists(sd / "sketches")) continue;
        std::vector<fs::path> pngs;
        for (const auto& e : fs::directory_iterator(sd / "sketches")) pngs.push_back(e.path());
        std::sort(pngs.begin(), pngs.end());
        std::map<int, fs::path> first;
        for (const auto& p : pngs) {
          const auto fn = p.filename().string();  // n<target>_e<i>.png
          const int n = std::atoi(fn.c_str() + 1);
          if (!first.count(n)) first[n] = p;
          classes.insert(n);
        }
        row_labels.push_back(sd.filename().string());
        firsts.push_back(std::move(first));
      }
      if (firsts.empty()) continue;
      std::vector<std::string> col_labels;
      for (int c : classes) col_labels.push_back(std::to_string(c));
      std::vector<std::vector<fs::path>> tiles;
      for (const auto& f : firsts) {
        std::vector<fs::path> row;
        for (int c : classes) row.push_back(f.count(c) ? f.at(c) : fs::path());
        tiles.push_back(std::move(row));
      }
      plots::write_image_grid(plots_dir / ("sketches_" + cell), "eval sketches: " + cell, row_labels, col_labels,
                              tiles);
    }
  }

  std::ofstream note_file(plots_dir / "NOTES.txt");
  for (const auto& n : notes) note_file << n << '\n';
  return notes;
}

// ---------------------------------------------------------------------------
// Whole presets

/// Loads or builds every dataset of the plan (sequentially, so that cells
/// sharing a spec share one directory), then runs cell x seed jobs on the
/// worker pool, then aggregates and plots.
inline nlohmann::json run_preset(const ExperimentSpec& spec, const Log& log = nullptr) {
  spec.validate();
  const auto plan = plan_preset(spec);
  fs::create_directories(spec.out);
  std::map<std::string, std::shared_ptr<const Dataset>> datasets;
  const auto root = spec.dataset_root();
  fs::create_directories(root);
  for (const auto& cell : plan.cells) {
    const auto h = cell.data.hash();
    if (!datasets.count(h)) {
      if (log) log("dataset " + h + " for " + cell.name);
      datasets[h] = std::make_shared<const Dataset>(load_or_build_dataset(root, cell.data));
    }
  }

  std::mutex log_mu;
  const Log locked = log ? Log([&](const std::string& s) {
    std::lock_guard<std::mutex> lock(log_mu);
    log(s);
  })
                         : Log();
  std::vector<std::function<void()>> jobs;
  for (const auto& cell : plan.cells) {
    for (auto seed : spec.seeds) {
      jobs.push_back([&, seed] {
        const auto where = plan.preset + "/" + cell.name + "/seed" + std::to_string(seed);
        try {
          run_cell(cell, seed, *datasets.at(cell.data.hash()), cell_dir(spec.out, cell.name, seed), locked);
        } catch (const Error& e) {
          std::string what = e.what();
          if (what.rfind(e.kind() + ": ", 0) == 0) what.erase(0, e.kind().size() + 2);
          throw CellError(e.kind(), where, what);
        }
      });
    }
  }
  run_jobs(jobs, worker_count(spec.workers));
  auto summary = aggregate(plan, spec.seeds, spec.out);
  render_plots(spec.out);
  return summary;
}

}  // namespace numgame
