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

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include "numgame/agents.hpp"
#include "numgame/error.hpp"
#include "numgame/stimuli.hpp"

namespace numgame {

enum class Condition { Same, Diff };

inline std::string to_string(Condition c) { return c == Condition::Same ? "same" : "diff"; }

inline Condition parse_condition(const std::string& s) {
  if (s == "same") return Condition::Same;
  if (s == "diff") return Condition::Diff;
  throw ConfigError("unknown condition '" + s + "'");
}

/// One evaluated episode.
struct TranscriptRecord {
  int epoch = 0;
  std::string phase;
  ImageId sender;
  std::vector<int> tokens;    // discrete channel
  std::vector<float> strokes; // sketch channel, flat (x0, y0, x1, y1)*K
  int target_n = 0;
  int predicted_n = 0;
  bool correct = false;
  std::size_t eff_len = 0;
};

struct Transcript {
  Channel channel = Channel::Discrete;
  bool variable_length = true;
  float thickness = 1.5f / 64.0f;
  std::vector<TranscriptRecord> records;

  void append(TranscriptRecord r) { records.push_back(std::move(r)); }

  void append(const Transcript& other) {
    records.insert(records.end(), other.records.begin(), other.records.end());
  }

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

inline nlohmann::json to_json(const TranscriptRecord& r, Channel channel) {
  nlohmann::json j{{"epoch", r.epoch},
                   {"phase", r.phase},
                   {"sender_n", r.sender.numerosity},
                   {"sender_index", r.sender.index}};
  if (channel == Channel::Discrete) {
    j["tokens"] = r.tokens;
  } else {
    j["strokes"] = r.strokes;
  }
  j["predicted_n"] = r.predicted_n;
  j["correct"] = r.correct;
  j["eff_len"] = r.eff_len;
  return j;
}

/// JSONL: one record per line.
inline void write_transcript(const std::filesystem::path& path, const Transcript& t) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : t.records) out << to_json(r, t.channel).dump() << '\n';
}

inline Transcript read_transcript(const std::filesystem::path& path, bool variable_length = true,
                                  float thickness = 1.5f / 64.0f) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  Transcript t;
  t.variable_length = variable_length;
  t.thickness = thickness;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (first) {
      t.channel = j.contains("strokes") ? Channel::Sketch : Channel::Discrete;
      first = false;
    }
    TranscriptRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.phase = j.at("phase").get<std::string>();
    r.sender = {j.at("sender_n").get<int>(), j.value("sender_index", std::size_t{0})};
    r.target_n = r.sender.numerosity;
    if (j.contains("tokens")) r.tokens = j["tokens"].get<std::vector<int>>();
    if (j.contains("strokes")) r.strokes = j["strokes"].get<std::vector<float>>();
    r.predicted_n = j.at("predicted_n").get<int>();
    r.correct = j.at("correct").get<bool>();
    r.eff_len = j.at("eff_len").get<std::size_t>();
    t.records.push_back(std::move(r));
  }
  return t;
}

}  // namespace numgame
