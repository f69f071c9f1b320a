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

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <nlohmann/json.hpp>
#include "numgame/diff/layers.hpp"

namespace numgame::diff {

// File layout: one line of JSON {"format": "numgame-checkpoint", "version": 1,
// "dtype": "float32", "tensors": [{"name", "shape"}...]} terminated by '\n',
// then every tensor's values as little-endian float32, in header order.

inline constexpr const char* kCheckpointFormat = "numgame-checkpoint";

inline void save_checkpoint(const std::filesystem::path& path, const ParameterList<float>& params,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes little-endian host");
  nlohmann::json header;
  header["format"] = kCheckpointFormat;
  header["version"] = 1;
  header["dtype"] = "float32";
  header["tensors"] = nlohmann::json::array();
  for (const auto& p : params) header["tensors"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  header["meta"] = extra;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const std::string line = header.dump() + "\n";
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  for (const auto& p : params) {
    out.write(reinterpret_cast<const char*>(p.tensor.values().data()),
              static_cast<std::streamsize>(p.tensor.size() * sizeof(float)));
  }
  if (!out) throw IoError("short write on checkpoint " + path.string());
}

inline nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  auto header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != kCheckpointFormat) {
    throw IoError(path.string() + " is not a numgame checkpoint");
  }
  return header;
}

/// Loads values into an existing parameter list; names and shapes must match.
inline nlohmann::json load_checkpoint(const std::filesystem::path& path, ParameterList<float>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  auto header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != kCheckpointFormat) {
    throw IoError(path.string() + " is not a numgame checkpoint");
  }
  std::map<std::string, BasicTensor<float>*> by_name;
  for (auto& p : params) by_name[p.name] = &p.tensor;
  std::size_t loaded = 0;
  for (const auto& entry : header["tensors"]) {
    const auto name = entry["name"].get<std::string>();
    const auto shape = entry["shape"].get<Shape>();
    std::vector<float> buf(numel(shape));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw IoError("truncated checkpoint payload at " + name);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ShapeMismatch("checkpoint tensor '" + name + "' has no destination");
    if (it->second->shape() != shape) {
      throw ShapeMismatch("checkpoint tensor '" + name + "' shape " + to_string(shape) + " vs " +
                          to_string(it->second->shape()));
    }
    std::copy(buf.begin(), buf.end(), it->second->mutable_values().begin());
    ++loaded;
  }
  if (loaded != params.size()) throw ShapeMismatch("checkpoint is missing parameters");
  return header.value("meta", nlohmann::json::object());
}

}  // namespace numgame::diff
