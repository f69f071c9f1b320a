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

#include <stdexcept>
#include <string>

namespace numgame {

/// Base of every error raised by the library. `kind()` names the failure
/// class so callers (and the CLI) can report it without RTTI games.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define NUMGAME_DEFINE_ERROR(Name)                                     \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(#Name, what) {}     \
  };

// stimuli
NUMGAME_DEFINE_ERROR(InvalidNumerosity)
NUMGAME_DEFINE_ERROR(InfeasibleConstraint)
NUMGAME_DEFINE_ERROR(InvalidSpec)
NUMGAME_DEFINE_ERROR(IoError)

// diffcore
NUMGAME_DEFINE_ERROR(NonScalarRoot)
NUMGAME_DEFINE_ERROR(NonFiniteValue)
NUMGAME_DEFINE_ERROR(ShapeMismatch)

// agents / game
NUMGAME_DEFINE_ERROR(EmptyCandidates)
NUMGAME_DEFINE_ERROR(InsufficientClasses)
NUMGAME_DEFINE_ERROR(InsufficientInstances)
NUMGAME_DEFINE_ERROR(IndexOutOfRange)
NUMGAME_DEFINE_ERROR(DivergenceDetected)

// metrics
NUMGAME_DEFINE_ERROR(EmptyTable)
NUMGAME_DEFINE_ERROR(EmptySelection)
NUMGAME_DEFINE_ERROR(TooFewSketches)
NUMGAME_DEFINE_ERROR(MissingClass)
NUMGAME_DEFINE_ERROR(WrongChannel)
NUMGAME_DEFINE_ERROR(MissingTranscript)

// experiments
NUMGAME_DEFINE_ERROR(UnknownPreset)
NUMGAME_DEFINE_ERROR(MissingMetrics)
NUMGAME_DEFINE_ERROR(ConfigError)

#undef NUMGAME_DEFINE_ERROR

}  // namespace numgame
