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
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "numgame/agents.hpp"
#include "numgame/diff/checkpoint.hpp"
#include "numgame/diff/ops.hpp"
#include "numgame/diff/optim.hpp"
#include "numgame/error.hpp"
#include "numgame/metrics.hpp"
#include "numgame/rng.hpp"
#include "numgame/stimuli.hpp"
#include "numgame/transcript.hpp"

namespace numgame {

// ---------------------------------------------------------------------------
// Episodes

struct Episode {
  ImageId sender;
  std::vector<ImageId> candidates;
  std::size_t target_index = 0;
  Condition condition = Condition::Diff;

  const ImageId& target() const { return candidates.at(target_index); }
};

/// Instances that episode candidates may be drawn from, per class.
using InstancePool = std::map<int, std::vector<std::size_t>>;

/// Builds an episode around a given sender: the target is the sender itself
/// (Same) or another instance of its class (Diff); the distractors are one
/// instance each of C - 1 other classes drawn without replacement.
inline Episode assemble_episode(const ImageId& sender, const InstancePool& pool, Condition condition,
                                const std::vector<int>& classes, std::size_t C, Rng& rng) {
  if (C < 1) throw InsufficientClasses("candidate count must be >= 1");
  if (C > classes.size()) {
    throw InsufficientClasses(std::to_string(C) + " candidates need as many classes, have " +
                              std::to_string(classes.size()));
  }
  if (std::find(classes.begin(), classes.end(), sender.numerosity) == classes.end()) {
    throw InsufficientClasses("sender class " + std::to_string(sender.numerosity) + " is not in the class list");
  }
  const auto instances = [&](int c) -> const std::vector<std::size_t>& {
    auto it = pool.find(c);
    if (it == pool.end() || it->second.empty()) {
      throw InsufficientInstances("no instances of class " + std::to_string(c));
    }
    return it->second;
  };

  Episode ep;
  ep.sender = sender;
  ep.condition = condition;
  ImageId target = sender;
  if (condition == Condition::Diff) {
    std::vector<std::size_t> others;
    for (std::size_t i : instances(sender.numerosity)) {
      if (i != sender.index) others.push_back(i);
    }
    if (others.empty()) {
      throw InsufficientInstances("class " + std::to_string(sender.numerosity) + " needs a second instance");
    }
    target.index = others[rng.index(others.size())];
  }
  std::vector<int> rest;
  for (int c : classes) {
    if (c != sender.numerosity) rest.push_back(c);
  }
  rng.shuffle(rest.begin(), rest.end());
  ep.candidates.push_back(target);
  for (std::size_t k = 0; k + 1 < C; ++k) {
    const auto& inst = instances(rest[k]);
    ep.candidates.push_back({rest[k], inst[rng.index(inst.size())]});
  }
  rng.shuffle(ep.candidates.begin(), ep.candidates.end());
  for (std::size_t k = 0; k < ep.candidates.size(); ++k) {
    if (ep.candidates[k] == target) ep.target_index = k;
  }
  return ep;
}

inline InstancePool split_pool(const Dataset& ds, const std::vector<int>& classes, Split split) {
  InstancePool pool;
  for (int c : classes) {
    if (!ds.has_class(c)) throw InsufficientInstances("dataset has no class " + std::to_string(c));
    pool[c] = ds.split(c, split);
  }
  return pool;
}

/// Samples the sender class uniformly from `classes`, then an instance of
/// it, and builds the episode from images of one split.
inline Episode assemble_episode(const Dataset& ds, Condition condition, const std::vector<int>& classes,
                                std::size_t C, Rng& rng, Split split = Split::Test) {
  if (classes.empty()) throw InsufficientClasses("empty class list");
  const auto pool = split_pool(ds, classes, split);
  const int n = classes[rng.index(classes.size())];
  const auto& inst = pool.at(n);
  if (inst.empty()) throw InsufficientInstances("no instances of class " + std::to_string(n));
  return assemble_episode(ImageId{n, inst[rng.index(inst.size())]}, pool, condition, classes, C, rng);
}

// ---------------------------------------------------------------------------
// Losses

/// Sum over j != target of max(0, margin - s[target] + s[j]).
template <typename Range>
double hinge_loss(const Range& scores, std::size_t target_index, double margin) {
  const std::size_t n = std::size(scores);
  if (target_index >= n) throw IndexOutOfRange("target index " + std::to_string(target_index));
  if (!(margin > 0.0)) throw ConfigError("hinge margin must be > 0");
  const double st = static_cast<double>(scores[target_index]);
  double loss = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (j != target_index) loss += std::max(0.0, margin - st + static_cast<double>(scores[j]));
  }
  return loss;
}

inline double length_penalty(const Message& m, double lambda) {
  if (lambda < 0.0) throw ConfigError("length coefficient must be >= 0");
  return lambda * static_cast<double>(m.effective_len);
}

// ---------------------------------------------------------------------------
// Configuration

struct GameConfig {
  Channel channel = Channel::Discrete;
  std::vector<int> classes{1, 2, 3, 4, 5};
  std::size_t candidates = 5;
  // discrete channel
  std::size_t vocab_size = 3;
  std::size_t max_len = 5;
  bool variable_length = true;
  double length_coef = 0.0;
  double tau_start = 2.0;
  double tau_end = 0.5;
  // sketch channel
  std::size_t strokes = 5;
  double thickness_px = 1.5;  // at a 64-px canvas; scaled with the canvas
  // agents
  std::size_t embed_dim = 64;
  std::size_t hidden = 64;
  double terminator_bias = -2.0;  // initial logit offset of the terminator
  // optimisation
  double margin = 1.0;
  double length_warmup = 0.25;  // share of steps over which length_coef ramps in
  double lr = 1e-3;
  double lr_floor = 0.1;   // cosine decay ends at lr * lr_floor; 1 keeps lr constant
  double grad_clip = 1.0;  // global gradient-norm clip; 0 disables
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  std::size_t pool_extras = 2;  // extra candidate images per class per batch
  std::uint64_t seed = 0;
  Condition condition = Condition::Diff;
  std::size_t eval_episodes = 500;
  std::size_t clusters = 0;  // sketch discretisation k; 0 = number of classes

  /// Candidates actually used with a class list: min(C, |classes|).
  std::size_t candidates_for(const std::vector<int>& cls) const { return std::min(candidates, cls.size()); }

  std::size_t cluster_count() const { return clusters ? clusters : classes.size(); }

  void validate() const {
    if (classes.empty()) throw ConfigError("no training classes");
    if (candidates < 2) throw ConfigError("need at least 2 candidates");
    if (classes.size() < 2) throw InsufficientClasses("need at least 2 training classes");
    if (length_coef < 0.0) throw ConfigError("length coefficient must be >= 0");
    if (!(margin > 0.0)) throw ConfigError("hinge margin must be > 0");
    if (!(tau_start > 0.0 && tau_end > 0.0)) throw ConfigError("temperatures must be > 0");
    if (!(lr > 0.0) || lr_floor < 0.0 || lr_floor > 1.0) throw ConfigError("lr must be > 0 and lr_floor in [0,1]");
    if (length_warmup < 0.0 || length_warmup > 1.0) throw ConfigError("length_warmup must lie in [0,1]");
    if (epochs < 1 || batch_size < 1) throw ConfigError("epochs and batch size must be >= 1");
    if (channel == Channel::Discrete && (vocab_size < 2 || max_len < 1)) throw ConfigError("bad vocabulary/length");
    if (channel == Channel::Sketch && strokes < 1) throw ConfigError("need at least one stroke");
  }

  AgentConfig agent_config(std::size_t canvas_side) const {
    AgentConfig a;
    a.channel = channel;
    a.canvas_side = canvas_side;
    a.embed_dim = embed_dim;
    a.vocab_size = vocab_size;
    a.max_len = max_len;
    a.variable_length = variable_length;
    a.terminator_bias = static_cast<float>(terminator_bias);
    a.hidden = hidden;
    a.strokes = strokes;
    a.thickness = static_cast<float>(thickness_px / 64.0);
    return a;
  }

  nlohmann::json to_json() const {
    return {{"channel", to_string(channel)},
            {"classes", classes},
            {"candidates", candidates},
            {"vocab_size", vocab_size},
            {"max_len", max_len},
            {"variable_length", variable_length},
            {"length_coef", length_coef},
            {"tau_start", tau_start},
            {"tau_end", tau_end},
            {"strokes", strokes},
            {"thickness_px", thickness_px},
            {"embed_dim", embed_dim},
            {"hidden", hidden},
            {"margin", margin},
            {"terminator_bias", terminator_bias},
            {"length_warmup", length_warmup},
            {"lr", lr},
            {"lr_floor", lr_floor},
            {"grad_clip", grad_clip},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"pool_extras", pool_extras},
            {"seed", seed},
            {"condition", to_string(condition)},
            {"eval_episodes", eval_episodes},
            {"clusters", clusters}};
  }

  /// Overwrites the fields named in `j`; keys as in to_json().
  void apply_overrides(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("game settings must be a table");
    for (const auto& [key, v] : j.items()) {
      try {
        if (key == "channel") channel = parse_channel(v.get<std::string>());
        else if (key == "classes") classes = v.get<std::vector<int>>();
        else if (key == "candidates") candidates = v.get<std::size_t>();
        else if (key == "vocab_size") vocab_size = v.get<std::size_t>();
        else if (key == "max_len") max_len = v.get<std::size_t>();
        else if (key == "variable_length") variable_length = v.get<bool>();
        else if (key == "length_coef") length_coef = v.get<double>();
        else if (key == "tau_start") tau_start = v.get<double>();
        else if (key == "tau_end") tau_end = v.get<double>();
        else if (key == "strokes") strokes = v.get<std::size_t>();
        else if (key == "thickness_px") thickness_px = v.get<double>();
        else if (key == "embed_dim") embed_dim = v.get<std::size_t>();
        else if (key == "hidden") hidden = v.get<std::size_t>();
        else if (key == "margin") margin = v.get<double>();
        else if (key == "terminator_bias") terminator_bias = v.get<double>();
        else if (key == "length_warmup") length_warmup = v.get<double>();
        else if (key == "lr") lr = v.get<double>();
        else if (key == "lr_floor") lr_floor = v.get<double>();
        else if (key == "grad_clip") grad_clip = v.get<double>();
        else if (key == "epochs") epochs = v.get<std::size_t>();
        else if (key == "batch_size") batch_size = v.get<std::size_t>();
        else if (key == "pool_extras") pool_extras = v.get<std::size_t>();
        else if (key == "seed") seed = v.get<std::uint64_t>();
        else if (key == "condition") condition = parse_condition(v.get<std::string>());
        else if (key == "eval_episodes") eval_episodes = v.get<std::size_t>();
        else if (key == "clusters") clusters = v.get<std::size_t>();
        else throw ConfigError("unknown game setting '" + key + "'");
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("game setting '" + key + "': " + e.what());
      }
    }
  }

  static GameConfig from_json(const nlohmann::json& j) {
    GameConfig c;
    c.apply_overrides(j);
    return c;
  }
};

// ---------------------------------------------------------------------------
// Evaluation

/// Eval-mode episodes: class-uniform senders from `split`, distractors from
/// the same split. The sender is deterministic (argmax tokens).
inline std::vector<Episode> sample_episodes(const Dataset& ds, Condition condition, const std::vector<int>& classes,
                                            std::size_t C, std::size_t count, Rng& rng, Split split = Split::Test) {
  const auto pool = split_pool(ds, classes, split);
  std::vector<Episode> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int n = classes[rng.index(classes.size())];
    const auto& inst = pool.at(n);
    if (inst.empty()) throw InsufficientInstances("no instances of class " + std::to_string(n));
    out.push_back(assemble_episode(ImageId{n, inst[rng.index(inst.size())]}, pool, condition, classes, C, rng));
  }
  return out;
}

namespace detail {

struct IdLess {
  bool operator()(const ImageId& a, const ImageId& b) const {
    return a.numerosity != b.numerosity ? a.numerosity < b.numerosity : a.index < b.index;
  }
};

}  // namespace detail

/// Plays a fixed list of episodes with frozen agents.
inline Transcript play_episodes(const AgentPair& agents, const Dataset& ds, const std::vector<Episode>& episodes,
                                int epoch = 0, const std::string& phase = "eval") {
  const auto& cfg = agents.config();
  Transcript t;
  t.channel = cfg.channel;
  t.variable_length = cfg.variable_length;
  t.thickness = cfg.thickness;
  if (episodes.empty()) return t;

  // Encode every distinct image once.
  std::map<ImageId, std::size_t, detail::IdLess> slot;
  std::vector<const Raster*> canvases;
  const auto intern = [&](const ImageId& id) {
    if (slot.emplace(id, canvases.size()).second) canvases.push_back(&ds.image(id).canvas);
  };
  std::map<ImageId, std::size_t, detail::IdLess> sender_slot;
  std::vector<ImageId> senders;
  for (const auto& ep : episodes) {
    intern(ep.sender);
    for (const auto& c : ep.candidates) intern(c);
    if (sender_slot.emplace(ep.sender, senders.size()).second) senders.push_back(ep.sender);
  }
  const auto emb = agents.encode_batch(canvases);
  std::vector<EncoderOutput> sender_emb;
  for (const auto& s : senders) sender_emb.push_back(emb[slot.at(s)]);

  std::vector<Message> messages;
  std::vector<StrokeSet> sketches;
  std::vector<std::vector<float>> queries;
  if (cfg.channel == Channel::Discrete) {
    messages = agents.send_discrete_batch(sender_emb);
    queries = agents.discrete_queries(messages);
  } else {
    sketches = agents.send_sketch_batch(sender_emb);
    std::vector<Sketch> rendered;
    for (const auto& s : sketches) rendered.push_back(rasterize(s, cfg.canvas_side));
    queries = agents.sketch_queries(rendered);
  }

  std::vector<EncoderOutput> cands;
  for (const auto& ep : episodes) {
    const std::size_t s = sender_slot.at(ep.sender);
    cands.clear();
    for (const auto& c : ep.candidates) cands.push_back(emb[slot.at(c)]);
    const auto scores = agents.score(queries[s], cands);
    const auto pick = static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
    TranscriptRecord r;
    r.epoch = epoch;
    r.phase = phase;
    r.sender = ep.sender;
    r.target_n = ep.sender.numerosity;
    r.predicted_n = ep.candidates[pick].numerosity;
    r.correct = pick == ep.target_index;
    if (cfg.channel == Channel::Discrete) {
      r.tokens = messages[s].tokens;
      r.eff_len = messages[s].effective_len;
    } else {
      r.strokes = sketches[s].flat();
      r.eff_len = sketches[s].segments.size();
    }
    t.append(std::move(r));
  }
  return t;
}

inline Transcript evaluate(const AgentPair& agents, const Dataset& ds, const std::vector<int>& classes,
                           Condition condition, std::size_t C, std::size_t episodes, Rng& rng,
                           Split split = Split::Test, int epoch = 0, const std::string& phase = "eval") {
  const auto eps = sample_episodes(ds, condition, classes, C, episodes, rng, split);
  return play_episodes(agents, ds, eps, epoch, phase);
}

/// Mean effective length (discrete) or mean total stroke length in pixels
/// (sketch).
inline double mean_length(const Transcript& t, std::size_t canvas_side) {
  if (t.empty()) throw EmptySelection("mean length of an empty transcript");
  double s = 0.0;
  for (const auto& r : t.records) {
    s += t.channel == Channel::Discrete
             ? static_cast<double>(r.eff_len)
             : StrokeSet::from_flat(r.strokes, t.thickness).total_length() * static_cast<double>(canvas_side);
  }
  return s / static_cast<double>(t.size());
}

/// Codes for every record: message keys, or sketch clusters fitted on the
/// transcript itself with k = `clusters`.
inline std::vector<std::string> transcript_codes(const Transcript& t, std::size_t canvas_side, std::size_t clusters,
                                                 Rng& rng) {
  if (t.channel == Channel::Discrete) return code_messages(t);
  return code_sketches(t, canvas_side, clusters, rng).codes;
}

// ---------------------------------------------------------------------------
// Training

struct EpochMetrics {
  int epoch = 0;
  double accuracy = 0.0;
  double cond_entropy = 0.0;
  double mean_len = 0.0;
  double train_loss = 0.0;
};

struct TrainOptions {
  std::function<void(const EpochMetrics&)> on_epoch;
  std::optional<std::filesystem::path> checkpoint;  // rewritten after every good epoch
};

struct TrainResult {
  AgentPair agents;
  Transcript transcript;  // eval transcript of the final epoch
  std::vector<EpochMetrics> history;
};

namespace detail {

inline std::vector<std::vector<float>> snapshot(const diff::ParameterList<float>& params) {
  std::vector<std::vector<float>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

inline void restore(diff::ParameterList<float>& params, const std::vector<std::vector<float>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto v = params[i].tensor.mutable_values();
    std::copy(snap[i].begin(), snap[i].end(), v.begin());
  }
}

inline float annealed_tau(const GameConfig& cfg, std::size_t step, std::size_t total) {
  if (total <= 1) return static_cast<float>(cfg.tau_end);
  const double a = static_cast<double>(step) / static_cast<double>(total - 1);
  return static_cast<float>(cfg.tau_start + (cfg.tau_end - cfg.tau_start) * a);
}

/// Per-episode game loss for the discrete channel. With variable length the
/// loss is an expectation over where the message stops: position t ends the
/// message with probability p_t = P(terminator at t) * prod_{s<t} (1 - P(terminator
/// at s)), taken from the sender's softmax, and costs hinge_t + lambda * t.
/// Messages that never stop cost hinge_{L-1} + lambda * L. The forward
/// symbols fed to the receiver are still the straight-through samples.
inline Tensor discrete_loss(const DiscreteSender::Output& sent, const std::vector<Tensor>& queries,
                            const Tensor& candidates, const std::vector<std::size_t>& targets, std::size_t C,
                            const GameConfig& cfg, float scale, float lambda) {
  const std::size_t B = targets.size(), L = queries.size();
  const auto margin = static_cast<float>(cfg.margin);
  const auto hinge_at = [&](std::size_t t) {
    return diff::multiclass_hinge(diff::batched_scores(queries[t], candidates, C, scale), targets, margin);
  };
  if (!cfg.variable_length) return hinge_at(L - 1);
  const auto term = [&](const Tensor& p, std::size_t t, std::size_t len) {
    auto out = diff::mul(p, hinge_at(t));
    if (lambda > 0.0f) out = diff::add(out, diff::scale(p, lambda * static_cast<float>(len)));
    return out;
  };
  Tensor alive = Tensor::full({B}, 1.0f);
  Tensor loss = Tensor::zeros({B});
  for (std::size_t t = 0; t < L; ++t) {
    const auto stop = diff::column(diff::softmax(sent.logits[t]), static_cast<std::size_t>(kTerminator));
    loss = diff::add(loss, term(diff::mul(stop, alive), t, t));
    alive = diff::mul(alive, diff::affine_scalar(stop, -1.0f, 1.0f));
  }
  return diff::add(loss, term(alive, L - 1, L));
}

/// Cosine decay from lr to lr * floor over the run.
inline double scheduled_lr(const GameConfig& cfg, std::size_t step, std::size_t total) {
  const double a = total <= 1 ? 1.0 : static_cast<double>(step) / static_cast<double>(total - 1);
  return cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + std::cos(M_PI * a)));
}

/// Length coefficient ramped linearly over the first `length_warmup` share
/// of the steps, so the penalty cannot collapse messages before the
/// receiver has learned to read them.
inline float warmed_lambda(const GameConfig& cfg, std::size_t step, std::size_t total) {
  const double ramp = cfg.length_warmup * static_cast<double>(total);
  const double w = ramp <= 0.0 ? 1.0 : std::min(1.0, static_cast<double>(step) / ramp);
  return static_cast<float>(cfg.length_coef * w);
}

}  // namespace detail

/// Trains a fresh agent pair on the training split of `ds` and evaluates on
/// the held-out split after every epoch.
inline TrainResult train(const GameConfig& cfg, const Dataset& ds, const TrainOptions& opts = {}) {
  cfg.validate();
  const std::size_t side = ds.spec().canvas_side;
  const std::size_t C = cfg.candidates_for(cfg.classes);
  TrainResult res{AgentPair(cfg.agent_config(side), cfg.seed), {}, {}};
  auto& agents = res.agents;
  auto params = agents.parameters();
  diff::AdamOptions aopt;
  aopt.learning_rate = cfg.lr;
  aopt.clip_norm = cfg.grad_clip;
  diff::Adam<float> adam(params, aopt);

  Rng rng(derive_seed({cfg.seed, fnv1a("train")}));
  Rng eval_rng(derive_seed({cfg.seed, fnv1a("eval")}));
  const auto train_pool = split_pool(ds, cfg.classes, Split::Train);
  std::vector<ImageId> train_ids;
  for (int c : cfg.classes) {
    for (std::size_t i : train_pool.at(c)) train_ids.push_back({c, i});
  }
  if (train_ids.empty()) throw InsufficientInstances("empty training split");
  const auto eval_eps = sample_episodes(ds, cfg.condition, cfg.classes, C, cfg.eval_episodes, eval_rng);

  const std::size_t batches = (train_ids.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = batches * cfg.epochs;
  const float scale = agents.score_scale();
  const float thickness = agents.config().thickness;
  auto good = detail::snapshot(params);
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(train_ids.begin(), train_ids.end());
    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < train_ids.size(); b0 += cfg.batch_size, ++step) {
      const std::size_t B = std::min(cfg.batch_size, train_ids.size() - b0);
      // Batch pool: the senders plus a few random instances per class.
      InstancePool pool;
      for (std::size_t i = 0; i < B; ++i) pool[train_ids[b0 + i].numerosity].push_back(train_ids[b0 + i].index);
      for (int c : cfg.classes) {
        const auto& all = train_pool.at(c);
        auto& mine = pool[c];
        for (std::size_t k = 0; k < cfg.pool_extras && k < all.size(); ++k) mine.push_back(all[rng.index(all.size())]);
        std::sort(mine.begin(), mine.end());
        mine.erase(std::unique(mine.begin(), mine.end()), mine.end());
        // Diff episodes need a second instance of the sender's class.
        while (mine.size() < std::min<std::size_t>(2, all.size())) {
          const std::size_t i = all[rng.index(all.size())];
          if (mine.empty() || i != mine.front()) mine.insert(std::upper_bound(mine.begin(), mine.end(), i), i);
        }
      }
      std::map<ImageId, std::size_t, detail::IdLess> slot;
      std::vector<const Raster*> canvases;
      for (const auto& [c, idx] : pool) {
        for (std::size_t i : idx) {
          slot[{c, i}] = canvases.size();
          canvases.push_back(&ds.image({c, i}).canvas);
        }
      }
      std::vector<std::size_t> sender_rows, cand_rows, targets;
      for (std::size_t i = 0; i < B; ++i) {
        const auto ep = assemble_episode(train_ids[b0 + i], pool, cfg.condition, cfg.classes, C, rng);
        sender_rows.push_back(slot.at(ep.sender));
        for (const auto& c : ep.candidates) cand_rows.push_back(slot.at(c));
        targets.push_back(ep.target_index);
      }

      adam.set_learning_rate(detail::scheduled_lr(cfg, step, total_steps));
      Tensor loss;
      try {
        const auto emb = agents.encoder()(ink_batch(canvases));
        const auto sender_emb = diff::gather_rows(emb, sender_rows);
        const auto cand_emb = diff::gather_rows(emb, cand_rows);
        Tensor per_episode;
        if (cfg.channel == Channel::Discrete) {
          const auto sent =
              agents.discrete_sender()(sender_emb, Mode::Train, detail::annealed_tau(cfg, step, total_steps), rng);
          const auto queries = agents.discrete_receiver()(sent.symbols);
          per_episode = detail::discrete_loss(sent, queries, cand_emb, targets, C, cfg, scale,
                                              detail::warmed_lambda(cfg, step, total_steps));
        } else {
          const auto strokes = agents.sketch_sender()(sender_emb);
          const auto canvas = rasterize_strokes(strokes, side, thickness);
          const auto sketch_emb = agents.encoder()(diff::affine_scalar(canvas, -1.0f, 1.0f));
          const auto q = agents.sketch_receiver()(sketch_emb);
          per_episode = diff::multiclass_hinge(diff::batched_scores(q, cand_emb, C, scale), targets,
                                               static_cast<float>(cfg.margin));
        }
        loss = diff::mean(per_episode);
        if (!std::isfinite(loss.item())) throw NonFiniteValue("loss");
        adam.zero_grad();
        diff::backward(loss);
        adam.step();
        for (const auto& p : params) diff::detail::check_finite("adam", p.tensor.values());
      } catch (const NonFiniteValue& e) {
        detail::restore(params, good);
        throw DivergenceDetected("epoch " + std::to_string(epoch) + ": " + e.what() +
                                 "; parameters reset to the end of epoch " + std::to_string(epoch - 1));
      }
      loss_sum += loss.item() * static_cast<double>(B);
    }

    res.transcript = play_episodes(agents, ds, eval_eps, static_cast<int>(epoch));
    EpochMetrics m;
    m.epoch = static_cast<int>(epoch);
    m.accuracy = accuracy(res.transcript);
    Rng code_rng(derive_seed({cfg.seed, fnv1a("codes"), epoch}));
    m.cond_entropy = conditional_entropy(
        code_table(res.transcript, transcript_codes(res.transcript, side, cfg.cluster_count(), code_rng)));
    m.mean_len = mean_length(res.transcript, side);
    m.train_loss = loss_sum / static_cast<double>(train_ids.size());
    res.history.push_back(m);
    good = detail::snapshot(params);
    if (opts.checkpoint) {
      diff::save_checkpoint(*opts.checkpoint, params,
                           {{"epoch", epoch}, {"config", cfg.to_json()}, {"canvas_side", side}});
    }
    if (opts.on_epoch) opts.on_epoch(m);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Persistence

struct LoadedAgents {
  GameConfig config;
  std::size_t canvas_side = 0;
  AgentPair agents;
};

/// Rebuilds the agent pair saved by train() from its checkpoint file.
inline LoadedAgents load_agents(const std::filesystem::path& checkpoint) {
  const auto meta = diff::read_checkpoint_header(checkpoint).value("meta", nlohmann::json::object());
  if (!meta.contains("config") || !meta.contains("canvas_side")) {
    throw IoError(checkpoint.string() + " carries no game configuration");
  }
  const auto cfg = GameConfig::from_json(meta["config"]);
  const auto side = meta["canvas_side"].get<std::size_t>();
  LoadedAgents out{cfg, side, AgentPair(cfg.agent_config(side), cfg.seed)};
  auto params = out.agents.parameters();
  diff::load_checkpoint(checkpoint, params);
  return out;
}

inline std::string format_fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,accuracy,cond_entropy,mean_len\n";
  for (const auto& m : history) {
    out << m.epoch << ',' << format_fixed(m.accuracy) << ',' << format_fixed(m.cond_entropy) << ','
        << format_fixed(m.mean_len) << '\n';
  }
}

inline std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingMetrics("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<EpochMetrics> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochMetrics m;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &m.epoch, &m.accuracy, &m.cond_entropy, &m.mean_len) != 4) {
      throw MissingMetrics("malformed metrics row in " + path.string());
    }
    out.push_back(m);
  }
  return out;
}

/// Writes each sender's eval sketch as n{target}_e{episode}.png.
inline void dump_sketches(const std::filesystem::path& dir, const Transcript& t, std::size_t canvas_side) {
  if (t.channel != Channel::Sketch) throw WrongChannel("only sketch transcripts can be dumped");
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto& r = t.records[i];
    write_png(dir / ("n" + std::to_string(r.target_n) + "_e" + std::to_string(i) + ".png"),
              sketch_of(r, canvas_side, t.thickness).canvas);
  }
}

}  // namespace numgame
