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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "numgame/diff/layers.hpp"
#include "numgame/error.hpp"
#include "numgame/raster.hpp"
#include "numgame/rng.hpp"

namespace numgame {

using diff::Tensor;

enum class Channel { Discrete, Sketch };
enum class Mode { Train, Eval };

inline std::string to_string(Channel c) { return c == Channel::Discrete ? "discrete" : "sketch"; }

inline Channel parse_channel(const std::string& s) {
  if (s == "discrete") return Channel::Discrete;
  if (s == "sketch") return Channel::Sketch;
  throw ConfigError("unknown channel '" + s + "'");
}

/// Token 0 terminates a message when variable-length messages are enabled.
inline constexpr int kTerminator = 0;

struct Message {
  std::vector<int> tokens;
  std::size_t max_len = 0;
  std::size_t effective_len = 0;
  std::vector<std::vector<float>> logits;  // per position; filled in train mode
};

/// Position of the first terminator, or the full length if there is none
/// (or if terminators are disabled).
inline std::size_t effective_length(std::span<const int> tokens, bool variable_length) {
  if (variable_length) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] == kTerminator) return i;
    }
  }
  return tokens.size();
}

struct Stroke {
  float x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

/// Straight segments in normalised canvas coordinates [0,1]^2. `thickness`
/// is the Gaussian falloff width in the same units.
struct StrokeSet {
  std::vector<Stroke> segments;
  float thickness = 1.5f / 64.0f;

  std::vector<float> flat() const {
    std::vector<float> v;
    for (const auto& s : segments) v.insert(v.end(), {s.x0, s.y0, s.x1, s.y1});
    return v;
  }

  static StrokeSet from_flat(std::span<const float> v, float thickness) {
    StrokeSet s;
    s.thickness = thickness;
    for (std::size_t i = 0; i + 3 < v.size(); i += 4) {
      s.segments.push_back({std::clamp(v[i], 0.0f, 1.0f), std::clamp(v[i + 1], 0.0f, 1.0f),
                            std::clamp(v[i + 2], 0.0f, 1.0f), std::clamp(v[i + 3], 0.0f, 1.0f)});
    }
    return s;
  }

  /// Diagonal of the segments' bounding box, normalised units.
  double span() const {
    if (segments.empty()) return 0.0;
    float x0 = 1, y0 = 1, x1 = 0, y1 = 0;
    for (const auto& s : segments) {
      x0 = std::min({x0, s.x0, s.x1});
      y0 = std::min({y0, s.y0, s.y1});
      x1 = std::max({x1, s.x0, s.x1});
      y1 = std::max({y1, s.y0, s.y1});
    }
    return std::hypot(static_cast<double>(x1 - x0), static_cast<double>(y1 - y0));
  }

  double total_length() const {
    double len = 0.0;
    for (const auto& s : segments) len += std::hypot(static_cast<double>(s.x1 - s.x0), static_cast<double>(s.y1 - s.y0));
    return len;
  }
};

struct Sketch {
  Raster canvas;
  StrokeSet source;
};

using EncoderOutput = std::vector<float>;

// ---------------------------------------------------------------------------
// Differentiable line rasteriser

namespace detail {

template <typename T>
struct SegmentHit {
  T dist2;
  T t;  // closest-point parameter along the segment, in [0,1]
};

template <typename T>
SegmentHit<T> closest_on_segment(T px, T py, T ax, T ay, T bx, T by) {
  const T ex = bx - ax, ey = by - ay;
  const T len2 = ex * ex + ey * ey;
  T t = T(0);
  if (len2 > T(1e-12)) t = std::clamp(((px - ax) * ex + (py - ay) * ey) / len2, T(0), T(1));
  const T qx = ax + t * ex - px, qy = ay + t * ey - py;
  return {qx * qx + qy * qy, t};
}

}  // namespace detail

/// Renders strokes [B, 4K] (x0, y0, x1, y1 per segment, normalised) into
/// canvases [B, 1, side, side]:
///   I(p) = 1 - max_k exp(-dist(p, segment_k)^2 / (2 sigma^2)).
/// Pixel p sits at ((col + 0.5) / side, (row + 0.5) / side). Coordinates are
/// clamped to [0,1]; the clamp passes no gradient outside the box.
template <typename T>
diff::BasicTensor<T> rasterize_strokes(const diff::BasicTensor<T>& strokes, std::size_t side, T sigma) {
  if (strokes.rank() != 2 || strokes.dim(1) % 4 != 0 || strokes.dim(1) == 0) {
    throw ShapeMismatch("rasterize_strokes expects [B, 4K], got " + diff::to_string(strokes.shape()));
  }
  const std::size_t B = strokes.dim(0), K = strokes.dim(1) / 4, P = side * side;
  const T inv2s2 = T(1) / (T(2) * sigma * sigma);
  diff::Buffer<T> coords(strokes.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = std::clamp(strokes[i], T(0), T(1));

  diff::Buffer<T> out(B * P);
  std::vector<std::uint16_t> winner(B * P);
  for (std::size_t b = 0; b < B; ++b) {
    const T* c = coords.data() + b * 4 * K;
    for (std::size_t row = 0; row < side; ++row) {
      const T py = (static_cast<T>(row) + T(0.5)) / static_cast<T>(side);
      for (std::size_t col = 0; col < side; ++col) {
        const T px = (static_cast<T>(col) + T(0.5)) / static_cast<T>(side);
        T best = std::numeric_limits<T>::max();
        std::uint16_t arg = 0;
        for (std::size_t k = 0; k < K; ++k) {
          const auto hit = detail::closest_on_segment(px, py, c[4 * k], c[4 * k + 1], c[4 * k + 2], c[4 * k + 3]);
          if (hit.dist2 < best) {
            best = hit.dist2;
            arg = static_cast<std::uint16_t>(k);
          }
        }
        out[b * P + row * side + col] = T(1) - std::exp(-best * inv2s2);
        winner[b * P + row * side + col] = arg;
      }
    }
  }
  return diff::make_result<T>(
      "rasterize_strokes", diff::Shape{B, 1, side, side}, std::move(out), {strokes},
      [B, K, P, side, inv2s2, coords = std::move(coords), winner = std::move(winner)](diff::Node<T>& self) {
        T* g = diff::detail::parent_grad(self, 0);
        if (!g) return;
        const auto& raw = self.parents[0]->value;
        diff::Buffer<T> acc(4 * K);
        for (std::size_t b = 0; b < B; ++b) {
          std::fill(acc.begin(), acc.end(), T(0));
          const T* c = coords.data() + b * 4 * K;
          for (std::size_t row = 0; row < side; ++row) {
            const T py = (static_cast<T>(row) + T(0.5)) / static_cast<T>(side);
            for (std::size_t col = 0; col < side; ++col) {
              const std::size_t p = b * P + row * side + col;
              const T go = self.grad[p];
              if (go == T(0)) continue;
              const T px = (static_cast<T>(col) + T(0.5)) / static_cast<T>(side);
              const std::size_t k = winner[p];
              const T ax = c[4 * k], ay = c[4 * k + 1], bx = c[4 * k + 2], by = c[4 * k + 3];
              const auto hit = detail::closest_on_segment(px, py, ax, ay, bx, by);
              // dI/d(dist2) = exp(-dist2 * inv2s2) * inv2s2
              const T w = go * std::exp(-hit.dist2 * inv2s2) * inv2s2;
              // dist2 = |q - p|^2 with q = a + t (b - a); t is optimal so only
              // the explicit dependence on a and b remains.
              const T qx = ax + hit.t * (bx - ax) - px, qy = ay + hit.t * (by - ay) - py;
              acc[4 * k] += w * T(2) * qx * (T(1) - hit.t);
              acc[4 * k + 1] += w * T(2) * qy * (T(1) - hit.t);
              acc[4 * k + 2] += w * T(2) * qx * hit.t;
              acc[4 * k + 3] += w * T(2) * qy * hit.t;
            }
          }
          for (std::size_t i = 0; i < 4 * K; ++i) {
            const T v = raw[b * 4 * K + i];
            if (v > T(0) && v < T(1)) g[b * 4 * K + i] += acc[i];
          }
        }
      });
}

/// Eval-mode rendering of a single StrokeSet.
inline Sketch rasterize(const StrokeSet& s, std::size_t side) {
  if (s.segments.empty()) throw ShapeMismatch("stroke set has no segments");
  diff::NoGradGuard no_grad;
  const auto flat = s.flat();
  auto t = rasterize_strokes(Tensor::from({1, flat.size()}, flat), side, s.thickness);
  Sketch out;
  out.source = s;
  out.canvas.side = side;
  out.canvas.pixels.assign(t.values().begin(), t.values().end());
  return out;
}

// ---------------------------------------------------------------------------
// Agents

struct AgentConfig {
  Channel channel = Channel::Discrete;
  std::size_t canvas_side = 64;
  std::size_t embed_dim = 64;
  // discrete channel
  std::size_t vocab_size = 3;
  std::size_t max_len = 5;
  bool variable_length = true;
  float terminator_bias = 0.0f;  // initial head bias of the terminator logit
  std::size_t hidden = 64;
  std::size_t token_embed = 32;
  // sketch channel
  std::size_t strokes = 5;
  float thickness = 1.5f / 64.0f;
  std::size_t sketch_hidden = 128;
};

/// Ink tensor [N, 1, S, S] (1 = black) from canvases (0 = black).
inline Tensor ink_batch(std::span<const Raster* const> canvases) {
  if (canvases.empty()) throw ShapeMismatch("empty image batch");
  const std::size_t s = canvases[0]->side;
  std::vector<float> v(canvases.size() * s * s);
  for (std::size_t i = 0; i < canvases.size(); ++i) {
    if (canvases[i]->side != s) throw ShapeMismatch("mixed canvas sizes in batch");
    for (std::size_t p = 0; p < s * s; ++p) v[i * s * s + p] = 1.0f - canvases[i]->pixels[p];
  }
  return Tensor::from({canvases.size(), 1, s, s}, std::move(v));
}

/// Three conv blocks (16/32/64 channels, 3x3, 2x2 max pool, ReLU), global
/// average pooling, a hidden ReLU layer and an affine map to the embedding.
/// One instance serves every image the agents look at: sender inputs,
/// receiver candidates, and rendered sketches.
class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(std::size_t canvas_side, std::size_t embed_dim, Rng& rng)
      : side_(canvas_side),
        conv1_(1, 16, 3, rng),
        conv2_(16, 32, 3, rng),
        conv3_(32, 64, 3, rng),
        hidden_(64, 128, rng),
        fc_(128, embed_dim, rng) {
    if (canvas_side % 8 != 0) throw ShapeMismatch("canvas side must be divisible by 8");
  }

  /// ink [N, 1, S, S] -> [N, d]
  Tensor operator()(const Tensor& ink) const {
    if (ink.rank() != 4 || ink.dim(1) != 1 || ink.dim(2) != side_ || ink.dim(3) != side_) {
      throw ShapeMismatch("encoder expects [N,1," + std::to_string(side_) + "," + std::to_string(side_) +
                          "], got " + diff::to_string(ink.shape()));
    }
    // relu and max-pool commute; pooling first touches 4x fewer values.
    auto h = diff::relu(diff::max_pool2d(conv1_(ink)));
    h = diff::relu(diff::max_pool2d(conv2_(h)));
    h = diff::relu(diff::max_pool2d(conv3_(h)));
    // Global average pooling: per-channel mean over the whole map.
    h = diff::avg_pool2d(h, side_ / 8);
    const std::size_t n = h.dim(0);
    return fc_(diff::relu(hidden_(diff::reshape(h, {n, h.size() / n}))));
  }

  std::size_t canvas_side() const { return side_; }
  std::size_t embed_dim() const { return fc_.out_features(); }

  void collect(diff::ParameterList<float>& out, const std::string& prefix) const {
    conv1_.collect(out, prefix + ".conv1");
    conv2_.collect(out, prefix + ".conv2");
    conv3_.collect(out, prefix + ".conv3");
    hidden_.collect(out, prefix + ".hidden");
    fc_.collect(out, prefix + ".fc");
  }

 private:
  std::size_t side_ = 0;
  diff::Conv2d<float> conv1_, conv2_, conv3_;
  diff::Affine<float> hidden_;
  diff::Affine<float> fc_;
};

/// Recurrent token sender. The image embedding initialises the hidden state;
/// each emitted symbol is fed back as the next input.
class DiscreteSender {
 public:
  struct Output {
    std::vector<Tensor> symbols;  // per position, [B, V] one-hot
    std::vector<Tensor> logits;   // per position, [B, V]
  };

  DiscreteSender() = default;
  DiscreteSender(const AgentConfig& cfg, Rng& rng)
      : vocab_(cfg.vocab_size),
        max_len_(cfg.max_len),
        init_(cfg.embed_dim, cfg.hidden, rng),
        start_(diff::uniform_parameter<float>({1, cfg.token_embed}, 0.1f, rng)),
        embedding_(diff::uniform_parameter<float>({cfg.vocab_size, cfg.token_embed}, 0.1f, rng)),
        cell_(cfg.token_embed, cfg.hidden, rng),
        head_(cfg.hidden, cfg.vocab_size, rng) {
    if (cfg.variable_length) {
      auto bias = head_.bias();
      bias.mutable_values()[kTerminator] = cfg.terminator_bias;
    }
  }

  Output operator()(const Tensor& embedding, Mode mode, float tau, Rng& rng) const {
    const std::size_t B = embedding.dim(0);
    diff::LstmState<float> state{diff::tanh(init_(embedding)),
                                 Tensor::zeros({B, cell_.hidden_size()})};
    Tensor input = diff::gather_rows(start_, std::vector<std::size_t>(B, 0));
    Output out;
    for (std::size_t t = 0; t < max_len_; ++t) {
      state = cell_(input, state);
      auto logits = head_(state.h);
      auto symbol = mode == Mode::Train ? diff::gumbel_straight_through(logits, tau, rng)
                                        : diff::argmax_one_hot(logits);
      out.logits.push_back(logits);
      out.symbols.push_back(symbol);
      if (t + 1 < max_len_) input = diff::matmul(symbol, embedding_);
    }
    return out;
  }

  std::size_t vocab_size() const { return vocab_; }
  std::size_t max_len() const { return max_len_; }

  void collect(diff::ParameterList<float>& out, const std::string& prefix) const {
    init_.collect(out, prefix + ".init");
    out.push_back({prefix + ".start", start_});
    out.push_back({prefix + ".embedding", embedding_});
    cell_.collect(out, prefix + ".cell");
    head_.collect(out, prefix + ".head");
  }

 private:
  std::size_t vocab_ = 0;
  std::size_t max_len_ = 0;
  diff::Affine<float> init_;
  Tensor start_;
  Tensor embedding_;
  diff::LstmCell<float> cell_;
  diff::Affine<float> head_;
};

/// Recurrent message reader. Returns one query vector per position: the
/// query after reading symbol t is the message representation when the
/// message ends at t.
class DiscreteReceiver {
 public:
  DiscreteReceiver() = default;
  DiscreteReceiver(const AgentConfig& cfg, Rng& rng)
      : embedding_(diff::uniform_parameter<float>({cfg.vocab_size, cfg.token_embed}, 0.1f, rng)),
        cell_(cfg.token_embed, cfg.hidden, rng),
        query_(cfg.hidden, cfg.embed_dim, rng) {}

  std::vector<Tensor> operator()(const std::vector<Tensor>& symbols) const {
    if (symbols.empty()) throw ShapeMismatch("empty message");
    auto state = cell_.zero_state(symbols[0].dim(0));
    std::vector<Tensor> queries;
    for (const auto& s : symbols) {
      state = cell_(diff::matmul(s, embedding_), state);
      queries.push_back(query_(state.h));
    }
    return queries;
  }

  void collect(diff::ParameterList<float>& out, const std::string& prefix) const {
    out.push_back({prefix + ".embedding", embedding_});
    cell_.collect(out, prefix + ".cell");
    query_.collect(out, prefix + ".query");
  }

 private:
  Tensor embedding_;
  diff::LstmCell<float> cell_;
  diff::Affine<float> query_;
};

/// Maps an embedding to K segments via a two-layer perceptron with sigmoid
/// outputs, so every coordinate lies in [0,1].
class SketchSender {
 public:
  SketchSender() = default;
  SketchSender(const AgentConfig& cfg, Rng& rng)
      : strokes_(cfg.strokes), hidden_(cfg.embed_dim, cfg.sketch_hidden, rng), head_(cfg.sketch_hidden, 4 * cfg.strokes, rng) {}

  Tensor operator()(const Tensor& embedding) const { return diff::sigmoid(head_(diff::relu(hidden_(embedding)))); }

  std::size_t strokes() const { return strokes_; }

  void collect(diff::ParameterList<float>& out, const std::string& prefix) const {
    hidden_.collect(out, prefix + ".hidden");
    head_.collect(out, prefix + ".head");
  }

 private:
  std::size_t strokes_ = 0;
  diff::Affine<float> hidden_;
  diff::Affine<float> head_;
};

/// Projects the shared-encoder embedding of a received sketch into the
/// space it is compared in.
class SketchReceiver {
 public:
  SketchReceiver() = default;
  SketchReceiver(const AgentConfig& cfg, Rng& rng) : query_(cfg.embed_dim, cfg.embed_dim, rng) {}

  Tensor operator()(const Tensor& sketch_embedding) const { return query_(sketch_embedding); }

  void collect(diff::ParameterList<float>& out, const std::string& prefix) const { query_.collect(out, prefix + ".query"); }

 private:
  diff::Affine<float> query_;
};

/// Sender and receiver for one channel plus the encoder they share.
class AgentPair {
 public:
  AgentPair(const AgentConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(derive_seed({seed, fnv1a("agents")}));
    encoder_ = VisionEncoder(cfg.canvas_side, cfg.embed_dim, rng);
    if (cfg.channel == Channel::Discrete) {
      if (cfg.vocab_size < 2) throw ConfigError("vocabulary needs at least 2 symbols");
      if (cfg.max_len < 1) throw ConfigError("max_len must be >= 1");
      discrete_sender_ = DiscreteSender(cfg, rng);
      discrete_receiver_ = DiscreteReceiver(cfg, rng);
    } else {
      if (cfg.strokes < 1) throw ConfigError("need at least one stroke");
      sketch_sender_ = SketchSender(cfg, rng);
      sketch_receiver_ = SketchReceiver(cfg, rng);
    }
  }

  const AgentConfig& config() const { return cfg_; }
  const VisionEncoder& encoder() const { return encoder_; }
  const DiscreteSender& discrete_sender() const { return *discrete_sender_; }
  const DiscreteReceiver& discrete_receiver() const { return *discrete_receiver_; }
  const SketchSender& sketch_sender() const { return *sketch_sender_; }
  const SketchReceiver& sketch_receiver() const { return *sketch_receiver_; }

  float score_scale() const { return 1.0f / std::sqrt(static_cast<float>(cfg_.embed_dim)); }

  /// Every trainable tensor, encoder first. The encoder appears once.
  diff::ParameterList<float> parameters() const {
    diff::ParameterList<float> out;
    encoder_.collect(out, "encoder");
    if (discrete_sender_) discrete_sender_->collect(out, "sender");
    if (discrete_receiver_) discrete_receiver_->collect(out, "receiver");
    if (sketch_sender_) sketch_sender_->collect(out, "sender");
    if (sketch_receiver_) sketch_receiver_->collect(out, "receiver");
    return out;
  }

  // -- batch entry points (eval mode, no graph) ----------------------------

  std::vector<EncoderOutput> encode_batch(std::span<const Raster* const> canvases) const {
    diff::NoGradGuard no_grad;
    for (const auto* c : canvases) {
      if (c->side != cfg_.canvas_side) throw ShapeMismatch("canvas side " + std::to_string(c->side));
    }
    std::vector<EncoderOutput> out;
    constexpr std::size_t kChunk = 64;
    for (std::size_t i = 0; i < canvases.size(); i += kChunk) {
      const auto part = canvases.subspan(i, std::min(kChunk, canvases.size() - i));
      auto e = encoder_(ink_batch(part));
      const std::size_t d = e.dim(1);
      for (std::size_t r = 0; r < part.size(); ++r) {
        out.emplace_back(e.values().begin() + static_cast<std::ptrdiff_t>(r * d),
                         e.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
      }
    }
    return out;
  }

  std::vector<Message> send_discrete_batch(std::span<const EncoderOutput> es) const {
    diff::NoGradGuard no_grad;
    Rng unused(0);
    auto out = (*discrete_sender_)(stack(es), Mode::Eval, 1.0f, unused);
    std::vector<Message> msgs(es.size());
    for (std::size_t b = 0; b < es.size(); ++b) {
      auto& m = msgs[b];
      m.max_len = cfg_.max_len;
      for (const auto& sym : out.symbols) m.tokens.push_back(argmax_row(sym, b));
      m.effective_len = effective_length(m.tokens, cfg_.variable_length);
    }
    return msgs;
  }

  /// Receiver query vectors for each message (position = end of message).
  std::vector<std::vector<float>> discrete_queries(std::span<const Message> msgs) const {
    diff::NoGradGuard no_grad;
    const std::size_t B = msgs.size(), V = cfg_.vocab_size, L = cfg_.max_len;
    std::vector<Tensor> symbols;
    for (std::size_t t = 0; t < L; ++t) {
      std::vector<float> v(B * V, 0.0f);
      for (std::size_t b = 0; b < B; ++b) {
        const int tok = msgs[b].tokens.at(t);
        if (tok < 0 || static_cast<std::size_t>(tok) >= V) throw IndexOutOfRange("token " + std::to_string(tok));
        v[b * V + static_cast<std::size_t>(tok)] = 1.0f;
      }
      symbols.push_back(Tensor::from({B, V}, std::move(v)));
    }
    auto queries = (*discrete_receiver_)(symbols);
    std::vector<std::vector<float>> out(B);
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t pos = std::min(msgs[b].effective_len, L - 1);
      out[b] = row(queries[pos], b);
    }
    return out;
  }

  std::vector<StrokeSet> send_sketch_batch(std::span<const EncoderOutput> es) const {
    diff::NoGradGuard no_grad;
    auto s = (*sketch_sender_)(stack(es));
    std::vector<StrokeSet> out;
    for (std::size_t b = 0; b < es.size(); ++b) out.push_back(StrokeSet::from_flat(row(s, b), cfg_.thickness));
    return out;
  }

  std::vector<std::vector<float>> sketch_queries(std::span<const Sketch> sketches) const {
    diff::NoGradGuard no_grad;
    std::vector<const Raster*> canvases;
    for (const auto& s : sketches) canvases.push_back(&s.canvas);
    const auto emb = encode_batch(canvases);
    auto q = (*sketch_receiver_)(stack(emb));
    std::vector<std::vector<float>> out;
    for (std::size_t b = 0; b < sketches.size(); ++b) out.push_back(row(q, b));
    return out;
  }

  std::vector<float> score(std::span<const float> query, std::span<const EncoderOutput> candidates) const {
    if (candidates.empty()) throw EmptyCandidates("no candidates to score");
    std::vector<float> s;
    for (const auto& c : candidates) {
      if (c.size() != query.size()) throw ShapeMismatch("candidate embedding width");
      float acc = 0.0f;
      for (std::size_t k = 0; k < c.size(); ++k) acc += query[k] * c[k];
      s.push_back(acc * score_scale());
    }
    return s;
  }

  // -- single-item operations ------------------------------------------------

  EncoderOutput encode(const Raster& canvas) const {
    const Raster* p = &canvas;
    return encode_batch(std::span<const Raster* const>(&p, 1)).front();
  }

  Message send_discrete(const EncoderOutput& e, Mode mode, Rng& rng, float tau = 1.0f) const {
    require(Channel::Discrete);
    if (mode == Mode::Eval) return send_discrete_batch(std::span<const EncoderOutput>(&e, 1)).front();
    diff::NoGradGuard no_grad;
    auto out = (*discrete_sender_)(stack(std::span<const EncoderOutput>(&e, 1)), Mode::Train, tau, rng);
    Message m;
    m.max_len = cfg_.max_len;
    for (std::size_t t = 0; t < out.symbols.size(); ++t) {
      m.tokens.push_back(argmax_row(out.symbols[t], 0));
      m.logits.push_back(row(out.logits[t], 0));
    }
    m.effective_len = effective_length(m.tokens, cfg_.variable_length);
    return m;
  }

  std::vector<float> receive_discrete(const Message& m, std::span<const EncoderOutput> candidates) const {
    require(Channel::Discrete);
    if (candidates.empty()) throw EmptyCandidates("receiver needs candidates");
    if (m.tokens.size() != cfg_.max_len) throw ShapeMismatch("message length " + std::to_string(m.tokens.size()));
    Message norm = m;
    norm.effective_len = effective_length(m.tokens, cfg_.variable_length);
    const auto q = discrete_queries(std::span<const Message>(&norm, 1)).front();
    return score(q, candidates);
  }

  StrokeSet send_sketch(const EncoderOutput& e) const {
    require(Channel::Sketch);
    return send_sketch_batch(std::span<const EncoderOutput>(&e, 1)).front();
  }

  std::vector<float> receive_sketch(const Sketch& sk, std::span<const EncoderOutput> candidates) const {
    require(Channel::Sketch);
    if (candidates.empty()) throw EmptyCandidates("receiver needs candidates");
    if (sk.canvas.side != cfg_.canvas_side) throw ShapeMismatch("sketch side " + std::to_string(sk.canvas.side));
    const auto q = sketch_queries(std::span<const Sketch>(&sk, 1)).front();
    return score(q, candidates);
  }

  static Tensor stack(std::span<const EncoderOutput> es) {
    if (es.empty()) throw ShapeMismatch("empty embedding batch");
    const std::size_t d = es[0].size();
    std::vector<float> v;
    v.reserve(es.size() * d);
    for (const auto& e : es) {
      if (e.size() != d) throw ShapeMismatch("ragged embedding batch");
      v.insert(v.end(), e.begin(), e.end());
    }
    return Tensor::from({es.size(), d}, std::move(v));
  }

 private:
  void require(Channel c) const {
    if (cfg_.channel != c) throw WrongChannel("agents were built for the " + to_string(cfg_.channel) + " channel");
  }

  static std::vector<float> row(const Tensor& t, std::size_t r) {
    const std::size_t w = t.dim(1);
    return {t.values().begin() + static_cast<std::ptrdiff_t>(r * w),
            t.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * w)};
  }

  static int argmax_row(const Tensor& t, std::size_t r) {
    const auto v = row(t, r);
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
  }

  AgentConfig cfg_;
  VisionEncoder encoder_;
  std::optional<DiscreteSender> discrete_sender_;
  std::optional<DiscreteReceiver> discrete_receiver_;
  std::optional<SketchSender> sketch_sender_;
  std::optional<SketchReceiver> sketch_receiver_;
};

}  // namespace numgame
