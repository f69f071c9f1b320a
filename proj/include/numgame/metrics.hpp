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
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "numgame/agents.hpp"
#include "numgame/error.hpp"
#include "numgame/rng.hpp"
#include "numgame/stimuli.hpp"
#include "numgame/transcript.hpp"

namespace numgame {

/// Fraction of correct episodes, optionally restricted to some sender
/// numerosities.
inline double accuracy(const Transcript& t, const std::optional<std::set<int>>& filter = std::nullopt) {
  std::size_t total = 0, correct = 0;
  for (const auto& r : t.records) {
    if (filter && !filter->count(r.target_n)) continue;
    ++total;
    correct += r.correct;
  }
  if (total == 0) throw EmptySelection("no transcript records match the filter");
  return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Code tables and entropy

/// Joint counts over (numerosity, code) pairs. Codes remember the order in
/// which they were first seen.
class CodeTable {
 public:
  void add(int numerosity, const std::string& code, std::size_t count = 1) {
    if (count == 0) return;
    if (!code_index_.count(code)) {
      code_index_[code] = codes_.size();
      codes_.push_back(code);
    }
    counts_[{numerosity, code}] += count;
    numerosities_.insert(numerosity);
    total_ += count;
  }

  std::size_t count(int numerosity, const std::string& code) const {
    auto it = counts_.find({numerosity, code});
    return it == counts_.end() ? 0 : it->second;
  }

  std::size_t total() const { return total_; }
  const std::vector<std::string>& codes() const { return codes_; }
  std::vector<int> numerosities() const { return {numerosities_.begin(), numerosities_.end()}; }
  const std::map<std::pair<int, std::string>, std::size_t>& cells() const { return counts_; }

 private:
  std::map<std::pair<int, std::string>, std::size_t> counts_;
  std::map<std::string, std::size_t> code_index_;
  std::vector<std::string> codes_;
  std::set<int> numerosities_;
  std::size_t total_ = 0;
};

/// H(N | M) in bits, plug-in estimate; 0 log 0 = 0.
inline double conditional_entropy(const CodeTable& table) {
  if (table.total() == 0) throw EmptyTable("conditional entropy of an empty table");
  std::map<std::string, std::size_t> per_code;
  for (const auto& [cell, c] : table.cells()) per_code[cell.second] += c;
  const double total = static_cast<double>(table.total());
  double h = 0.0;
  for (const auto& [cell, c] : table.cells()) {
    if (c == 0) continue;
    const double joint = static_cast<double>(c) / total;
    const double cond = static_cast<double>(c) / static_cast<double>(per_code[cell.second]);
    h -= joint * std::log2(cond);
  }
  return h;
}

/// H(N) in bits.
inline double numerosity_entropy(const CodeTable& table) {
  if (table.total() == 0) throw EmptyTable("entropy of an empty table");
  std::map<int, std::size_t> per_n;
  for (const auto& [cell, c] : table.cells()) per_n[cell.first] += c;
  double h = 0.0;
  for (const auto& [n, c] : per_n) {
    const double p = static_cast<double>(c) / static_cast<double>(table.total());
    if (p > 0.0) h -= p * std::log2(p);
  }
  return h;
}

/// Canonical id of a message: its tokens up to the effective length,
/// comma-separated. The empty message is "<eos>".
inline std::string message_key(std::span<const int> tokens, bool variable_length) {
  const std::size_t len = effective_length(tokens, variable_length);
  if (len == 0) return "<eos>";
  std::string key;
  for (std::size_t i = 0; i < len; ++i) {
    if (i) key += ',';
    key += std::to_string(tokens[i]);
  }
  return key;
}

inline std::string message_key(const Message& m, bool variable_length) {
  return message_key(std::span<const int>(m.tokens), variable_length);
}

inline CodeTable code_table(const Transcript& t, const std::vector<std::string>& codes, bool correct_only = false) {
  if (codes.size() != t.records.size()) throw ShapeMismatch("one code per transcript record required");
  CodeTable table;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (correct_only && !t.records[i].correct) continue;
    table.add(t.records[i].target_n, codes[i]);
  }
  return table;
}

// ---------------------------------------------------------------------------
// Sketch clustering

inline constexpr std::size_t kSketchFeatureSide = 16;

inline std::vector<float> sketch_features(const Raster& canvas) { return downsample(canvas, kSketchFeatureSide); }

inline double squared_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

struct ClusterModel {
  std::size_t k = 0;
  std::vector<std::vector<float>> centroids;
  std::vector<std::size_t> assignment;
  double inertia = 0.0;

  /// Index of the nearest centroid; ties go to the lower index.
  std::size_t nearest(std::span<const float> x) const {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      const double d = squared_distance(x, centroids[c]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    return best;
  }
};

namespace detail {

inline ClusterModel lloyd(const std::vector<std::vector<float>>& pts, std::size_t k, Rng& rng, std::size_t max_iter) {
  const std::size_t n = pts.size(), dim = pts[0].size();
  ClusterModel m;
  m.k = k;
  // k-means++ seeding
  m.centroids.push_back(pts[rng.index(n)]);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  while (m.centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(pts[i], m.centroids.back()));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = rng.index(n);
    } else {
      double u = rng.uniform() * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        u -= d2[pick];
        if (u < 0.0) break;
      }
    }
    m.centroids.push_back(pts[pick]);
  }
  m.assignment.assign(n, std::numeric_limits<std::size_t>::max());
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = m.nearest(pts[i]);
      changed = changed || c != m.assignment[i];
      m.assignment[i] = c;
    }
    if (!changed) break;
    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++sizes[m.assignment[i]];
      for (std::size_t d = 0; d < dim; ++d) sums[m.assignment[i]][d] += pts[i][d];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] == 0) continue;  // empty cluster keeps its centroid
      for (std::size_t d = 0; d < dim; ++d) {
        m.centroids[c][d] = static_cast<float>(sums[c][d] / static_cast<double>(sizes[c]));
      }
    }
  }
  m.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) m.inertia += squared_distance(pts[i], m.centroids[m.assignment[i]]);
  return m;
}

}  // namespace detail

/// k-means with k-means++ seeding; keeps the restart with the lowest
/// within-cluster sum of squares.
inline ClusterModel kmeans(const std::vector<std::vector<float>>& points, std::size_t k, Rng& rng,
                           std::size_t restarts = 10, std::size_t max_iter = 100) {
  if (k == 0) throw TooFewSketches("k must be >= 1");
  if (points.size() < k) {
    throw TooFewSketches(std::to_string(points.size()) + " points for " + std::to_string(k) + " clusters");
  }
  ClusterModel best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < restarts; ++r) {
    auto m = detail::lloyd(points, k, rng, max_iter);
    if (m.inertia < best.inertia) best = std::move(m);
  }
  return best;
}

inline ClusterModel cluster_sketches(const std::vector<Sketch>& sketches, std::size_t k, Rng& rng) {
  std::vector<std::vector<float>> feats;
  feats.reserve(sketches.size());
  for (const auto& s : sketches) feats.push_back(sketch_features(s.canvas));
  return kmeans(feats, k, rng);
}

/// Mean silhouette of a clustering (Euclidean).
inline double silhouette(const std::vector<std::vector<float>>& pts, const std::vector<std::size_t>& assignment,
                         std::size_t k) {
  const std::size_t n = pts.size();
  if (k < 2 || n < 2) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> sum(k, 0.0);
    std::vector<std::size_t> cnt(k, 0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      sum[assignment[j]] += std::sqrt(squared_distance(pts[i], pts[j]));
      ++cnt[assignment[j]];
    }
    const std::size_t own = assignment[i];
    if (cnt[own] == 0) continue;  // singleton: s = 0
    const double a = sum[own] / static_cast<double>(cnt[own]);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      if (c != own && cnt[c] > 0) b = std::min(b, sum[c] / static_cast<double>(cnt[c]));
    }
    if (!std::isfinite(b)) continue;
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

/// k in [k_min, k_max] with the highest mean silhouette.
inline std::size_t select_k_by_silhouette(const std::vector<std::vector<float>>& pts, std::size_t k_min,
                                          std::size_t k_max, Rng& rng) {
  std::size_t best_k = std::max<std::size_t>(2, k_min);
  double best_s = -std::numeric_limits<double>::infinity();
  for (std::size_t k = std::max<std::size_t>(2, k_min); k <= std::min(k_max, pts.size()); ++k) {
    const auto m = kmeans(pts, k, rng);
    const double s = silhouette(pts, m.assignment, k);
    if (s > best_s) {
      best_s = s;
      best_k = k;
    }
  }
  return best_k;
}

/// Share of points whose cluster's majority label matches their own label.
inline double cluster_purity(const std::vector<std::size_t>& assignment, const std::vector<int>& labels) {
  if (assignment.size() != labels.size() || assignment.empty()) throw EmptySelection("purity needs labelled points");
  std::map<std::size_t, std::map<int, std::size_t>> votes;
  for (std::size_t i = 0; i < assignment.size(); ++i) ++votes[assignment[i]][labels[i]];
  std::size_t agree = 0;
  for (const auto& [c, v] : votes) {
    std::size_t best = 0;
    for (const auto& [l, n] : v) best = std::max(best, n);
    agree += best;
  }
  return static_cast<double>(agree) / static_cast<double>(assignment.size());
}

// ---------------------------------------------------------------------------
// Codes for whole transcripts

inline Sketch sketch_of(const TranscriptRecord& r, std::size_t side, float thickness) {
  return rasterize(StrokeSet::from_flat(r.strokes, thickness), side);
}

struct SketchCoding {
  ClusterModel model;
  std::vector<std::string> codes;
  std::vector<std::vector<float>> features;
};

/// Discretises sketch records: k-means on the records whose target lies in
/// `fit_classes` (all records when empty), then nearest-centroid codes
/// "c<id>" for every record.
inline SketchCoding code_sketches(const Transcript& t, std::size_t side, std::size_t k, Rng& rng,
                                  const std::set<int>& fit_classes = {}) {
  if (t.channel != Channel::Sketch) throw WrongChannel("sketch coding needs a sketch transcript");
  SketchCoding out;
  std::map<std::vector<float>, std::vector<float>> cache;
  for (const auto& r : t.records) {
    auto it = cache.find(r.strokes);
    if (it == cache.end()) it = cache.emplace(r.strokes, sketch_features(sketch_of(r, side, t.thickness).canvas)).first;
    out.features.push_back(it->second);
  }
  std::vector<std::vector<float>> fit;
  for (std::size_t i = 0; i < t.records.size(); ++i) {
    if (fit_classes.empty() || fit_classes.count(t.records[i].target_n)) fit.push_back(out.features[i]);
  }
  out.model = kmeans(fit, k, rng);
  for (const auto& f : out.features) out.codes.push_back("c" + std::to_string(out.model.nearest(f)));
  return out;
}

inline std::vector<std::string> code_messages(const Transcript& t) {
  if (t.channel != Channel::Discrete) throw WrongChannel("message coding needs a discrete transcript");
  std::vector<std::string> codes;
  codes.reserve(t.records.size());
  for (const auto& r : t.records) codes.push_back(message_key(std::span<const int>(r.tokens), t.variable_length));
  return codes;
}

// ---------------------------------------------------------------------------
// Mapping and dissimilarity matrices

struct MappingMatrix {
  std::vector<int> rows;             // numerosities, ascending
  std::vector<std::string> columns;  // codes, by first occurrence
  std::vector<std::vector<std::size_t>> counts;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& r : counts) n = std::accumulate(r.begin(), r.end(), n);
    return n;
  }
};

inline MappingMatrix mapping_matrix(const CodeTable& table) {
  if (table.total() == 0) throw EmptyTable("mapping matrix of an empty table");
  MappingMatrix m;
  m.rows = table.numerosities();
  m.columns = table.codes();
  for (int n : m.rows) {
    std::vector<std::size_t> row;
    for (const auto& c : m.columns) row.push_back(table.count(n, c));
    m.counts.push_back(std::move(row));
  }
  return m;
}

struct DissimilarityMatrix {
  std::vector<int> classes;
  std::vector<std::vector<double>> values;
};

/// Mean Euclidean distance between feature vectors of class i and class j;
/// the diagonal averages over distinct pairs within a class.
inline DissimilarityMatrix pairwise_dissimilarity(const std::map<int, std::vector<std::vector<float>>>& by_class,
                                                  const std::vector<int>& required = {}) {
  for (int c : required) {
    auto it = by_class.find(c);
    if (it == by_class.end() || it->second.empty()) throw MissingClass("no sketches for class " + std::to_string(c));
  }
  DissimilarityMatrix m;
  for (const auto& [c, v] : by_class) {
    if (v.empty()) throw MissingClass("no sketches for class " + std::to_string(c));
    m.classes.push_back(c);
  }
  const std::size_t K = m.classes.size();
  m.values.assign(K, std::vector<double>(K, 0.0));
  for (std::size_t i = 0; i < K; ++i) {
    const auto& a = by_class.at(m.classes[i]);
    for (std::size_t j = i; j < K; ++j) {
      const auto& b = by_class.at(m.classes[j]);
      double sum = 0.0;
      std::size_t pairs = 0;
      for (std::size_t x = 0; x < a.size(); ++x) {
        for (std::size_t y = (i == j ? x + 1 : 0); y < b.size(); ++y) {
          sum += std::sqrt(squared_distance(a[x], b[y]));
          ++pairs;
        }
      }
      m.values[i][j] = m.values[j][i] = pairs ? sum / static_cast<double>(pairs) : 0.0;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Span correlation

struct Correlation {
  double r = 0.0;
  bool degenerate = false;  // a variance was zero; r reported as 0
  std::size_t n = 0;
};

inline Correlation pearson(std::span<const double> x, std::span<const double> y) {
  Correlation c;
  c.n = x.size();
  if (x.size() != y.size() || x.size() < 2) {
    c.degenerate = true;
    return c;
  }
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  constexpr double kTiny = 1e-18;
  if (sxx <= kTiny || syy <= kTiny) {
    c.degenerate = true;
    return c;
  }
  c.r = sxy / std::sqrt(sxx * syy);
  return c;
}

/// Pearson correlation between the dot span of each sender image and the
/// bounding-box diagonal of the sketch drawn for it (both in pixels).
inline Correlation span_correlation(const Transcript& t, const Dataset& dataset) {
  if (t.channel != Channel::Sketch) throw WrongChannel("span correlation needs a sketch transcript");
  const double side = static_cast<double>(dataset.spec().canvas_side);
  std::vector<double> dots, strokes;
  for (const auto& r : t.records) {
    dots.push_back(dot_span(dataset.image(r.sender)));
    strokes.push_back(StrokeSet::from_flat(r.strokes, t.thickness).span() * side);
  }
  return pearson(dots, strokes);
}

// ---------------------------------------------------------------------------
// Generalisation

struct CodedTranscript {
  Transcript transcript;
  std::vector<std::string> codes;  // one per record
};

struct GeneralisationEntry {
  std::string test_set;
  std::vector<int> novel_classes;
  double accuracy = 0.0;
  double in_distribution_accuracy = 0.0;
  double novel_accuracy = 0.0;
  std::map<std::string, double> novel_code_distribution;
  std::string ceiling_code;       // modal code of the highest trained class
  double ceiling_reuse = 0.0;     // share of novel episodes using ceiling_code
  bool ceiling_reuse_flag = false;
  double conditional_entropy = 0.0;
};

struct GeneralisationReport {
  std::vector<int> train_classes;
  std::vector<GeneralisationEntry> entries;
};

inline std::string modal_code(const CodedTranscript& ct, int numerosity) {
  std::map<std::string, std::size_t> freq;
  for (std::size_t i = 0; i < ct.codes.size(); ++i) {
    if (ct.transcript.records[i].target_n == numerosity) ++freq[ct.codes[i]];
  }
  std::string best;
  std::size_t best_n = 0;
  for (const auto& [code, n] : freq) {
    if (n > best_n) {
      best_n = n;
      best = code;
    }
  }
  return best;
}

/// Per test set: accuracy split into trained vs novel numerosities, where
/// novel-class codes land, and whether they reuse the code of the highest
/// trained numerosity in more than half of the episodes.
inline GeneralisationReport generalisation_report(const std::vector<int>& train_classes,
                                                  const std::map<std::string, CodedTranscript>& test_sets,
                                                  const std::vector<std::string>& required = {}) {
  for (const auto& name : required) {
    if (!test_sets.count(name)) throw MissingTranscript("no transcript for test set '" + name + "'");
  }
  if (train_classes.empty()) throw EmptySelection("no training classes");
  const std::set<int> trained(train_classes.begin(), train_classes.end());
  const int ceiling = *trained.rbegin();
  GeneralisationReport rep;
  rep.train_classes = train_classes;
  for (const auto& [name, ct] : test_sets) {
    if (ct.transcript.empty()) throw MissingTranscript("empty transcript for test set '" + name + "'");
    GeneralisationEntry e;
    e.test_set = name;
    std::set<int> novel;
    for (const auto& r : ct.transcript.records) {
      if (!trained.count(r.target_n)) novel.insert(r.target_n);
    }
    e.novel_classes.assign(novel.begin(), novel.end());
    e.accuracy = accuracy(ct.transcript);
    e.in_distribution_accuracy = accuracy(ct.transcript, trained);
    e.ceiling_code = modal_code(ct, ceiling);
    if (!novel.empty()) {
      e.novel_accuracy = accuracy(ct.transcript, novel);
      std::size_t n_novel = 0, reuse = 0;
      for (std::size_t i = 0; i < ct.codes.size(); ++i) {
        if (!novel.count(ct.transcript.records[i].target_n)) continue;
        ++n_novel;
        e.novel_code_distribution[ct.codes[i]] += 1.0;
        reuse += ct.codes[i] == e.ceiling_code;
      }
      for (auto& [code, v] : e.novel_code_distribution) v /= static_cast<double>(n_novel);
      e.ceiling_reuse = static_cast<double>(reuse) / static_cast<double>(n_novel);
      e.ceiling_reuse_flag = e.ceiling_reuse > 0.5;
    }
    e.conditional_entropy = conditional_entropy(code_table(ct.transcript, ct.codes));
    rep.entries.push_back(std::move(e));
  }
  return rep;
}

}  // namespace numgame
