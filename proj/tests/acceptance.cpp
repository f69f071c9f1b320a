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

// Acceptance run: one PASS/FAIL line per criterion. Usage:
//   acceptance --work DIR [--only 1,4,10]

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/imgproc.hpp>

#include "numgame/diff/gradcheck.hpp"
#include "numgame/diff/layers.hpp"
#include "numgame/diff/ops.hpp"
#include "numgame/experiment.hpp"
#include "numgame/platform.hpp"

namespace fs = std::filesystem;
using namespace numgame;
using D = diff::BasicTensor<double>;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 3) { return format_fixed(v, digits); }

fs::path g_work;

ExperimentSpec preset_spec(const std::string& preset, const std::string& dir) {
  ExperimentSpec spec;
  spec.preset = preset;
  spec.out = g_work / dir;
  spec.data_dir = g_work / "datasets";
  return spec;
}

void progress(const std::string& s) { std::cerr << "  " << s << '\n'; }

const nlohmann::json& per_seed(const nlohmann::json& summary, const std::string& cell, std::uint64_t seed) {
  return summary.at("cells").at(cell).at("per_seed").at(std::to_string(seed));
}

// -- 1 ---------------------------------------------------------------------

Outcome stimuli_invariants() {
  const auto t0 = Clock::now();
  Rng rng(derive_seed({2026, fnv1a("acceptance-stimuli")}));
  std::size_t bad_fraction = 0, bad_components = 0;
  std::vector<double> ns, fractions;
  for (int k = 0; k < 1000; ++k) {
    const int n = 1 + k % 5;
    const auto img = generate_dot_image(n, 64, {0.05, 0.10}, rng);
    // Independent measurements: thresholded pixel count and OpenCV labels.
    cv::Mat bin(64, 64, CV_8U);
    std::size_t black = 0;
    for (int i = 0; i < 64; ++i) {
      for (int j = 0; j < 64; ++j) {
        const bool b = img.canvas.pixels[static_cast<std::size_t>(i * 64 + j)] < 0.5f;
        bin.at<unsigned char>(i, j) = b ? 255 : 0;
        black += b;
      }
    }
    const double bf = static_cast<double>(black) / (64.0 * 64.0);
    cv::Mat labels;
    const int components = cv::connectedComponents(bin, labels, 8) - 1;
    bad_fraction += !(bf >= 0.05 && bf <= 0.10);
    bad_components += components != n;
    ns.push_back(n);
    fractions.push_back(bf);
  }
  const double r = pearson(ns, fractions).r;
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = bad_fraction == 0 && bad_components == 0 && std::abs(r) <= 0.1 && secs < 60.0;
  o.detail = "out-of-range fractions " + std::to_string(bad_fraction) + "/1000, component mismatches " +
             std::to_string(bad_components) + "/1000, corr(n, black fraction) " + fmt(r) + ", " + fmt(secs, 2) + " s";
  return o;
}

// -- 2 ---------------------------------------------------------------------

// H(N|M) = H(N,M) - H(M) from raw joint counts.
double plug_in_conditional_entropy(const std::map<std::pair<int, int>, std::size_t>& joint) {
  double total = 0.0;
  std::map<int, double> marginal;
  for (const auto& [key, c] : joint) {
    total += static_cast<double>(c);
    marginal[key.second] += static_cast<double>(c);
  }
  double h_joint = 0.0, h_m = 0.0;
  for (const auto& [key, c] : joint) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h_joint -= p * std::log2(p);
  }
  for (const auto& [m, c] : marginal) {
    if (c == 0) continue;
    const double p = c / total;
    h_m -= p * std::log2(p);
  }
  return h_joint - h_m;
}

Outcome oracle_equivalence() {
  Rng rng(derive_seed({2026, fnv1a("acceptance-oracles")}));
  double worst_h = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int rows = 1 + static_cast<int>(rng.index(4)), cols = 1 + static_cast<int>(rng.index(5));
    std::map<std::pair<int, int>, std::size_t> joint;
    CodeTable table;
    for (int n = 1; n <= rows; ++n) {
      for (int m = 0; m < cols; ++m) {
        const std::size_t c = rng.index(10);
        if (c == 0) continue;
        joint[{n, m}] = c;
        table.add(n, "m" + std::to_string(m), c);
      }
    }
    if (joint.empty()) {
      joint[{1, 0}] = 1;
      table.add(1, "m0", 1);
    }
    worst_h = std::max(worst_h, std::abs(conditional_entropy(table) - plug_in_conditional_entropy(joint)));
  }
  double worst_hinge = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.index(6);
    std::vector<double> s(n);
    for (auto& v : s) v = rng.uniform(-3.0, 3.0);
    const std::size_t t = rng.index(n);
    const double margin = rng.uniform(0.1, 2.0);
    double expected = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != t) expected += std::max(0.0, margin - s[t] + s[j]);
    }
    worst_hinge = std::max(worst_hinge, std::abs(hinge_loss(s, t, margin) - expected));
  }
  Outcome o;
  o.pass = worst_h <= 1e-12 && worst_hinge <= 1e-6;
  std::ostringstream os;
  os << "max |H - plug-in| " << worst_h << ", max |hinge - formula| " << worst_hinge;
  o.detail = os.str();
  return o;
}

// -- 3 ---------------------------------------------------------------------

D random_tensor(diff::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(diff::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return D::from(std::move(shape), std::move(v));
}

D weighted(const D& y, std::uint64_t seed) {
  Rng rng(seed);
  return diff::sum(diff::mul(y, random_tensor(y.shape(), rng)));
}

double param_check(const std::function<D()>& loss, D param, double eps) {
  param.zero_grad();
  diff::backward(loss());
  std::vector<double> analytic(param.grad().begin(), param.grad().end());
  double worst = 0.0;
  diff::NoGradGuard guard;
  auto v = param.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + eps;
    const double up = loss().item();
    v[i] = keep - eps;
    const double down = loss().item();
    v[i] = keep;
    const double numeric = (up - down) / (2 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

Outcome gradient_checks() {
  using namespace diff;
  const auto t0 = Clock::now();
  constexpr double eps = 1e-6;
  std::map<std::string, double> worst;
  auto note = [&](const std::string& name, double err) { worst[name] = std::max(worst[name], err); };
  Rng rng(derive_seed({2026, fnv1a("acceptance-grad")}));

  for (int trial = 0; trial < 3; ++trial) {
    const auto seed = static_cast<std::uint64_t>(100 + trial);
    auto x = random_tensor({3, 4}, rng), y = random_tensor({3, 4}, rng);
    auto near_zero = [&](std::size_t i) { return std::abs(x[i]) < 10 * eps; };
    auto near_bounds = [&](std::size_t i) { return std::abs(std::abs(x[i]) - 0.5) < 10 * eps; };
    auto check = [&](const std::string& name, const std::function<D(const D&)>& f, const D& at,
                     const std::function<bool(std::size_t)>& skip = nullptr) {
      note(name, grad_check<double>(f, at, eps, skip));
    };
    check("add", [&](const D& v) { return weighted(add(v, y), seed); }, x);
    check("sub", [&](const D& v) { return weighted(sub(y, v), seed); }, x);
    check("mul", [&](const D& v) { return weighted(mul(v, v), seed); }, x);
    check("affine_scalar", [&](const D& v) { return weighted(affine_scalar(v, -2.5, 0.3), seed); }, x);
    check("relu", [&](const D& v) { return weighted(relu(v), seed); }, x, near_zero);
    check("tanh", [&](const D& v) { return weighted(tanh(v), seed); }, x);
    check("sigmoid", [&](const D& v) { return weighted(sigmoid(v), seed); }, x);
    check("clamp", [&](const D& v) { return weighted(clamp(v, -0.5, 0.5), seed); }, x, near_bounds);
    check("mean", [&](const D& v) { return mean(mul(v, v)); }, x);
    check("reshape", [&](const D& v) { return weighted(reshape(v, {4, 3}), seed); }, x);
    check("slice_cols", [&](const D& v) { return weighted(slice_cols(v, 1, 3), seed); }, x);
    check("column", [&](const D& v) { return weighted(column(v, 2), seed); }, x);
    check("gather_rows", [&](const D& v) { return weighted(gather_rows(v, {2, 0, 2}), seed); }, x);
    check("concat_rows", [&](const D& v) { return weighted(concat_rows<double>({v, y}), seed); }, x);
    check("softmax", [&](const D& v) { return weighted(softmax(v), seed); }, x);

    auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng), bias = random_tensor({2}, rng);
    check("matmul", [&](const D& v) { return weighted(matmul(v, b), seed); }, a);
    check("matmul", [&](const D& v) { return weighted(matmul(a, v), seed); }, b);
    check("add_bias", [&](const D& v) { return weighted(add_bias(matmul(a, b), v), seed); }, bias);
    auto q = random_tensor({2, 3}, rng), c = random_tensor({8, 3}, rng);
    check("batched_scores", [&](const D& v) { return weighted(batched_scores(v, c, 4, 0.7), seed); }, q);
    check("batched_scores", [&](const D& v) { return weighted(batched_scores(q, v, 4, 0.7), seed); }, c);

    const std::vector<std::size_t> targets{0, 3, 2};
    auto s = random_tensor({3, 5}, rng, -2.0, 2.0);
    auto kink = [&](std::size_t i) {
      const std::size_t r = i / 5, j = i % 5, t = targets[r];
      for (std::size_t k = 0; k < 5; ++k) {
        if (k != t && std::abs(1.0 - s[r * 5 + t] + s[r * 5 + k]) < 10 * eps && (j == k || j == t)) return true;
      }
      return false;
    };
    check("multiclass_hinge", [&](const D& v) { return sum(multiclass_hinge(v, targets, 1.0)); }, s, kink);

    auto img = random_tensor({2, 2, 6, 6}, rng), w = random_tensor({3, 2, 3, 3}, rng), cb = random_tensor({3}, rng);
    check("conv2d", [&](const D& v) { return weighted(conv2d(v, w, cb), seed); }, img);
    check("conv2d", [&](const D& v) { return weighted(conv2d(img, v, cb), seed); }, w);
    check("conv2d", [&](const D& v) { return weighted(conv2d(img, w, v), seed); }, cb);
    check("avg_pool2d", [&](const D& v) { return weighted(avg_pool2d(v, 2), seed); }, img);
    check("max_pool2d", [&](const D& v) { return weighted(max_pool2d(v, 2), seed); }, img);

    // Straight-through: the backward pass equals the gradient of the
    // tempered softmax under the same noise draw.
    auto logits = random_tensor({2, 4}, rng);
    const double tau = 0.7;
    Rng noise_rng(42);
    std::vector<double> noise(8);
    for (auto& g : noise) g = noise_rng.gumbel();
    const auto G = D::from({2, 4}, noise);
    auto soft = [&](const D& v) { return weighted(softmax(scale(add(v, G), 1.0 / tau)), seed); };
    check("gumbel_straight_through", soft, logits);
    auto p1 = D::from({2, 4}, std::vector<double>(logits.values().begin(), logits.values().end()), true);
    Rng replay(42);
    backward(weighted(gumbel_straight_through(p1, tau, replay), seed));
    auto p2 = D::from({2, 4}, std::vector<double>(logits.values().begin(), logits.values().end()), true);
    backward(soft(p2));
    double diff = 0.0;
    for (std::size_t i = 0; i < 8; ++i) diff = std::max(diff, std::abs(p1.grad()[i] - p2.grad()[i]));
    note("gumbel_straight_through", diff);
  }

  Conv2d<double> conv(1, 3, 3, rng);
  Affine<double> fc(48, 2, rng);
  LstmCell<double> cell(2, 4, rng);
  const auto img = random_tensor({2, 1, 8, 8}, rng), x2 = random_tensor({2, 2}, rng);
  auto chain = [&](const D& v) {
    auto h = relu(max_pool2d(conv(v), 2));
    auto s = cell(tanh(fc(reshape(h, {2, 48}))), cell.zero_state(2));
    s = cell(x2, s);
    return weighted(add(s.h, s.c), 7);
  };
  note("layer chain input", grad_check<double>(chain, img, 1e-5));
  ParameterList<double> params;
  conv.collect(params, "Conv2d");
  fc.collect(params, "Affine");
  cell.collect(params, "LstmCell");
  for (auto& p : params) note(p.name, param_check([&] { return chain(img); }, p.tensor, 1e-5));

  double worst_raster = 0.0;
  const std::size_t side = 64;
  const double margin = 2.0 / static_cast<double>(side);
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<double> c(20);
    for (auto& v : c) v = rng.uniform(-0.1, 1.1);
    auto near_clamp = [&](std::size_t i) { return std::abs(c[i]) < margin || std::abs(c[i] - 1.0) < margin; };
    worst_raster = std::max(
        worst_raster, grad_check<double>([&](const D& s) { return weighted(rasterize_strokes(s, side, 1.5 / 64.0), 5); },
                                         D::from({1, 20}, c), eps, near_clamp));
  }

  double worst_other = 0.0;
  std::string worst_name;
  for (const auto& [name, err] : worst) {
    if (err >= worst_other) worst_other = err, worst_name = name;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst_raster < 1e-2 && worst_other < 1e-3 && secs < 120.0;
  std::ostringstream os;
  os << worst.size() << " ops/layers, worst " << worst_name << " " << worst_other << "; rasteriser " << worst_raster
     << "; " << fmt(secs, 2) << " s";
  o.detail = os.str();
  return o;
}

// -- 4 ---------------------------------------------------------------------

Outcome chance_baselines() {
  DataSettings data;
  const auto ds = load_or_build_dataset(g_work / "datasets", data.spec({1, 2, 3, 4, 5}));
  Outcome o{true, ""};
  for (auto ch : {Channel::Discrete, Channel::Sketch}) {
    GameConfig cfg;
    cfg.channel = ch;
    AgentPair agents(cfg.agent_config(ds.spec().canvas_side), 7);
    Rng rng(derive_seed({7, fnv1a("acceptance-chance")}));
    const auto t = evaluate(agents, ds, cfg.classes, Condition::Diff, 5, 1000, rng);
    const double acc = accuracy(t);
    o.pass = o.pass && acc >= 0.17 && acc <= 0.23;
    o.detail += (o.detail.empty() ? "" : ", ") + to_string(ch) + " accuracy " + fmt(acc);
  }
  return o;
}

// -- 5 ---------------------------------------------------------------------

Outcome in_distribution() {
  auto spec = preset_spec("table1-vocab-sweep", "c5-vocab3");
  spec.axes = {{"vocab", {3}}};
  const auto summary = run_preset(spec, progress);
  std::size_t good = 0;
  std::string detail;
  for (auto seed : spec.seeds) {
    const auto& f = per_seed(summary, "vocab-3", seed).at("final");
    const double acc = f.at("accuracy"), h = f.at("cond_entropy");
    good += acc >= 0.85 && h <= 1.5;
    detail += "seed " + std::to_string(seed) + ": acc " + fmt(acc) + " H " + fmt(h) + "; ";
  }
  return {good >= 2, detail + std::to_string(good) + "/3 seeds meet acc>=0.85 and H<=1.5"};
}

// -- 6 ---------------------------------------------------------------------

Outcome length_regularisation() {
  auto spec = preset_spec("fig3-length-reg", "c6-lambda");
  const auto summary = run_preset(spec, progress);
  std::size_t good = 0;
  std::string detail;
  for (auto seed : spec.seeds) {
    std::vector<double> len, acc;
    for (const auto* cell : {"lambda-0", "lambda-0.005", "lambda-0.05"}) {
      const auto& f = per_seed(summary, cell, seed).at("final");
      len.push_back(f.at("mean_len"));
      acc.push_back(f.at("accuracy"));
    }
    const bool ok = len[1] <= len[0] && len[2] <= len[1] && acc[0] - acc[1] <= 0.10;
    good += ok;
    detail += "seed " + std::to_string(seed) + ": len " + fmt(len[0], 2) + "/" + fmt(len[1], 2) + "/" + fmt(len[2], 2) +
              " acc " + fmt(acc[0]) + "/" + fmt(acc[1]) + "/" + fmt(acc[2]) + "; ";
  }
  return {good >= 2, detail + std::to_string(good) + "/3 seeds pass"};
}

// -- 7 ---------------------------------------------------------------------

Outcome extrapolation() {
  auto spec = preset_spec("fig5-extrapolation", "c7-extrapolation");
  spec.axes = {{"ood", {7}}};
  const auto summary = run_preset(spec, progress);
  std::size_t good = 0;
  std::string detail;
  for (auto seed : spec.seeds) {
    const auto& r = per_seed(summary, "discrete-train1-2-3-4-5", seed).at("test_sets").at("+7");
    const double novel = r.at("novel_accuracy"), reuse = r.at("ceiling_reuse");
    good += novel <= 0.3 && reuse >= 0.5;
    detail += "seed " + std::to_string(seed) + ": novel acc " + fmt(novel) + " class-5 key reuse " + fmt(reuse) + "; ";
  }
  return {good >= 2, detail + std::to_string(good) + "/3 seeds pass"};
}

// -- 8 ---------------------------------------------------------------------

Outcome frequency_skews() {
  auto spec = preset_spec("fig4-frequency", "c8-frequency");
  spec.axes = {{"channels", {"discrete"}}};
  const auto summary = run_preset(spec, progress);
  std::map<std::string, double> acc;
  for (const auto* setup : {"uniform", "increase", "decrease"}) {
    acc[setup] = summary.at("cells").at(std::string("discrete-") + setup).at("metrics").at("accuracy").at("mean");
  }
  double lo = 1.0, hi = 0.0;
  for (const auto& [k, v] : acc) lo = std::min(lo, v), hi = std::max(hi, v);
  const auto lowest = summary.at("lowest_accuracy_setup").at("discrete").get<std::string>();
  return {hi - lo <= 0.15, "uniform " + fmt(acc["uniform"]) + ", increase " + fmt(acc["increase"]) + ", decrease " +
                               fmt(acc["decrease"]) + ", spread " + fmt(hi - lo) + ", lowest: " + lowest};
}

// -- 9 ---------------------------------------------------------------------

Outcome sketch_channel() {
  auto spec = preset_spec("fig2-same-diff", "c9-sketch");
  spec.seeds = {0};
  spec.axes = {{"channels", {"sketch"}}, {"conditions", {"diff"}}};
  const auto summary = run_preset(spec, progress);
  const auto& f = per_seed(summary, "sketch-diff", 0).at("final");
  const double acc = f.at("accuracy"), purity = f.at("purity"), corr = f.at("span_corr");
  return {acc >= 0.7 && purity >= 0.8 && corr > 0.0,
          "accuracy " + fmt(acc) + ", purity (k=5) " + fmt(purity) + ", span correlation " + fmt(corr)};
}

// -- 10 --------------------------------------------------------------------

std::map<std::string, std::string> csv_files(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().extension() != ".csv") continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).generic_string()] = {std::istreambuf_iterator<char>(in), {}};
  }
  return out;
}

Outcome determinism() {
  std::map<std::string, std::string> runs[2];
  for (int k = 0; k < 2; ++k) {
    auto spec = preset_spec("fig2-same-diff", "c10-rerun" + std::to_string(k));
    fs::remove_all(spec.out);
    spec.seeds = {0, 1};
    spec.game = {{"epochs", 3}, {"eval_episodes", 100}, {"embed_dim", 32}, {"hidden", 32}};
    spec.data = {{"per_class", 40}};
    run_preset(spec, nullptr);
    runs[k] = csv_files(spec.out);
  }
  std::size_t differing = 0;
  for (const auto& [rel, body] : runs[0]) differing += !runs[1].count(rel) || runs[1].at(rel) != body;
  differing += runs[1].size() != runs[0].size();
  return {differing == 0 && runs[0].size() > 0,
          std::to_string(runs[0].size()) + " metric CSVs compared, " + std::to_string(differing) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      g_work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      for (int n : parse_class_list(argv[++i])) only.insert(n);
    } else {
      std::cerr << "usage: acceptance --work DIR [--only 1,4,10]\n";
      return 2;
    }
  }
  if (g_work.empty()) g_work = "acceptance-work";
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"stimulus invariants", stimuli_invariants},
      {"oracle equivalence", oracle_equivalence},
      {"gradient checks", gradient_checks},
      {"chance baselines", chance_baselines},
      {"in-distribution learning", in_distribution},
      {"length regularisation", length_regularisation},
      {"extrapolation signature", extrapolation},
      {"frequency skews", frequency_skews},
      {"sketch channel", sketch_channel},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(n)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << n << " (" << criteria[i].first << "): " << (o.pass ? "PASS" : "FAIL") << " - "
              << o.detail << " [" << fmt(seconds_since(t0), 2) << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
