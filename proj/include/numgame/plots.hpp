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
#include <limits>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "numgame/error.hpp"

// Minimal chart writers. Every chart is emitted twice: as hand-written SVG
// and as a PNG drawn with OpenCV, from the same layout numbers.

namespace numgame::plots {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> err;  // optional half-width band, same length as y

  bool empty() const {
    return std::none_of(y.begin(), y.end(), [](double v) { return std::isfinite(v); });
  }
};

struct LinePlot {
  std::string title;
  std::string xlabel;
  std::string ylabel;
  std::vector<Series> series;
  std::vector<std::string> xticks;  // categorical labels at x = 0, 1, ...; empty = numeric axis
};

struct Heatmap {
  std::string title;
  std::vector<std::string> rows;
  std::vector<std::string> cols;
  std::vector<std::vector<double>> values;
};

namespace detail {

inline constexpr int kWidth = 640;
inline constexpr int kHeight = 420;
inline constexpr int kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;

struct Rgb {
  int r, g, b;
};

inline Rgb palette(std::size_t i) {
  static constexpr Rgb kColors[] = {{31, 119, 180}, {44, 160, 44},  {214, 39, 40},  {255, 127, 14},
                                    {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127}};
  return kColors[i % 8];
}

inline std::string hex(Rgb c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c.r, c.g, c.b);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }

  void finish() {
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-9) {
      lo -= 0.5;
      hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
  }
};

/// Round tick values (steps of 1, 2 or 5 times a power of ten) inside [lo, hi].
inline std::vector<double> nice_ticks(double lo, double hi, int target = 5) {
  const double raw = (hi - lo) / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    step = m * mag;
    if (step >= raw) break;
  }
  std::vector<double> out;
  for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * step; v += step) {
    out.push_back(std::abs(v) < 1e-12 * step ? 0.0 : v);
  }
  return out;
}

struct Frame {
  Range xr, yr;
  double px(double x) const { return kLeft + (x - xr.lo) / (xr.hi - xr.lo) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - yr.lo) / (yr.hi - yr.lo) * (kHeight - kTop - kBottom); }
};

inline Frame frame_for(const LinePlot& p) {
  Frame f;
  for (const auto& s : p.series) {
    for (std::size_t i = 0; i < s.y.size(); ++i) {
      f.xr.add(s.x[i]);
      const double e = i < s.err.size() && std::isfinite(s.err[i]) ? s.err[i] : 0.0;
      f.yr.add(s.y[i] - e);
      f.yr.add(s.y[i] + e);
    }
  }
  f.xr.finish();
  f.yr.finish();
  return f;
}

inline void write_text(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << body;
}

inline void write_image(const std::filesystem::path& path, const cv::Mat& img) {
  if (!cv::imwrite(path.string(), img)) throw IoError("cannot write " + path.string());
}

inline cv::Scalar bgr(Rgb c) { return {static_cast<double>(c.b), static_cast<double>(c.g), static_cast<double>(c.r)}; }

inline void put(cv::Mat& img, const std::string& s, double x, double y, double scale = 0.4) {
  cv::putText(img, s, {static_cast<int>(x), static_cast<int>(y)}, cv::FONT_HERSHEY_SIMPLEX, scale, {0, 0, 0}, 1,
              cv::LINE_AA);
}

}  // namespace detail

/// Writes `<stem>.svg` and `<stem>.png`. Series whose values are all
/// missing are skipped; returns false (and writes nothing) when no series
/// is left.
inline bool write_line_plot(const std::filesystem::path& stem, LinePlot p) {
  using namespace detail;
  p.series.erase(std::remove_if(p.series.begin(), p.series.end(), [](const Series& s) { return s.empty(); }),
                 p.series.end());
  if (p.series.empty()) return false;
  const Frame f = frame_for(p);

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(kWidth) + "\" height=\"" +
                    std::to_string(kHeight) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + std::to_string(kWidth / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" +
         escape(p.title) + "</text>\n";
  cv::Mat img(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255));
  put(img, p.title, kWidth / 2.0 - 4.0 * static_cast<double>(p.title.size()), 22, 0.5);

  // axes
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  svg += "<path d=\"M" + num(x0) + " " + num(y1) + " V" + num(y0) + " H" + num(x1) + "\" stroke=\"black\" fill=\"none\"/>\n";
  cv::line(img, {kLeft, kTop}, {kLeft, kHeight - kBottom}, {0, 0, 0});
  cv::line(img, {kLeft, kHeight - kBottom}, {kWidth - kRight, kHeight - kBottom}, {0, 0, 0});
  for (double v : nice_ticks(f.yr.lo, f.yr.hi)) {
    const double y = f.py(v);
    svg += "<text x=\"" + num(x0 - 6) + "\" y=\"" + num(y + 4) + "\" text-anchor=\"end\">" + num(v) + "</text>\n";
    put(img, num(v), x0 - 45, y + 4);
  }
  if (p.xticks.empty()) {
    for (double v : nice_ticks(f.xr.lo, f.xr.hi)) {
      svg += "<text x=\"" + num(f.px(v)) + "\" y=\"" + num(y0 + 16) + "\" text-anchor=\"middle\">" + num(v) + "</text>\n";
      put(img, num(v), f.px(v) - 10, y0 + 16);
    }
  } else {
    for (std::size_t k = 0; k < p.xticks.size(); ++k) {
      const double x = f.px(static_cast<double>(k));
      svg += "<text x=\"" + num(x) + "\" y=\"" + num(y0 + 16) + "\" text-anchor=\"middle\">" + escape(p.xticks[k]) +
             "</text>\n";
      put(img, p.xticks[k], x - 3.0 * static_cast<double>(p.xticks[k].size()), y0 + 16);
    }
  }
  svg += "<text x=\"" + num((x0 + x1) / 2) + "\" y=\"" + num(kHeight - 12) + "\" text-anchor=\"middle\">" +
         escape(p.xlabel) + "</text>\n";
  svg += "<text transform=\"translate(16 " + num((y0 + y1) / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
         escape(p.ylabel) + "</text>\n";
  put(img, p.xlabel, (x0 + x1) / 2 - 20, kHeight - 10);
  put(img, p.ylabel, 4, kTop - 10);

  for (std::size_t si = 0; si < p.series.size(); ++si) {
    const auto& s = p.series[si];
    const auto color = palette(si);
    std::vector<cv::Point> pts, band_hi, band_lo;
    std::string path, band_top, band_bottom;
    for (std::size_t i = 0; i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      const double x = f.px(s.x[i]), y = f.py(s.y[i]);
      path += (path.empty() ? "M" : " L") + num(x) + " " + num(y);
      pts.emplace_back(static_cast<int>(x), static_cast<int>(y));
      if (i < s.err.size() && std::isfinite(s.err[i]) && s.err[i] > 0) {
        const double hi = f.py(s.y[i] + s.err[i]), lo = f.py(s.y[i] - s.err[i]);
        band_top += (band_top.empty() ? "M" : " L") + num(x) + " " + num(hi);
        band_bottom = " L" + num(x) + " " + num(lo) + band_bottom;
        band_hi.emplace_back(static_cast<int>(x), static_cast<int>(hi));
        band_lo.insert(band_lo.begin(), cv::Point(static_cast<int>(x), static_cast<int>(lo)));
      }
    }
    if (!band_top.empty()) {
      svg += "<path d=\"" + band_top + band_bottom + " Z\" fill=\"" + hex(color) + "\" fill-opacity=\"0.2\" stroke=\"none\"/>\n";
      std::vector<cv::Point> poly = band_hi;
      poly.insert(poly.end(), band_lo.begin(), band_lo.end());
      cv::Mat overlay = img.clone();
      cv::fillPoly(overlay, std::vector<std::vector<cv::Point>>{poly}, bgr(color));
      cv::addWeighted(overlay, 0.2, img, 0.8, 0, img);
    }
    svg += "<path d=\"" + path + "\" fill=\"none\" stroke=\"" + hex(color) + "\" stroke-width=\"2\"/>\n";
    for (const auto& pt : pts) {
      svg += "<circle cx=\"" + std::to_string(pt.x) + "\" cy=\"" + std::to_string(pt.y) + "\" r=\"2.5\" fill=\"" +
             hex(color) + "\"/>\n";
    }
    if (pts.size() > 1) cv::polylines(img, pts, false, bgr(color), 2, cv::LINE_AA);
    for (const auto& pt : pts) cv::circle(img, pt, 3, bgr(color), cv::FILLED, cv::LINE_AA);

    const double ly = kTop + 14.0 + 16.0 * static_cast<double>(si);
    svg += "<rect x=\"" + num(x1 + 10) + "\" y=\"" + num(ly - 8) + "\" width=\"12\" height=\"8\" fill=\"" + hex(color) +
           "\"/><text x=\"" + num(x1 + 26) + "\" y=\"" + num(ly) + "\">" + escape(s.label) + "</text>\n";
    cv::rectangle(img, cv::Rect(static_cast<int>(x1 + 10), static_cast<int>(ly - 8), 12, 8), bgr(color), cv::FILLED);
    put(img, s.label, x1 + 26, ly);
  }
  svg += "</svg>\n";
  write_text(stem.string() + ".svg", svg);
  write_image(stem.string() + ".png", img);
  return true;
}

/// Writes `<stem>.svg` and `<stem>.png`; cells shaded white (0) to dark
/// blue (max), with the value printed in each cell.
inline void write_heatmap(const std::filesystem::path& stem, const Heatmap& h) {
  using namespace detail;
  const int cell = 44, left = 90, top = 60;
  const int W = std::max(left + cell * static_cast<int>(h.cols.size()) + 20, 16 + 8 * static_cast<int>(h.title.size()));
  const int H = top + cell * static_cast<int>(h.rows.size()) + 20;
  double mx = 0.0;
  for (const auto& r : h.values)
    for (double v : r)
      if (std::isfinite(v)) mx = std::max(mx, v);
  if (mx <= 0.0) mx = 1.0;

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(W) + "\" height=\"" +
                    std::to_string(H) + "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"8\" y=\"18\" font-size=\"13\">" + escape(h.title) + "</text>\n";
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  put(img, h.title, 8, 18, 0.45);
  for (std::size_t j = 0; j < h.cols.size(); ++j) {
    const int x = left + cell * static_cast<int>(j) + cell / 2;
    svg += "<text x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(top - 8) + "\" text-anchor=\"middle\">" +
           escape(h.cols[j]) + "</text>\n";
    put(img, h.cols[j], x - 3.0 * static_cast<double>(h.cols[j].size()), top - 8, 0.33);
  }
  for (std::size_t i = 0; i < h.rows.size(); ++i) {
    const int y = top + cell * static_cast<int>(i);
    svg += "<text x=\"" + std::to_string(left - 6) + "\" y=\"" + std::to_string(y + cell / 2 + 4) +
           "\" text-anchor=\"end\">" + escape(h.rows[i]) + "</text>\n";
    put(img, h.rows[i], 8, y + cell / 2 + 4, 0.4);
    for (std::size_t j = 0; j < h.cols.size(); ++j) {
      const int x = left + cell * static_cast<int>(j);
      const double v = j < h.values[i].size() ? h.values[i][j] : 0.0;
      const double a = std::isfinite(v) ? std::clamp(v / mx, 0.0, 1.0) : 0.0;
      const Rgb c{static_cast<int>(255 - a * 247), static_cast<int>(255 - a * 207), static_cast<int>(255 - a * 148)};
      svg += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) + "\" width=\"" + std::to_string(cell) +
             "\" height=\"" + std::to_string(cell) + "\" fill=\"" + hex(c) + "\" stroke=\"#dddddd\"/>";
      svg += "<text x=\"" + std::to_string(x + cell / 2) + "\" y=\"" + std::to_string(y + cell / 2 + 4) +
             "\" text-anchor=\"middle\" fill=\"" + (a > 0.6 ? "white" : "black") + "\">" + num(v) + "</text>\n";
      cv::rectangle(img, cv::Rect(x, y, cell, cell), bgr(c), cv::FILLED);
      cv::rectangle(img, cv::Rect(x, y, cell, cell), {221, 221, 221});
      cv::putText(img, num(v), {x + 4, y + cell / 2 + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.33,
                  a > 0.6 ? cv::Scalar(255, 255, 255) : cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    }
  }
  svg += "</svg>\n";
  write_text(stem.string() + ".svg", svg);
  write_image(stem.string() + ".png", img);
}

/// Tiles grayscale PNGs into a grid (rows x cols, empty path = blank tile)
/// and writes `<stem>.png` plus an SVG that references the tiles.
inline void write_image_grid(const std::filesystem::path& stem, const std::string& title,
                             const std::vector<std::string>& row_labels, const std::vector<std::string>& col_labels,
                             const std::vector<std::vector<std::filesystem::path>>& tiles) {
  using namespace detail;
  const int tile = 96, gap = 6, left = 70, top = 46;
  const int W = left + (tile + gap) * static_cast<int>(col_labels.size()) + 10;
  const int H = top + (tile + gap) * static_cast<int>(row_labels.size()) + 10;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  put(img, title, 8, 18, 0.45);
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" xmlns:xlink=\"http://www.w3.org/1999/xlink\" width=\"" +
                    std::to_string(W) + "\" height=\"" + std::to_string(H) +
                    "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"8\" y=\"18\" font-size=\"13\">" + escape(title) + "</text>\n";
  const auto base = stem.parent_path();
  for (std::size_t j = 0; j < col_labels.size(); ++j) {
    const int x = left + (tile + gap) * static_cast<int>(j) + tile / 2;
    svg += "<text x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(top - 8) + "\" text-anchor=\"middle\">" +
           escape(col_labels[j]) + "</text>\n";
    put(img, col_labels[j], x - 4, top - 8);
  }
  for (std::size_t i = 0; i < row_labels.size(); ++i) {
    const int y = top + (tile + gap) * static_cast<int>(i);
    svg += "<text x=\"6\" y=\"" + std::to_string(y + tile / 2) + "\">" + escape(row_labels[i]) + "</text>\n";
    put(img, row_labels[i], 6, y + tile / 2);
    for (std::size_t j = 0; j < col_labels.size(); ++j) {
      const int x = left + (tile + gap) * static_cast<int>(j);
      cv::rectangle(img, cv::Rect(x - 1, y - 1, tile + 2, tile + 2), {200, 200, 200});
      if (i >= tiles.size() || j >= tiles[i].size() || tiles[i][j].empty()) continue;
      cv::Mat src = cv::imread(tiles[i][j].string(), cv::IMREAD_COLOR);
      if (src.empty()) continue;
      cv::Mat scaled;
      cv::resize(src, scaled, {tile, tile}, 0, 0, cv::INTER_AREA);
      scaled.copyTo(img(cv::Rect(x, y, tile, tile)));
      const auto rel = std::filesystem::relative(tiles[i][j], base).generic_string();
      svg += "<image x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) + "\" width=\"" + std::to_string(tile) +
             "\" height=\"" + std::to_string(tile) + "\" href=\"" + escape(rel) + "\" xlink:href=\"" + escape(rel) +
             "\"/>\n";
    }
  }
  svg += "</svg>\n";
  write_text(stem.string() + ".svg", svg);
  write_image(stem.string() + ".png", img);
}

}  // namespace numgame::plots
