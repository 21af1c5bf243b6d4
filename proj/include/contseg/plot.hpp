// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Static PNG charts: line plots of per-step curves and labelled scatter plots.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace contseg {

struct Series {
  std::string label;
  std::vector<double> x, y;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  std::optional<std::pair<double, double>> y_range;  // default: data range
  bool lines = true;                                 // false = markers only
  bool integer_x = false;                            // tick at every integer
};

/// RGB8 canvas.
struct Canvas {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  Canvas(int w, int h);
  void set(int x, int y, std::uint32_t color);
  void fill_rect(int x0, int y0, int x1, int y1, std::uint32_t color);
  void line(int x0, int y0, int x1, int y1, std::uint32_t color, int thickness = 1);
  /// 5x7 glyphs; lower case is drawn as upper case, unknown characters as blanks.
  void text(int x, int y, const std::string& s, std::uint32_t color, int scale = 1);
  static int text_width(const std::string& s, int scale = 1) { return static_cast<int>(s.size()) * 6 * scale; }
};

void write_png(const std::filesystem::path& path, const Canvas& canvas);

Canvas render_plot(const PlotSpec& spec, int width = 720, int height = 460);

void write_plot(const std::filesystem::path& path, const PlotSpec& spec, int width = 720, int height = 460);

}  // namespace contseg
