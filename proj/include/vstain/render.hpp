// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "vstain/tensor.hpp"

namespace vstain {

using Rgb = std::array<float, 3>;

/// Blank [3,h,w] canvas.
Tensor canvas(int64_t h, int64_t w, Rgb color = {1.0f, 1.0f, 1.0f});
void fill_rect(Tensor& img, int64_t y, int64_t x, int64_t h, int64_t w, Rgb color);
/// Bresenham line clipped to the canvas.
void draw_line(Tensor& img, int64_t y0, int64_t x0, int64_t y1, int64_t x1, Rgb color);
/// 5x7 bitmap text; lowercase renders as uppercase, unknown glyphs as blanks.
/// Each glyph cell is 6*scale wide and 8*scale tall.
void draw_text(Tensor& img, int64_t y, int64_t x, const std::string& text, int scale = 1, Rgb color = {0, 0, 0});
int64_t text_width(const std::string& text, int scale = 1);

struct Series {
  std::string name;
  std::vector<double> x, y;
};
/// Line chart with axes, min/max labels and a legend.
Tensor plot_lines(const std::vector<Series>& series, const std::string& title, int64_t h = 360, int64_t w = 640,
                  bool log_y = false);
/// Vertical bar chart with value labels in [0, max(values)].
Tensor plot_bars(const std::vector<std::string>& labels, const std::vector<double>& values, const std::string& title,
                 int64_t h = 360, int64_t w = 640);

/// Rows of equally sized tiles; an optional left strip carries one label per row.
Tensor compose_grid(const std::vector<std::vector<Tensor>>& rows, const std::vector<std::string>& row_labels = {},
                    int64_t label_width = 0);

}  // namespace vstain
