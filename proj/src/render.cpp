// SPDX-License-Identifier: Apache-2.0
#include "vstain/render.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

#include "vstain/image_io.hpp"

namespace vstain {
namespace {

// Rows top to bottom, bit 4 is the leftmost column.
const std::map<char, std::array<uint8_t, 7>>& font() {
  static const std::map<char, std::array<uint8_t, 7>> f = {
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}}, {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}},
      {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}}, {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
      {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}}, {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}},
      {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}}, {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}},
      {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}}, {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
      {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}}, {'&', {0x0C, 0x12, 0x14, 0x08, 0x15, 0x12, 0x0D}},
      {'>', {0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08}}, {'<', {0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02}},
  };
  return f;
}

void put(Tensor& img, int64_t y, int64_t x, Rgb c) {
  const int64_t h = img.dim(1), w = img.dim(2);
  if (y < 0 || x < 0 || y >= h || x >= w) return;
  for (int64_t ch = 0; ch < 3; ++ch) img[(ch * h + y) * w + x] = c[static_cast<size_t>(ch)];
}

std::string fmt(double v) {
  char b[32];
  if (std::abs(v) >= 1e4 || (std::abs(v) < 1e-3 && v != 0.0))
    std::snprintf(b, sizeof(b), "%.2e", v);
  else
    std::snprintf(b, sizeof(b), "%.3g", v);
  return b;
}

const Rgb kPalette[] = {{0.12f, 0.47f, 0.71f}, {1.0f, 0.5f, 0.05f}, {0.17f, 0.63f, 0.17f}, {0.84f, 0.15f, 0.16f},
                        {0.58f, 0.4f, 0.74f},  {0.55f, 0.34f, 0.29f}, {0.89f, 0.47f, 0.76f}, {0.5f, 0.5f, 0.5f}};

}  // namespace

Tensor canvas(int64_t h, int64_t w, Rgb color) {
  Tensor t(Shape{3, h, w});
  fill_rect(t, 0, 0, h, w, color);
  return t;
}

void fill_rect(Tensor& img, int64_t y, int64_t x, int64_t h, int64_t w, Rgb color) {
  for (int64_t yy = std::max<int64_t>(y, 0); yy < std::min(y + h, img.dim(1)); ++yy)
    for (int64_t xx = std::max<int64_t>(x, 0); xx < std::min(x + w, img.dim(2)); ++xx) put(img, yy, xx, color);
}

void draw_line(Tensor& img, int64_t y0, int64_t x0, int64_t y1, int64_t x1, Rgb color) {
  const int64_t dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0), sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int64_t err = dx + dy;
  for (;;) {
    put(img, y0, x0, color);
    if (x0 == x1 && y0 == y1) break;
    const int64_t e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

int64_t text_width(const std::string& text, int scale) { return static_cast<int64_t>(text.size()) * 6 * scale; }

void draw_text(Tensor& img, int64_t y, int64_t x, const std::string& text, int scale, Rgb color) {
  for (size_t i = 0; i < text.size(); ++i) {
    auto it = font().find(static_cast<char>(std::toupper(static_cast<unsigned char>(text[i]))));
    if (it == font().end()) continue;
    const int64_t ox = x + static_cast<int64_t>(i) * 6 * scale;
    for (int r = 0; r < 7; ++r)
      for (int c = 0; c < 5; ++c)
        if (it->second[static_cast<size_t>(r)] & (0x10 >> c)) fill_rect(img, y + r * scale, ox + c * scale, scale, scale, color);
  }
}

Tensor plot_lines(const std::vector<Series>& series, const std::string& title, int64_t h, int64_t w, bool log_y) {
  Tensor img = canvas(h, w);
  const int64_t left = 70, right = w - 150, top = 30, bottom = h - 40;
  draw_text(img, 8, left, title, 2);
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  auto ty = [&](double v) { return log_y ? std::log10(std::max(v, 1e-12)) : v; };
  for (const auto& s : series)
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, ty(s.y[i]));
      y1 = std::max(y1, ty(s.y[i]));
    }
  if (!std::isfinite(x0)) return img;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const Rgb axis{0.2f, 0.2f, 0.2f};
  draw_line(img, bottom, left, bottom, right, axis);
  draw_line(img, top, left, bottom, left, axis);
  draw_text(img, bottom + 8, left, fmt(x0));
  draw_text(img, bottom + 8, right - text_width(fmt(x1)), fmt(x1));
  const double ylo = log_y ? std::pow(10.0, y0) : y0, yhi = log_y ? std::pow(10.0, y1) : y1;
  draw_text(img, top, 4, fmt(yhi));
  draw_text(img, bottom - 7, 4, fmt(ylo));
  for (size_t k = 0; k < series.size(); ++k) {
    const Rgb col = kPalette[k % 8];
    const auto& s = series[k];
    int64_t py = -1, px = -1;
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      const int64_t x = left + static_cast<int64_t>(std::lround((s.x[i] - x0) / (x1 - x0) * static_cast<double>(right - left)));
      const int64_t y = bottom - static_cast<int64_t>(std::lround((ty(s.y[i]) - y0) / (y1 - y0) * static_cast<double>(bottom - top)));
      if (px >= 0) draw_line(img, py, px, y, x, col);
      py = y;
      px = x;
    }
    fill_rect(img, top + 14 * static_cast<int64_t>(k), right + 12, 8, 16, col);
    draw_text(img, top + 14 * static_cast<int64_t>(k), right + 34, s.name);
  }
  return img;
}

Tensor plot_bars(const std::vector<std::string>& labels, const std::vector<double>& values, const std::string& title,
                 int64_t h, int64_t w) {
  if (labels.size() != values.size()) throw std::invalid_argument("plot_bars: labels and values differ in length");
  Tensor img = canvas(h, w);
  const int64_t left = 40, right = w - 20, top = 40, bottom = h - 60;
  draw_text(img, 8, left, title, 2);
  draw_line(img, bottom, left, bottom, right, {0.2f, 0.2f, 0.2f});
  double vmax = 0.0;
  for (double v : values) vmax = std::max(vmax, v);
  if (vmax <= 0.0) vmax = 1.0;
  const int64_t n = static_cast<int64_t>(values.size());
  if (n == 0) return img;
  const int64_t slot = (right - left) / n, bar = std::max<int64_t>(slot * 2 / 3, 1);
  for (int64_t i = 0; i < n; ++i) {
    const double v = std::max(0.0, values[static_cast<size_t>(i)]);
    const int64_t bh = static_cast<int64_t>(std::lround(v / vmax * static_cast<double>(bottom - top)));
    const int64_t x = left + i * slot + (slot - bar) / 2;
    fill_rect(img, bottom - bh, x, bh, bar, kPalette[static_cast<size_t>(i) % 8]);
    draw_text(img, bottom - bh - 10, x, fmt(values[static_cast<size_t>(i)]));
    std::string lab = labels[static_cast<size_t>(i)];
    const size_t fit = static_cast<size_t>(std::max<int64_t>(slot / 6, 1));
    draw_text(img, bottom + 8 + 10 * (i % 2), left + i * slot, lab.substr(0, fit));
  }
  return img;
}

Tensor compose_grid(const std::vector<std::vector<Tensor>>& rows, const std::vector<std::string>& row_labels,
                    int64_t label_width) {
  if (rows.empty() || rows[0].empty()) throw std::invalid_argument("compose_grid: no tiles");
  const Shape tile = rows[0][0].shape();
  const int64_t th = tile[1], tw = tile[2], cols = static_cast<int64_t>(rows[0].size());
  Tensor out = canvas(th * static_cast<int64_t>(rows.size()), label_width + tw * cols);
  for (size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<int64_t>(rows[r].size()) != cols) throw std::invalid_argument("compose_grid: ragged rows");
    for (size_t c = 0; c < rows[r].size(); ++c) {
      if (rows[r][c].shape() != tile) throw std::invalid_argument("compose_grid: tiles differ in shape");
      paste(out, rows[r][c], static_cast<int64_t>(r) * th, label_width + static_cast<int64_t>(c) * tw);
    }
    if (r < row_labels.size() && label_width > 0) draw_text(out, static_cast<int64_t>(r) * th + 4, 4, row_labels[r]);
  }
  return out;
}

}  // namespace vstain
