// SPDX-License-Identifier: Apache-2.0
#include "vstain/synth.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "vstain/errors.hpp"
#include "vstain/image_io.hpp"
#include "vstain/stain.hpp"

namespace vstain {
namespace {

struct Nucleus {
  double y, x, r;
};

Tensor render(const std::vector<std::pair<Vec3, std::vector<double>>>& layers, int64_t side, Rng& rng) {
  std::normal_distribution<double> noise(0.0, 0.01);
  Tensor img(Shape{3, side, side});
  const int64_t n = side * side;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < 3; ++ch) {
      double od = 0.0;
      for (const auto& [row, conc] : layers) od += conc[static_cast<size_t>(i)] * row[ch];
      img[ch * n + i] = static_cast<float>(std::clamp(std::pow(10.0, -od) + noise(rng), 0.0, 1.0));
    }
  return img;
}

bool positive(const std::string& stain, const Nucleus& c, double r_mid) {
  if (stain == "HER2" || stain == "Ki67") return c.r > r_mid;
  if (stain == "ER") return true;
  return c.r > 0.8 * r_mid;  // PR and anything else
}

}  // namespace

SynthPair synth_pair(int64_t side, const std::string& stain, Rng& rng, int64_t max_shift) {
  if (side < 16) throw std::invalid_argument("synthetic images need side >= 16");
  const double s = static_cast<double>(side) / 128.0;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  // Smooth tissue field from a few random plane waves.
  double fy[3], fx[3], ph[3];
  for (int k = 0; k < 3; ++k) {
    fy[k] = (u(rng) - 0.5) * 0.12 / s;
    fx[k] = (u(rng) - 0.5) * 0.12 / s;
    ph[k] = u(rng) * 6.283;
  }
  const int64_t pad = max_shift;
  const int64_t big = side + 2 * pad, nb = big * big;
  std::vector<double> tissue(static_cast<size_t>(nb));
  for (int64_t y = 0; y < big; ++y)
    for (int64_t x = 0; x < big; ++x) {
      double f = 0.0;
      for (int k = 0; k < 3; ++k) f += std::sin(fy[k] * y + fx[k] * x + ph[k]);
      tissue[static_cast<size_t>(y * big + x)] = 1.0 / (1.0 + std::exp(-2.5 * (f + 0.8)));
    }
  std::vector<Nucleus> nuclei;
  const int64_t count = static_cast<int64_t>(static_cast<double>(big * big) / (260.0 * s * s));
  for (int64_t i = 0; i < count; ++i) {
    Nucleus c{u(rng) * big, u(rng) * big, (1.8 + 3.2 * u(rng)) * s};
    if (u(rng) < tissue[static_cast<size_t>(static_cast<int64_t>(c.y) * big + static_cast<int64_t>(c.x))]) nuclei.push_back(c);
  }
  const double r_mid = 3.4 * s;
  std::vector<double> h_he(static_cast<size_t>(nb)), e_he(static_cast<size_t>(nb)), h_ihc(static_cast<size_t>(nb)),
      dab(static_cast<size_t>(nb));
  for (int64_t i = 0; i < nb; ++i) {
    e_he[static_cast<size_t>(i)] = 0.55 * tissue[static_cast<size_t>(i)];
    h_he[static_cast<size_t>(i)] = 0.12 * tissue[static_cast<size_t>(i)];
    h_ihc[static_cast<size_t>(i)] = 0.08 * tissue[static_cast<size_t>(i)];
  }
  for (const auto& c : nuclei) {
    const bool pos = positive(stain, c, r_mid);
    const double level = stain == "ER" ? std::min(1.0, c.r / (5.0 * s)) : 1.0;
    const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(c.y - c.r - 3 * s));
    const int64_t y1 = std::min<int64_t>(big - 1, static_cast<int64_t>(c.y + c.r + 3 * s));
    const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(c.x - c.r - 3 * s));
    const int64_t x1 = std::min<int64_t>(big - 1, static_cast<int64_t>(c.x + c.r + 3 * s));
    for (int64_t y = y0; y <= y1; ++y)
      for (int64_t x = x0; x <= x1; ++x) {
        const double d = std::hypot(y - c.y, x - c.x);
        const double inside = std::clamp(c.r + 0.5 - d, 0.0, 1.0);
        const size_t i = static_cast<size_t>(y * big + x);
        h_he[i] = std::max(h_he[i], 0.9 * inside);
        h_ihc[i] = std::max(h_ihc[i], 0.45 * inside);
        if (!pos) continue;
        if (stain == "HER2") {
          const double ring = std::clamp(1.0 - std::abs(d - c.r - 0.8 * s) / (1.2 * s), 0.0, 1.0);
          dab[i] = std::max(dab[i], 0.9 * ring);
        } else {
          dab[i] = std::max(dab[i], 0.8 * level * inside);
        }
      }
  }
  const StainMatrix he = StainMatrix::from_two({0.650, 0.704, 0.286}, {0.072, 0.990, 0.105});
  const StainMatrix hd = StainMatrix::h_dab();
  Tensor hne_big = render({{he.rows()[0], h_he}, {he.rows()[2], e_he}}, big, rng);
  Tensor ihc_big = render({{hd.rows()[0], h_ihc}, {hd.rows()[2], dab}}, big, rng);
  std::uniform_int_distribution<int64_t> shift(-max_shift, max_shift);
  const int64_t dy = shift(rng), dx = shift(rng);
  return {crop(hne_big, pad, pad, side, side), crop(ihc_big, pad + dy, pad + dx, side, side), stain};
}

std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir, const SynthOptions& opt) {
  if (opt.count < 1 || opt.stains.empty()) throw ConfigError("synthetic dataset needs count >= 1 and at least one stain");
  std::filesystem::create_directories(dir);
  const auto manifest = dir / "manifest.jsonl";
  std::ofstream out(manifest);
  if (!out) throw DataError("cannot write " + manifest.string());
  Rng rng(opt.seed);
  for (int64_t i = 0; i < opt.count; ++i) {
    const std::string& stain = opt.stains[static_cast<size_t>(i) % opt.stains.size()];
    SynthPair p = synth_pair(opt.side, stain, rng, opt.max_shift);
    char id[32];
    std::snprintf(id, sizeof(id), "syn%04ld", static_cast<long>(i));
    write_png(dir / (std::string(id) + "_hne.png"), p.hne);
    write_png(dir / (std::string(id) + "_ihc.png"), p.ihc);
    nlohmann::ordered_json j;
    j["hne"] = std::string(id) + "_hne.png";
    j["ihc"] = std::string(id) + "_ihc.png";
    j["stain"] = stain;
    j["split"] = i >= opt.count - opt.test_count ? "test" : "train";
    j["source_id"] = id;
    out << j.dump() << '\n';
  }
  return manifest;
}

}  // namespace vstain
