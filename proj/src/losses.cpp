// SPDX-License-Identifier: Apache-2.0
#include "vstain/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"
#include "vstain/errors.hpp"
#include "vstain/generator.hpp"

namespace vstain {

Var PerceptualExtractor::distance(const Var& a, const Var& b) const {
  const auto fa = features(a);
  const auto fb = features(b);
  if (fa.size() != fb.size() || fa.empty()) throw std::logic_error("perceptual extractor returned mismatched layers");
  Var total;
  for (size_t l = 0; l < fa.size(); ++l) {
    const Var& x = fa[l];
    const double positions = static_cast<double>(x.dim(0) * x.dim(2) * x.dim(3));
    Var d = scale(sum(square(sub(channel_normalize(x), channel_normalize(fb[l])))), static_cast<float>(1.0 / positions));
    total = total.defined() ? add(total, d) : d;
  }
  return total;
}

RandomConvExtractor::RandomConvExtractor(uint64_t seed) {
  Rng rng(seed);
  const int64_t chans[4] = {3, 8, 16, 16};
  const int strides[3] = {1, 2, 2};
  for (int l = 0; l < 3; ++l) {
    Tensor w(Shape{chans[l + 1], chans[l], 3, 3});
    init_tensor(w, Init::kNormal, 0, rng, std::sqrt(2.0 / static_cast<double>(chans[l] * 9)));
    weights_.emplace_back(std::move(w), false);
    geoms_.push_back(ConvGeom{strides[l], 1});
  }
}

std::vector<Var> RandomConvExtractor::features(const Var& img) const {
  std::vector<Var> out;
  Var h = img;
  for (size_t l = 0; l < weights_.size(); ++l) {
    h = relu(conv2d(h, weights_[l], Var(), geoms_[l]));
    out.push_back(h);
  }
  return out;
}

Var perceptual_loss(const Var& gen, const Var& target, const PerceptualExtractor& extractor,
                    const std::vector<int64_t>& sides, const std::vector<double>& weights) {
  if (gen.shape() != target.shape()) throw std::invalid_argument("perceptual_loss: shape mismatch");
  if (sides.size() != weights.size() || sides.empty())
    throw std::invalid_argument("perceptual_loss: sides and weights must be non-empty and equally long");
  Var total;
  for (size_t i = 0; i < sides.size(); ++i) {
    Var d = extractor.distance(resize_bilinear(gen, sides[i], sides[i]), resize_bilinear(target, sides[i], sides[i]));
    d = scale(d, static_cast<float>(weights[i]));
    total = total.defined() ? add(total, d) : d;
  }
  return total;
}

Var area_downsample(const Var& x, int64_t side) {
  const int64_t h = x.dim(2);
  if (side == h && x.dim(3) == h) return x;
  if (x.dim(3) != h || side <= 0 || h % side != 0)
    throw std::invalid_argument("area_downsample: cannot reduce " + shape_str(x.shape()) + " to side " +
                                std::to_string(side));
  return avg_pool2d(x, static_cast<int>(h / side));
}

Var l1_at(const Var& gen, const Var& target, int64_t side) {
  if (gen.shape() != target.shape()) throw std::invalid_argument("l1: shape mismatch");
  return mean(abs(sub(area_downsample(gen, side), area_downsample(target, side))));
}

Var edge_loss(const Var& gen, const Var& hne, const std::vector<int64_t>& sides) {
  if (gen.shape() != hne.shape()) throw std::invalid_argument("edge_loss: shape mismatch");
  Var total;
  for (int64_t s : sides) {
    Var d = mean(abs(sub(sobel_gradients(area_downsample(gen, s)), sobel_gradients(area_downsample(hne, s)))));
    total = total.defined() ? add(total, d) : d;
  }
  return total;
}

double LossBundle::component(const std::string& name) const {
  for (const auto& [k, v] : components)
    if (k == name) return v;
  throw std::out_of_range("no loss component named " + name);
}

LossBundle total_generator_loss(const LossTerms& t, const LossWeights& w, int64_t step, int64_t adv_start) {
  const bool adversarial = step >= adv_start;
  const std::pair<const char*, std::pair<const Var*, double>> parts[] = {
      {"percept", {&t.percept, w.percept}}, {"l1", {&t.l1, w.l1}},
      {"edge", {&t.edge, w.edge}},          {"adv", {&t.adv, adversarial ? w.adv : 0.0}},
      {"fm", {&t.fm, adversarial ? w.fm : 0.0}}, {"dab", {&t.dab, w.dab}}};
  LossBundle b;
  for (const auto& [name, term] : parts) {
    const Var& v = *term.first;
    const double value = v.defined() ? static_cast<double>(v.item()) : 0.0;
    if (!std::isfinite(value)) throw NumericError(std::string("non-finite loss component '") + name + "'");
    b.components.emplace_back(name, value);
    b.total += term.second * value;
    if (v.defined() && term.second != 0.0) {
      Var weighted = scale(v, static_cast<float>(term.second));
      b.total_var = b.total_var.defined() ? add(b.total_var, weighted) : weighted;
    }
  }
  if (!b.total_var.defined()) b.total_var = Var(Tensor::scalar(0.0f));
  return b;
}

LossLog::LossLog(const std::filesystem::path& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot open loss log " + path.string());
}

void LossLog::write(int64_t step, const LossBundle& bundle, const std::vector<std::pair<std::string, double>>& extra) {
  nlohmann::ordered_json j;
  j["step"] = step;
  for (const auto& [k, v] : bundle.components) j[k] = v;
  j["total"] = bundle.total;
  for (const auto& [k, v] : extra) j[k] = v;
  out_ << j.dump() << '\n';
  out_.flush();
}

std::vector<LossRecord> read_loss_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open loss log " + path.string());
  std::vector<LossRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::ordered_json::parse(line);
    LossRecord r;
    r.step = j.at("step").get<int64_t>();
    for (const auto& [k, v] : j.items())
      if (k != "step" && v.is_number()) r.values.emplace_back(k, v.get<double>());
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace vstain
