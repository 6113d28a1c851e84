// SPDX-License-Identifier: Apache-2.0
#include "vstain/generator.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace vstain {
namespace {

constexpr float kSlope = 0.2f;

Var lrelu(const Var& x) { return leaky_relu(x, kSlope); }

/// Zeroes samples whose flag is set; returns x unchanged when none are.
Var mask_samples(const Var& x, const std::vector<bool>& drop) {
  bool any = false;
  for (bool d : drop) any = any || d;
  if (!any) return x;
  Tensor m(x.shape(), 1.0f);
  const int64_t per = x.numel() / x.dim(0);
  for (size_t s = 0; s < drop.size(); ++s)
    if (drop[s]) std::fill_n(m.data() + static_cast<int64_t>(s) * per, per, 0.0f);
  return mul_const(x, m);
}

}  // namespace

void GeneratorConfig::validate() const {
  if (encoder_channels.empty()) throw std::invalid_argument("generator: encoder_channels must not be empty");
  if (resolution <= 0 || (resolution % (int64_t{1} << depth())) != 0)
    throw std::invalid_argument("generator: resolution " + std::to_string(resolution) + " not divisible by 2^" +
                                std::to_string(depth()));
  if (num_cond_scales < 1 || num_cond_scales > depth() - 1)
    throw std::invalid_argument("generator: num_cond_scales must be in [1, depth-1]");
  if (num_classes < 1) throw std::invalid_argument("generator: num_classes must be positive");
  if (embedding_dim < 1 || cond_channels < 1 || head_channels < 1 || edge_channels < 1 || spade_hidden < 1)
    throw std::invalid_argument("generator: channel counts must be positive");
}

GeneratorConfig build_1024_variant(const GeneratorConfig& cfg) {
  cfg.validate();
  GeneratorConfig out = cfg;
  out.resolution = cfg.resolution * 2;
  out.encoder_channels.insert(out.encoder_channels.begin(), cfg.head_channels);
  out.head_channels = std::max<int64_t>(cfg.head_channels / 2, 1);
  return out;
}

Var sobel_gradients(const Var& img) {
  require_rank(img.value(), 4, "sobel_gradients");
  if (img.dim(1) != 3) throw std::invalid_argument("sobel_gradients expects 3 channels");
  Tensor lw(Shape{1, 3, 1, 1}, std::vector<float>{0.299f, 0.587f, 0.114f});
  Var lum = conv2d(img, Var(lw), Var(), ConvGeom{1, 0});
  Tensor k(Shape{2, 1, 3, 3}, std::vector<float>{-1, 0, 1, -2, 0, 2, -1, 0, 1,  //
                                                  -1, -2, -1, 0, 0, 0, 1, 2, 1});
  return conv2d(pad_replicate(lum, 1), Var(k), Var(), ConvGeom{1, 0});
}

SpadeFilm::SpadeFilm(int64_t c, int64_t cond_channels, int64_t hidden, int64_t embedding_dim, Rng& rng)
    : shared(cond_channels, hidden, 3, 1, 1, false, rng, Init::kNormal),
      gamma(hidden, c, 3, 1, 1, false, rng, Init::kZero),
      beta(hidden, c, 3, 1, 1, false, rng, Init::kZero),
      film(embedding_dim, 2 * c, true, rng, Init::kZero),
      channels(c) {
  add_child("shared", shared);
  add_child("gamma", gamma);
  add_child("beta", beta);
  add_child("film", film);
  Tensor& b = film.bias.value_mut();
  for (int64_t i = 0; i < c; ++i) b[i] = 1.0f;
}

Var SpadeFilm::forward(const Var& h, const Var& u, const Var& e) const {
  if (u.dim(2) != h.dim(2) || u.dim(3) != h.dim(3))
    throw std::invalid_argument("SPADE: conditioning map " + shape_str(u.shape()) + " does not match features " +
                                shape_str(h.shape()));
  Var hn = instance_norm(h);
  Var a = lrelu(shared.forward(u));
  Var gu = gamma.forward(a), bu = beta.forward(a);
  Var fc = film.forward(e);
  Var gc = slice_channels(fc, 0, channels), bc = slice_channels(fc, channels, 2 * channels);
  return add(vstain::film(hn, gc, bc), add(mul(gu, hn), bu));
}

EdgeEncoder::EdgeEncoder(const std::vector<int64_t>& s, int64_t c, Rng& rng) : sides(s), channels(c) {
  for (size_t i = 0; i < sides.size(); ++i) {
    convs.push_back(std::make_unique<Conv2d>(5, c, 3, 1, 1, true, rng));
    convs.push_back(std::make_unique<Conv2d>(c, c, 3, 1, 1, true, rng));
    add_child(std::to_string(i) + ".0", *convs[2 * i]);
    add_child(std::to_string(i) + ".1", *convs[2 * i + 1]);
  }
}

std::vector<Var> EdgeEncoder::forward(const Var& img) const {
  Var x = concat_channels({img, sobel_gradients(img)});
  std::vector<Var> out;
  for (size_t i = 0; i < sides.size(); ++i) {
    const int64_t factor = img.dim(2) / sides[i];
    Var xi = avg_pool2d(x, static_cast<int>(factor));
    out.push_back(lrelu(convs[2 * i + 1]->forward(lrelu(convs[2 * i]->forward(xi)))));
  }
  return out;
}

ResBlock::ResBlock(int64_t c, Rng& rng) : conv1(c, c, 3, 1, 1, true, rng), conv2(c, c, 3, 1, 1, true, rng) {
  add_child("conv1", conv1);
  add_child("conv2", conv2);
}

Var ResBlock::forward(const Var& x) const {
  Var h = conv1.forward(lrelu(instance_norm(x)));
  h = conv2.forward(lrelu(instance_norm(h)));
  return add(x, h);
}

SelfAttention::SelfAttention(int64_t c, Rng& rng)
    : query(c, std::max<int64_t>(c / 8, 1), 1, 1, 0, true, rng),
      key(c, std::max<int64_t>(c / 8, 1), 1, 1, 0, true, rng),
      value(c, c, 1, 1, 0, true, rng),
      out(c, c, 1, 1, 0, true, rng),
      key_channels(std::max<int64_t>(c / 8, 1)) {
  add_child("query", query);
  add_child("key", key);
  add_child("value", value);
  add_child("out", out);
}

Var SelfAttention::forward(const Var& x) const {
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), t = h * w;
  Var q = reshape(query.forward(x), {n, key_channels, t});
  Var k = reshape(key.forward(x), {n, key_channels, t});
  Var v = reshape(value.forward(x), {n, c, t});
  Var scores = scale(bmm(q, k, true, false), 1.0f / std::sqrt(static_cast<float>(key_channels)));
  Var attn = softmax_lastdim(scores);  // [n, query, key]
  Var mixed = reshape(bmm(v, attn, false, true), {n, c, h, w});
  return add(x, out.forward(mixed));
}

Generator::Generator(const GeneratorConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int depth = cfg_.depth();
  Tensor table(Shape{cfg_.num_classes + 1, cfg_.embedding_dim});
  init_tensor(table, Init::kNormal, 0, rng, 1.0);
  embedding = add_parameter("embedding", std::move(table));

  int64_t prev = cfg_.in_channels;
  for (int i = 0; i < depth; ++i) {
    encoder.push_back(std::make_unique<Conv2d>(prev, cfg_.encoder_channels[i], 4, 2, 1, true, rng));
    add_child("encoder." + std::to_string(i), *encoder.back());
    prev = cfg_.encoder_channels[i];
  }
  for (int i = 0; i < cfg_.bottleneck_blocks; ++i) {
    bottleneck.push_back(std::make_unique<ResBlock>(prev, rng));
    add_child("bottleneck." + std::to_string(i), *bottleneck.back());
  }
  if (cfg_.attention) {
    attention = std::make_unique<SelfAttention>(prev, rng);
    add_child("attention", *attention);
  }
  std::vector<int64_t> sides;
  for (int j = 0; j < depth; ++j) sides.push_back(cfg_.stage_side(j));
  edges = std::make_unique<EdgeEncoder>(sides, cfg_.edge_channels, rng);
  add_child("edges", *edges);

  for (int j = 0; j < depth; ++j) {
    const bool head = j == depth - 1;
    const int64_t skip = head ? 0 : cfg_.encoder_channels[depth - 2 - j];
    const int64_t ch = head ? cfg_.head_channels : skip;
    reduce.push_back(std::make_unique<Conv2d>(prev + skip + cfg_.edge_channels, ch, 3, 1, 1, true, rng));
    add_child("decoder." + std::to_string(j) + ".reduce", *reduce.back());
    if (j < cfg_.num_cond_scales) {
      spade.push_back(std::make_unique<SpadeFilm>(ch, cfg_.cond_channels, std::min(cfg_.spade_hidden, ch),
                                                  cfg_.embedding_dim, rng));
      add_child("decoder." + std::to_string(j) + ".spade", *spade.back());
    }
    prev = ch;
  }
  output = std::make_unique<Conv2d>(prev + cfg_.in_channels, 3, 3, 1, 1, true, rng);
  add_child("output", *output);
}

Var Generator::forward(const Var& hne, const Conditioning& cond) const {
  require_rank(hne.value(), 4, "generator input");
  const int64_t n = hne.dim(0);
  if (hne.dim(1) != cfg_.in_channels || hne.dim(2) != cfg_.resolution || hne.dim(3) != cfg_.resolution)
    throw std::invalid_argument("generator: input " + shape_str(hne.shape()) + " does not match resolution " +
                                std::to_string(cfg_.resolution));
  if (static_cast<int>(cond.maps.size()) != cfg_.num_cond_scales)
    throw std::invalid_argument("generator: expected " + std::to_string(cfg_.num_cond_scales) +
                                " conditioning maps, got " + std::to_string(cond.maps.size()));
  if (static_cast<int64_t>(cond.tokens.size()) != n || static_cast<int64_t>(cond.drop_uni.size()) != n ||
      static_cast<int64_t>(cond.drop_cls.size()) != n)
    throw std::invalid_argument("generator: conditioning batch size does not match input");

  std::vector<int> tokens = cond.tokens;
  for (int64_t s = 0; s < n; ++s) {
    if (tokens[s] < 0 || tokens[s] > cfg_.null_index())
      throw std::out_of_range("generator: token " + std::to_string(tokens[s]) + " outside [0, " +
                              std::to_string(cfg_.null_index()) + "]");
    if (cond.drop_cls[s]) tokens[s] = cfg_.null_index();
  }
  Var e = vstain::embedding(embedding, tokens);

  const int depth = cfg_.depth();
  std::vector<Var> skips;
  Var x = hne;
  for (int i = 0; i < depth; ++i) {
    x = encoder[i]->forward(x);
    if (i > 0) x = instance_norm(x);
    x = lrelu(x);
    skips.push_back(x);
  }
  for (size_t i = 0; i < bottleneck.size(); ++i) {
    x = bottleneck[i]->forward(x);
    if (attention && i + 1 == (bottleneck.size() + 1) / 2) x = attention->forward(x);
  }
  if (attention && bottleneck.empty()) x = attention->forward(x);

  std::vector<Var> edge_maps;
  if (cfg_.edge_encoder) {
    edge_maps = edges->forward(hne);
  } else {
    for (int j = 0; j < depth; ++j) {
      const int64_t s = cfg_.stage_side(j);
      edge_maps.emplace_back(Tensor(Shape{n, cfg_.edge_channels, s, s}, 0.0f));
    }
  }

  for (int j = 0; j < depth; ++j) {
    const bool head = j == depth - 1;
    std::vector<Var> parts{upsample_nearest2d(x, 2)};
    if (!head) parts.push_back(skips[depth - 2 - j]);
    parts.push_back(edge_maps[j]);
    Var h = reduce[j]->forward(concat_channels(parts));
    if (j < cfg_.num_cond_scales) {
      const Var& u = cond.maps[j];
      if (u.dim(0) != n || u.dim(1) != cfg_.cond_channels)
        throw std::invalid_argument("generator: conditioning map " + shape_str(u.shape()) + " has wrong batch or channels");
      h = spade[j]->forward(h, mask_samples(u, cond.drop_uni), e);
    } else {
      h = instance_norm(h);
    }
    x = lrelu(h);
  }
  return tanh(output->forward(concat_channels({x, hne})));
}

}  // namespace vstain
