// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "doctest.h"
#include "test_util.hpp"
#include "vstain/errors.hpp"
#include "vstain/synth.hpp"
#include "vstain/training.hpp"

using namespace vstain;
namespace fs = std::filesystem;

namespace {

Config tiny_config() {
  Config c;
  const std::pair<const char*, const char*> kv[] = {
      {"model.resolution", "32"},        {"model.encoder_channels", "8,16,16"}, {"model.bottleneck_blocks", "1"},
      {"model.embedding_dim", "8"},      {"model.edge_channels", "4"},          {"model.head_channels", "4"},
      {"model.spade_hidden", "8"},       {"backbone.token_dim", "16"},          {"backbone.native_side", "16"},
      {"backbone.patch", "4"},           {"backbone.grid", "8"},                {"processor.channels", "8"},
      {"processor.groups", "4"},         {"processor.residual_blocks", "1"},    {"disc.channels", "8,16"},
      {"loss.percept_sides", "16"},      {"loss.percept_weights", "1.0"},       {"loss.l1_side", "8"},
      {"loss.edge_sides", "32,16"},      {"train.batch_size", "2"},             {"train.crop", "32"},
      {"train.warmup_steps", "2"},       {"train.adv_start", "3"},              {"train.log_every", "1"},
      {"train.checkpoint_every", "2"},   {"run.workers", "0"},                  {"run.seed", "5"}};
  for (const auto& [k, v] : kv) c.set_from_string(k, v);
  return c;
}

fs::path dataset_dir() {
  const fs::path dir = fs::path(VSTAIN_TEST_DIR) / "train_data";
  if (!fs::exists(dir / "manifest.jsonl")) {
    SynthOptions opt;
    opt.count = 6;
    opt.side = 48;
    opt.seed = 3;
    write_synthetic_dataset(dir, opt);
  }
  return dir;
}

std::vector<PairedSample> dataset() {
  return read_manifest(dataset_dir() / "manifest.jsonl", {"HER2", "Ki67", "ER", "PR"});
}

bool same_params(const NamedParams& a, const NamedParams& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    const Tensor &x = a[i].second.value(), &y = b[i].second.value();
    if (a[i].first != b[i].first || x.numel() != y.numel() ||
        std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<size_t>(x.numel())) != 0)
      return false;
  }
  return true;
}

NamedParams snapshot(const NamedParams& p) {
  NamedParams out;
  for (const auto& [n, v] : p) out.emplace_back(n, Var(v.value()));
  return out;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::path(VSTAIN_TEST_DIR) / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("derived generators are reproducible and distinct") {
  Rng a = derived_rng(7, 1, 3), b = derived_rng(7, 1, 3);
  CHECK(a() == b());
  CHECK(derived_rng(7, 1, 3)() != derived_rng(7, 1, 4)());
  CHECK(derived_rng(7, 0, 3)() != derived_rng(7, 1, 3)());
  CHECK(derived_rng(7, 1, 3)() != derived_rng(8, 1, 3)());
}

TEST_CASE("crop origins are uniform and both images share crop and flips") {
  const int64_t side = 12, crop = 8, n_origins = (side - crop + 1) * (side - crop + 1);
  Tensor hne(Shape{3, side, side}), ihc(Shape{3, side, side});
  for (int64_t i = 0; i < hne.numel(); ++i) {
    hne[i] = static_cast<float>(i) / static_cast<float>(hne.numel());
    ihc[i] = hne[i] * 0.5f + 0.25f;
  }
  Rng rng(1);
  std::vector<int64_t> counts(static_cast<size_t>(n_origins), 0);
  int64_t hflips = 0, vflips = 0;
  const int draws = 25000;
  for (int i = 0; i < draws; ++i) {
    const TrainingPair p = sample_training_pair(hne, ihc, 2, crop, true, rng);
    ++counts[static_cast<size_t>(p.draw.y * (side - crop + 1) + p.draw.x)];
    hflips += p.draw.hflip;
    vflips += p.draw.vflip;
    if (i < 50) {
      CHECK(p.token == 2);
      // Unit-range ihc = 0.5 * hne + 0.25 becomes ihc = 0.5 * hne in signed range,
      // which holds pixelwise only if both share crop and flips.
      for (int64_t j = 0; j < p.hne.numel(); ++j) CHECK(p.ihc[j] == doctest::Approx(0.5f * p.hne[j]).epsilon(1e-5));
    }
  }
  double chi2 = 0.0;
  const double expected = static_cast<double>(draws) / static_cast<double>(n_origins);
  for (int64_t c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 24 degrees of freedom; 51.2 is the 0.1% critical value.
  CHECK(chi2 < 51.2);
  CHECK(std::abs(static_cast<double>(hflips) / draws - 0.5) < 0.02);
  CHECK(std::abs(static_cast<double>(vflips) / draws - 0.5) < 0.02);
  CHECK_THROWS_AS(sample_training_pair(hne, ihc, 0, 13, true, rng), DataError);
  CHECK_THROWS_AS(sample_training_pair(hne, Tensor(Shape{3, 11, 12}), 0, 8, true, rng), DataError);
}

TEST_CASE("conditioning drop outcomes match their rates") {
  Rng rng(2);
  const int n = 100000;
  int cls_only = 0, uni_only = 0, both = 0;
  for (int i = 0; i < n; ++i) {
    const Drops d = sample_conditioning_drops(rng);
    cls_only += d.cls && !d.uni;
    uni_only += d.uni && !d.cls;
    both += d.cls && d.uni;
  }
  CHECK(std::abs(cls_only / static_cast<double>(n) - 0.10) < 0.01);
  CHECK(std::abs(uni_only / static_cast<double>(n) - 0.10) < 0.01);
  CHECK(std::abs(both / static_cast<double>(n) - 0.05) < 0.01);
}

TEST_CASE("unified sampler proportions") {
  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < 10; ++i) groups["HER2"].push_back(i);
  for (size_t i = 10; i < 40; ++i) groups["Ki67"].push_back(i);
  for (size_t i = 40; i < 100; ++i) groups["ER"].push_back(i);
  auto stain_of = [](size_t i) { return i < 10 ? 0 : i < 40 ? 1 : 2; };
  const int n = 100000;
  for (auto balance : {StainBalance::kProportional, StainBalance::kUniform}) {
    const UnifiedSampler s(groups, balance);
    CHECK(s.size() == 100);
    const double expect[3] = {balance == StainBalance::kUniform ? 1.0 / 3 : 0.1,
                              balance == StainBalance::kUniform ? 1.0 / 3 : 0.3,
                              balance == StainBalance::kUniform ? 1.0 / 3 : 0.6};
    CHECK(s.probability("HER2") == doctest::Approx(expect[0]));
    CHECK(s.probability("ER") == doctest::Approx(expect[2]));
    Rng rng(3);
    int counts[3] = {0, 0, 0};
    for (int i = 0; i < n; ++i) ++counts[stain_of(s.draw(rng))];
    for (int k = 0; k < 3; ++k) CHECK(std::abs(counts[k] / static_cast<double>(n) - expect[k]) < 0.02);
  }
  groups["PR"] = {};
  CHECK_THROWS_AS(UnifiedSampler(groups, StainBalance::kProportional), DataError);
}

TEST_CASE("EMA matches the closed form under constant parameters") {
  Var p(Tensor(Shape{3}, std::vector<float>{1.0f, -2.0f, 0.5f}), true);
  NamedParams params{{"p", p}};
  Ema ema(params);
  Var handle = p;
  handle.value_mut() = Tensor(Shape{3}, std::vector<float>{3.0f, 0.0f, -1.0f});
  const double decay = 0.999;
  const double init[3] = {1.0, -2.0, 0.5}, target[3] = {3.0, 0.0, -1.0};
  double worst = 0.0;
  for (int k = 1; k <= 10000; ++k) {
    ema.update(params, decay);
    if (k % 500 == 0 || k < 5)
      for (int i = 0; i < 3; ++i)
        worst = std::max(worst, std::abs(ema.shadow()[0][i] - (target[i] + (init[i] - target[i]) * std::pow(decay, k))));
  }
  CHECK(worst < 1e-9);
  Var out(Tensor(Shape{3}), true);
  ema.copy_to({{"p", out}});
  CHECK(out.value()[0] == doctest::Approx(target[0] + (init[0] - target[0]) * std::pow(decay, 10000)));
}

TEST_CASE("warmup schedule") {
  CHECK(warmup_lr(1e-4, 0, 1000) == 0.0);
  CHECK(warmup_lr(1.0, 500, 1000) == doctest::Approx(0.5));
  CHECK(warmup_lr(1.0, 1000, 1000) == 1.0);
  CHECK(warmup_lr(1.0, 5000, 1000) == 1.0);
  CHECK(warmup_lr(2.0, 3, 0) == 2.0);
}

TEST_CASE("Adam update matches the bias-corrected formula") {
  Var p(Tensor(Shape{2}, std::vector<float>{1.0f, -1.0f}), true);
  Adam opt({{"p", p}}, 0.5, 0.9, 1e-8);
  const double g1[2] = {0.2, -0.4}, g2[2] = {-0.1, 0.3};
  double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1.0, -1.0};
  int t = 0;
  for (const double* g : {g1, g2}) {
    Var h = p;
    h.grad_mut() = Tensor(Shape{2}, std::vector<float>{static_cast<float>(g[0]), static_cast<float>(g[1])});
    opt.step(0.01);
    ++t;
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.5 * m[i] + 0.5 * g[i];
      v[i] = 0.9 * v[i] + 0.1 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.5, t)), vh = v[i] / (1 - std::pow(0.9, t));
      x[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(p.value()[i] == doctest::Approx(x[i]).epsilon(1e-6));
    }
  }
  CHECK(opt.steps() == 2);
}

TEST_CASE("manifest parsing and errors") {
  const auto samples = dataset();
  REQUIRE(samples.size() == 6);
  CHECK(samples[0].stain == "HER2");
  CHECK(samples[1].token == 1);
  CHECK(fs::exists(samples[0].hne));
  CHECK(filter_split(samples, "train").size() == 6);

  const fs::path bad = fs::path(VSTAIN_TEST_DIR) / "bad_manifest.jsonl";
  auto write = [&](const std::string& text) { std::ofstream(bad) << text; };
  write(R"({"hne": "a.png", "ihc": "b.png", "stain": "HER2", "split": "train", "source_id": "x"})" "\n");
  CHECK_THROWS_WITH_AS(read_manifest(bad, {"HER2"}), doctest::Contains("bad_manifest.jsonl:1"), DataError);
  CHECK_NOTHROW(read_manifest(bad, {"HER2"}, "stain", false));
  write("\n{\"hne\": 3}\n");
  CHECK_THROWS_WITH_AS(read_manifest(bad, {"HER2"}), doctest::Contains(":2"), DataError);
  write(R"({"hne": "a.png", "ihc": "b.png", "stain": "CK5", "split": "train", "source_id": "x"})" "\n");
  CHECK_THROWS_WITH_AS(read_manifest(bad, {"HER2"}, "stain", false), doctest::Contains("CK5"), DataError);
  write(R"({"hne": "a.png", "ihc": "b.png", "stain": "HER2", "split": "val", "source_id": "x"})" "\n");
  CHECK_THROWS_AS(read_manifest(bad, {"HER2"}, "stain", false), DataError);
  write(R"({"hne": "a.png", "ihc": "b.png", "stain": "HER2", "class": 2, "split": "test", "source_id": "x"})" "\n");
  const auto by_class = read_manifest(bad, {"0", "1", "2"}, "class", false);
  CHECK(by_class[0].token == 2);
  CHECK_THROWS_AS(read_manifest(fs::path(VSTAIN_TEST_DIR) / "absent.jsonl", {"HER2"}), DataError);
}

TEST_CASE("batches are identical for any worker count") {
  const PairStore store(dataset());
  const UnifiedSampler sampler = UnifiedSampler::from_samples(store.samples(), StainBalance::kProportional);
  const ToyBackbone bb(0, 16, 16, 4);
  BatchPlan plan;
  plan.seed = 9;
  plan.batch_size = 3;
  plan.crop = 32;
  plan.grid = 8;
  std::vector<Batch> serial;
  {
    BatchLoader l(store, sampler, bb, plan, 2, 0);
    for (int i = 0; i < 5; ++i) serial.push_back(l.next());
  }
  for (int workers : {1, 3}) {
    BatchLoader l(store, sampler, bb, plan, 2, workers, 3);
    for (int i = 0; i < 5; ++i) {
      const Batch b = l.next();
      CHECK(b.index == 2 + i);
      CHECK(b.items == serial[i].items);
      CHECK(b.drop_cls == serial[i].drop_cls);
      CHECK(std::memcmp(b.hne.data(), serial[i].hne.data(), b.hne.numel() * sizeof(float)) == 0);
      CHECK(std::memcmp(b.tokens.data(), serial[i].tokens.data(), b.tokens.numel() * sizeof(float)) == 0);
    }
  }
  const Batch direct = make_batch(store, sampler, bb, plan, 4);
  CHECK(std::memcmp(direct.ihc.data(), serial[2].ihc.data(), direct.ihc.numel() * sizeof(float)) == 0);
  CHECK(direct.hne.shape() == Shape{3, 3, 32, 32});
  CHECK(direct.tokens.shape() == Shape{3, 16, 8, 8});
  for (float v : direct.hne.span()) CHECK((v >= -1.0f && v <= 1.0f));
}

TEST_CASE("discriminator is untouched before the adversarial start") {
  Config c = tiny_config();
  c.set_from_string("train.checkpoint_every", "0");
  Trainer t(c);
  const NamedParams d0 = snapshot(t.discriminator().parameters());
  const PairStore store(dataset());
  const fs::path out = fresh_dir("adv_delay");
  t.run(store, out, 3);
  CHECK(same_params(d0, t.discriminator().parameters()));
  t.run(store, out, 4);
  CHECK_FALSE(same_params(d0, t.discriminator().parameters()));
  const auto log = read_loss_log(out / "loss_log.jsonl");
  REQUIRE(log.size() == 4);
  CHECK(log[0].step == 0);
  CHECK(log[3].step == 3);
}

TEST_CASE("step zero has zero learning rate and leaves the generator unchanged") {
  Trainer t(tiny_config());
  const NamedParams g0 = snapshot(t.net().parameters());
  const PairStore store(dataset());
  const auto sampler = UnifiedSampler::from_samples(store.samples(), StainBalance::kProportional);
  const StepStats st = t.step(make_batch(store, sampler, t.backbone(), t.batch_plan(), 0));
  CHECK(st.lr_g == 0.0);
  CHECK_FALSE(st.d_updated);
  CHECK(same_params(g0, t.net().parameters()));
  const StepStats st1 = t.step(make_batch(store, sampler, t.backbone(), t.batch_plan(), 1));
  CHECK(st1.lr_g == doctest::Approx(0.5e-4));
  CHECK_FALSE(same_params(g0, t.net().parameters()));
}

TEST_CASE("every generator-side parameter receives gradient") {
  // Adam moves a tensor only where its accumulated gradient is nonzero.
  Trainer t(tiny_config());
  const NamedParams g0 = snapshot(t.net().parameters());
  const PairStore store(dataset());
  const auto sampler = UnifiedSampler::from_samples(store.samples(), StainBalance::kProportional);
  for (int64_t b = 0; b < 6; ++b) t.step(make_batch(store, sampler, t.backbone(), t.batch_plan(), b));
  const NamedParams g1 = t.net().parameters();
  REQUIRE(g0.size() == g1.size());
  for (size_t i = 0; i < g0.size(); ++i) {
    const Tensor &a = g0[i].second.value(), &b = g1[i].second.value();
    bool moved = false;
    for (int64_t k = 0; k < a.numel() && !moved; ++k) moved = a[k] != b[k];
    INFO(g0[i].first);
    CHECK(moved);
  }
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run bitwise") {
  const PairStore store(dataset());
  Trainer full(tiny_config());
  const fs::path a = fresh_dir("resume_a");
  full.run(store, a, 5);
  REQUIRE(fs::exists(a / "step_2.ckpt"));
  REQUIRE(fs::exists(a / "step_4.ckpt"));

  Trainer resumed(tiny_config());
  resumed.load_checkpoint(a / "step_2.ckpt");
  CHECK(resumed.current_step() == 2);
  CHECK(resumed.next_batch() == 2);
  resumed.run(store, fresh_dir("resume_b"), 5);
  CHECK(same_params(full.net().parameters(), resumed.net().parameters()));
  CHECK(same_params(full.discriminator().parameters(), resumed.discriminator().parameters()));
  bool ema_equal = true;
  for (size_t i = 0; i < full.ema().shadow().size(); ++i) ema_equal = ema_equal && full.ema().shadow()[i] == resumed.ema().shadow()[i];
  CHECK(ema_equal);

  const auto header = read_checkpoint_header(a / "final.ckpt");
  CHECK(header.at("step") == 5);
  CHECK(header.at("inference_weights") == "ema");
  const InferenceModel im = load_inference_model(a / "final.ckpt");
  CHECK(im.step == 5);
  CHECK(im.weights == "ema");
  const auto ema_net = full.ema_model();
  CHECK(same_params(im.net->parameters(), ema_net->parameters()));
}

TEST_CASE("corrupt and truncated checkpoints are rejected") {
  Trainer t(tiny_config());
  const fs::path dir = fresh_dir("corrupt");
  t.save_checkpoint(dir / "ok.ckpt");
  CHECK_NOTHROW(t.load_checkpoint(dir / "ok.ckpt"));
  fs::copy_file(dir / "ok.ckpt", dir / "short.ckpt");
  fs::resize_file(dir / "short.ckpt", fs::file_size(dir / "ok.ckpt") / 2);
  CHECK_THROWS_WITH_AS(t.load_checkpoint(dir / "short.ckpt"), doctest::Contains("truncated"), DataError);
  fs::copy_file(dir / "ok.ckpt", dir / "flip.ckpt");
  {
    std::fstream f(dir / "flip.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(fs::file_size(dir / "ok.ckpt") - 64));
    f.put('\x5a');
  }
  CHECK_THROWS_WITH_AS(t.load_checkpoint(dir / "flip.ckpt"), doctest::Contains("crc"), DataError);
  std::ofstream(dir / "junk.ckpt") << "definitely not a checkpoint";
  CHECK_THROWS_AS(t.load_checkpoint(dir / "junk.ckpt"), DataError);
}

TEST_CASE("trainer rejects inconsistent settings") {
  Config c = tiny_config();
  c.set_from_string("train.crop", "24");
  CHECK_THROWS_AS(Trainer{c}, ConfigError);
  c = tiny_config();
  c.set_from_string("loss.l1_side", "5");
  CHECK_THROWS_AS(Trainer{c}, ConfigError);
  c = tiny_config();
  c.set_from_string("data.tokens", "A,B,C,D,E");
  CHECK_THROWS_AS(Trainer{c}, ConfigError);
}
