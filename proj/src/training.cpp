// SPDX-License-Identifier: Apache-2.0
#include "vstain/training.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>

#include "vstain/errors.hpp"
#include "vstain/image_io.hpp"

namespace vstain {

namespace fs = std::filesystem;

std::vector<PairedSample> read_manifest(const fs::path& path, const std::vector<std::string>& tokens,
                                        const std::string& token_field, bool require_files) {
  if (token_field != "stain" && token_field != "class") throw ConfigError("data.token_field must be stain or class");
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  std::vector<PairedSample> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw DataError(where + ": " + e.what());
    }
    PairedSample s;
    try {
      s.hne = base / j.at("hne").get<std::string>();
      s.ihc = base / j.at("ihc").get<std::string>();
      s.stain = j.at("stain").get<std::string>();
      if (j.contains("class") && !j["class"].is_null())
        s.cls = j["class"].is_string() ? j["class"].get<std::string>() : j["class"].dump();
      s.split = j.at("split").get<std::string>();
      s.source_id = j.at("source_id").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
    if (s.split != "train" && s.split != "test") throw DataError(where + ": split must be train or test");
    for (const auto& p : {s.hne, s.ihc})
      if (require_files && !fs::exists(p)) throw DataError(where + ": missing image " + p.string());
    const std::string key = token_field == "stain" ? s.stain : s.cls.value_or("");
    auto it = std::find(tokens.begin(), tokens.end(), key);
    if (it == tokens.end()) throw DataError(where + ": '" + key + "' is not one of data.tokens");
    s.token = static_cast<int>(it - tokens.begin());
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<PairedSample> filter_split(const std::vector<PairedSample>& samples, const std::string& split) {
  std::vector<PairedSample> out;
  std::copy_if(samples.begin(), samples.end(), std::back_inserter(out), [&](const auto& s) { return s.split == split; });
  return out;
}

Rng derived_rng(uint64_t seed, uint64_t stream, uint64_t index) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(stream),
                    static_cast<uint32_t>(index), static_cast<uint32_t>(index >> 32)};
  return Rng(seq);
}

TrainingPair sample_training_pair(const Tensor& hne, const Tensor& ihc, int token, int64_t crop_side, bool flips, Rng& rng) {
  if (hne.rank() != 3 || hne.dim(0) != 3 || hne.shape() != ihc.shape())
    throw DataError("paired images must both be [3,H,W] with equal size, got " + shape_str(hne.shape()) + " and " +
                    shape_str(ihc.shape()));
  if (hne.dim(1) < crop_side || hne.dim(2) < crop_side)
    throw DataError("source image " + shape_str(hne.shape()) + " is smaller than the crop " + std::to_string(crop_side));
  TrainingPair p;
  p.token = token;
  p.draw.y = std::uniform_int_distribution<int64_t>(0, hne.dim(1) - crop_side)(rng);
  p.draw.x = std::uniform_int_distribution<int64_t>(0, hne.dim(2) - crop_side)(rng);
  if (flips) {
    std::bernoulli_distribution coin(0.5);
    p.draw.hflip = coin(rng);
    p.draw.vflip = coin(rng);
  }
  auto take = [&](const Tensor& img) {
    Tensor c = crop(img, p.draw.y, p.draw.x, crop_side, crop_side);
    if (p.draw.hflip) c = flip_horizontal(c);
    if (p.draw.vflip) c = flip_vertical(c);
    return to_signed(c);
  };
  p.hne = take(hne);
  p.ihc = take(ihc);
  return p;
}

Drops sample_conditioning_drops(Rng& rng, const DropRates& r) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (u < r.cls) return {true, false};
  if (u < r.cls + r.uni) return {false, true};
  if (u < r.cls + r.uni + r.both) return {true, true};
  return {false, false};
}

UnifiedSampler::UnifiedSampler(std::map<std::string, std::vector<size_t>> groups, StainBalance balance) : balance_(balance) {
  if (groups.empty()) throw DataError("no training samples");
  for (auto& [name, items] : groups) {
    if (items.empty()) throw DataError("stain '" + name + "' has no training samples");
    for (size_t i = 0; i < items.size(); ++i) items_.emplace_back(names_.size(), i);
    names_.push_back(name);
    groups_.push_back(std::move(items));
  }
}

UnifiedSampler UnifiedSampler::from_samples(const std::vector<PairedSample>& samples, StainBalance balance) {
  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < samples.size(); ++i) groups[samples[i].stain].push_back(i);
  return UnifiedSampler(std::move(groups), balance);
}

size_t UnifiedSampler::draw(Rng& rng) const {
  if (balance_ == StainBalance::kProportional) {
    const auto [g, i] = items_[std::uniform_int_distribution<size_t>(0, items_.size() - 1)(rng)];
    return groups_[g][i];
  }
  const auto& group = groups_[std::uniform_int_distribution<size_t>(0, groups_.size() - 1)(rng)];
  return group[std::uniform_int_distribution<size_t>(0, group.size() - 1)(rng)];
}

double UnifiedSampler::probability(const std::string& stain) const {
  auto it = std::find(names_.begin(), names_.end(), stain);
  if (it == names_.end()) return 0.0;
  const size_t g = static_cast<size_t>(it - names_.begin());
  return balance_ == StainBalance::kUniform ? 1.0 / static_cast<double>(groups_.size())
                                            : static_cast<double>(groups_[g].size()) / static_cast<double>(items_.size());
}

PairStore::PairStore(std::vector<PairedSample> samples) : samples_(std::move(samples)), cache_(samples_.size()) {}

std::pair<std::shared_ptr<const Tensor>, std::shared_ptr<const Tensor>> PairStore::load(size_t i) const {
  {
    std::lock_guard lock(mu_);
    if (cache_.at(i).first) return cache_[i];
  }
  auto hne = std::make_shared<const Tensor>(read_png(samples_[i].hne));
  auto ihc = std::make_shared<const Tensor>(read_png(samples_[i].ihc));
  if (hne->shape() != ihc->shape())
    throw DataError("pair " + samples_[i].source_id + ": H&E " + shape_str(hne->shape()) + " and IHC " +
                    shape_str(ihc->shape()) + " differ in size");
  std::lock_guard lock(mu_);
  if (!cache_[i].first) cache_[i] = {hne, ihc};
  return cache_[i];
}

Batch make_batch(const PairStore& store, const UnifiedSampler& sampler, const Backbone& backbone, const BatchPlan& plan,
                 int64_t index) {
  Rng rng = derived_rng(plan.seed, 1, static_cast<uint64_t>(index));
  Batch b;
  b.index = index;
  std::vector<Tensor> hne, ihc;
  for (int64_t s = 0; s < plan.batch_size; ++s) {
    const size_t item = sampler.draw(rng);
    const auto [h, i] = store.load(item);
    TrainingPair p = sample_training_pair(*h, *i, store.samples()[item].token, plan.crop, plan.flips, rng);
    const Drops d = sample_conditioning_drops(rng, plan.drops);
    hne.push_back(std::move(p.hne));
    ihc.push_back(std::move(p.ihc));
    b.ids.push_back(p.token);
    b.drop_cls.push_back(d.cls);
    b.drop_uni.push_back(d.uni);
    b.items.push_back(item);
    b.draws.push_back(p.draw);
  }
  b.hne = Tensor::stack_batch(hne);
  b.ihc = Tensor::stack_batch(ihc);
  Tensor unit = b.hne;
  for (auto& v : unit.span()) v = 0.5f * (v + 1.0f);
  b.tokens = extract_subcrop_tokens(unit, backbone, plan.grid);
  return b;
}

BatchLoader::BatchLoader(const PairStore& store, const UnifiedSampler& sampler, const Backbone& backbone, BatchPlan plan,
                         int64_t first, int workers, int64_t lookahead)
    : store_(store),
      sampler_(sampler),
      backbone_(backbone),
      plan_(plan),
      next_out_(first),
      next_claim_(first),
      lookahead_(std::max<int64_t>(lookahead, 1)) {
  for (int w = 0; w < workers; ++w) threads_.emplace_back([this] { work(); });
}

BatchLoader::~BatchLoader() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void BatchLoader::work() {
  for (;;) {
    int64_t index;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return stop_ || next_claim_ < next_out_ + lookahead_; });
      if (stop_) return;
      index = next_claim_++;
    }
    try {
      Batch b = make_batch(store_, sampler_, backbone_, plan_, index);
      std::lock_guard lock(mu_);
      ready_.emplace(index, std::move(b));
    } catch (...) {
      std::lock_guard lock(mu_);
      if (!error_) error_ = std::current_exception();
    }
    cv_.notify_all();
  }
}

Batch BatchLoader::next() {
  if (threads_.empty()) return make_batch(store_, sampler_, backbone_, plan_, next_out_++);
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return error_ || ready_.count(next_out_); });
  if (error_) std::rethrow_exception(error_);
  Batch b = std::move(ready_.at(next_out_));
  ready_.erase(next_out_++);
  lock.unlock();
  cv_.notify_all();
  return b;
}

Adam::Adam(NamedParams params, double beta1, double beta2, double eps)
    : params_(std::move(params)), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Var& p = params_[i].second;
    const Tensor& g = p.grad();
    if (!g.defined()) continue;
    Tensor& w = p.value_mut();
    float* m = m_[i].data();
    float* v = v_[i].data();
    const int64_t n = w.numel();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (int64_t j = 0; j < n; ++j) {
      const double gj = g[j];
      m[j] = static_cast<float>(b1_ * m[j] + (1.0 - b1_) * gj);
      v[j] = static_cast<float>(b2_ * v[j] + (1.0 - b2_) * gj * gj);
      const double mh = m[j] / c1, vh = v[j] / c2;
      w[j] = static_cast<float>(w[j] - lr * mh / (std::sqrt(vh) + eps_));
    }
    p.zero_grad();
  }
}

double warmup_lr(double nominal, int64_t step, int64_t warmup) {
  if (warmup <= 0) return nominal;
  return nominal * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup));
}

Ema::Ema(const NamedParams& params) {
  for (const auto& [name, p] : params) {
    names_.push_back(name);
    shadow_.emplace_back(p.value().values().begin(), p.value().values().end());
  }
}

void Ema::update(const NamedParams& params, double decay) {
  if (params.size() != shadow_.size()) throw std::logic_error("EMA parameter list changed");
  for (size_t i = 0; i < params.size(); ++i) {
    const Tensor& v = params[i].second.value();
    auto& s = shadow_[i];
    for (int64_t j = 0; j < v.numel(); ++j) s[j] = decay * s[j] + (1.0 - decay) * static_cast<double>(v[j]);
  }
}

void Ema::copy_to(const NamedParams& params) const {
  for (const auto& [name, p] : params) {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw DataError("EMA shadow has no parameter " + name);
    const auto& s = shadow_[static_cast<size_t>(it - names_.begin())];
    Var handle = p;  // shares storage with the parameter
    Tensor& v = handle.value_mut();
    if (static_cast<int64_t>(s.size()) != v.numel()) throw DataError("EMA shadow size mismatch for " + name);
    for (int64_t j = 0; j < v.numel(); ++j) v[j] = static_cast<float>(s[j]);
  }
}

Trainer::Trainer(const Config& cfg)
    : cfg_(cfg),
      mcfg_(model_config_from(cfg)),
      scfg_(stain_config_from(cfg)),
      weights_(loss_weights_from(cfg)),
      seed_(static_cast<uint64_t>(cfg.get_int("run.seed"))) {
  const int64_t r = mcfg_.generator.resolution;
  if (cfg.get_int("train.crop") != r)
    throw ConfigError("train.crop (" + std::to_string(cfg.get_int("train.crop")) + ") must equal the generator resolution (" +
                      std::to_string(r) + ")");
  if (static_cast<int64_t>(cfg.get_string_list("data.tokens").size()) > mcfg_.generator.num_classes)
    throw ConfigError("data.tokens lists more entries than model.num_classes");
  for (auto s : cfg.get_int_list("loss.percept_sides"))
    if (s < 8 || s > r) throw ConfigError("loss.percept_sides entries must lie in [8, resolution]");
  if (cfg.get_int_list("loss.percept_sides").size() != cfg.get_double_list("loss.percept_weights").size())
    throw ConfigError("loss.percept_sides and loss.percept_weights differ in length");
  for (auto s : cfg.get_int_list("loss.edge_sides"))
    if (s < 3 || r % s != 0) throw ConfigError("loss.edge_sides entries must divide the resolution");
  if (cfg.get_int("loss.l1_side") < 1 || r % cfg.get_int("loss.l1_side") != 0)
    throw ConfigError("loss.l1_side must divide the resolution");
  if (cfg.get_double("train.lr_d") <= cfg.get_double("train.lr_g"))
    std::cerr << "warning: train.lr_d <= train.lr_g (two-timescale rule expects a faster discriminator)\n";
  if (cfg.get_int("train.batch_size") < 1) throw ConfigError("train.batch_size must be positive");

  Rng rng = derived_rng(seed_, 0, 0);
  backbone_ = make_backbone(cfg);
  extractor_ = std::make_unique<RandomConvExtractor>(static_cast<uint64_t>(cfg.get_int("loss.extractor_seed")));
  net_ = std::make_unique<StainNet>(mcfg_, rng);
  disc_ = std::make_unique<Discriminator>(mcfg_.discriminator, rng);
  const double b1 = cfg.get_double("train.beta1"), b2 = cfg.get_double("train.beta2"), eps = cfg.get_double("train.adam_eps");
  opt_g_ = std::make_unique<Adam>(net_->parameters(), b1, b2, eps);
  opt_d_ = std::make_unique<Adam>(disc_->parameters(), b1, b2, eps);
  ema_ = std::make_unique<Ema>(net_->parameters());
}

BatchPlan Trainer::batch_plan() const {
  BatchPlan p;
  p.seed = seed_;
  p.batch_size = cfg_.get_int("train.batch_size");
  p.crop = cfg_.get_int("train.crop");
  p.grid = mcfg_.token_grid;
  p.flips = cfg_.get_bool("train.flips");
  p.drops = {cfg_.get_double("train.drop_cls"), cfg_.get_double("train.drop_uni"), cfg_.get_double("train.drop_both")};
  return p;
}

StepStats Trainer::step(const Batch& batch) {
  StepStats st;
  st.step = step_;
  const int64_t warmup = cfg_.get_int("train.warmup_steps"), adv_start = cfg_.get_int("train.adv_start");
  st.lr_g = warmup_lr(cfg_.get_double("train.lr_g"), step_, warmup);
  st.lr_d = warmup_lr(cfg_.get_double("train.lr_d"), step_, warmup);
  const bool adversarial = cfg_.get_bool("ablation.discriminator") && step_ >= adv_start;
  const Var hne(batch.hne);
  const Var ihc(batch.ihc);

  if (adversarial) {
    Var fake;
    {
      NoGradGuard guard;
      fake = net_->forward(hne, batch.tokens, batch.ids, batch.drop_uni, batch.drop_cls);
    }
    Var hinge = hinge_d_loss(logits_of(disc_->forward(ihc)), logits_of(disc_->forward(fake)));
    Var r1 = r1_penalty(*disc_, batch.ihc, mcfg_.discriminator.r1_gamma);
    st.d_loss = hinge.item();
    st.r1 = r1.item();
    if (!std::isfinite(st.d_loss)) throw NumericError("non-finite loss component 'd_hinge'");
    if (!std::isfinite(st.r1)) throw NumericError("non-finite loss component 'r1'");
    backward(add(hinge, r1));
    opt_d_->step(st.lr_d);
    st.d_updated = true;
  }

  disc_->set_requires_grad(false);
  try {
    Var out = net_->forward(hne, batch.tokens, batch.ids, batch.drop_uni, batch.drop_cls);
    LossTerms t;
    if (weights_.percept > 0.0)
      t.percept = perceptual_loss(out, ihc, *extractor_, cfg_.get_int_list("loss.percept_sides"),
                                  cfg_.get_double_list("loss.percept_weights"));
    t.l1 = l1_at(out, ihc, cfg_.get_int("loss.l1_side"));
    t.edge = edge_loss(out, hne, cfg_.get_int_list("loss.edge_sides"));
    if (weights_.dab > 0.0) {
      Tensor target = batch.ihc;
      for (auto& v : target.span()) v = 0.5f * (v + 1.0f);
      t.dab = dab_loss(scale(add_scalar(out, 1.0f), 0.5f), target, scfg_);
    }
    if (adversarial) {
      DiscriminatorOutput fo = disc_->forward(out);
      t.adv = hinge_g_loss(logits_of(fo));
      if (weights_.fm > 0.0) {
        DiscriminatorOutput ro;
        {
          NoGradGuard guard;
          ro = disc_->forward(ihc);
        }
        t.fm = feature_matching_loss(features_of(fo), features_of(ro), mcfg_.discriminator.fm_layers);
      }
    }
    st.g = total_generator_loss(t, weights_, step_, adv_start);
    backward(st.g.total_var);
  } catch (...) {
    disc_->set_requires_grad(true);
    throw;
  }
  disc_->set_requires_grad(true);
  opt_g_->step(st.lr_g);
  ema_->update(opt_g_->params(), cfg_.get_double("train.ema_decay"));
  ++step_;
  return st;
}

void Trainer::run(const PairStore& store, const fs::path& out_dir, int64_t total_steps) {
  fs::create_directories(out_dir);
  const auto sampler = UnifiedSampler::from_samples(
      store.samples(),
      cfg_.get_string("train.stain_balance") == "uniform" ? StainBalance::kUniform : StainBalance::kProportional);
  BatchLoader loader(store, sampler, *backbone_, batch_plan(), next_batch_, static_cast<int>(cfg_.get_int("run.workers")));
  LossLog log(out_dir / "loss_log.jsonl", step_ > 0);
  const int64_t log_every = std::max<int64_t>(cfg_.get_int("train.log_every"), 1);
  const int64_t ckpt_every = cfg_.get_int("train.checkpoint_every");
  while (step_ < total_steps) {
    Batch b = loader.next();
    StepStats st = step(b);
    next_batch_ = b.index + 1;
    if (st.step % log_every == 0 || step_ == total_steps) {
      std::vector<std::pair<std::string, double>> extra{{"lr_g", st.lr_g}, {"lr_d", st.lr_d}};
      if (st.d_updated) {
        extra.emplace_back("d_hinge", st.d_loss);
        extra.emplace_back("r1", st.r1);
      }
      log.write(st.step, st.g, extra);
    }
    if (ckpt_every > 0 && step_ % ckpt_every == 0 && step_ < total_steps)
      save_checkpoint(out_dir / ("step_" + std::to_string(step_) + ".ckpt"));
  }
  save_checkpoint(out_dir / "final.ckpt");
}

// Checkpoint layout: "VSCK", u32 version, u64 header length, JSON header,
// raw tensor bytes, u32 crc32 of everything before it.
namespace {

constexpr char kMagic[4] = {'V', 'S', 'C', 'K'};
constexpr uint32_t kVersion = 1;

struct Blob {
  std::string name, dtype;
  Shape shape;
  const void* data;
  size_t bytes;
};

std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct Parsed {
  nlohmann::json header;
  std::vector<char> bytes;
  size_t data_start = 0;
};

Parsed parse_checkpoint(const fs::path& path) {
  Parsed p;
  p.bytes = read_file(path);
  const auto& b = p.bytes;
  if (b.size() < 20 || std::memcmp(b.data(), kMagic, 4) != 0) throw DataError(path.string() + " is not a checkpoint");
  uint32_t version;
  uint64_t hlen;
  std::memcpy(&version, b.data() + 4, 4);
  if (version != kVersion)
    throw DataError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kVersion) + ")");
  std::memcpy(&hlen, b.data() + 8, 8);
  if (hlen > b.size() - 20) throw DataError("checkpoint " + path.string() + " is truncated");
  uint32_t stored;
  std::memcpy(&stored, b.data() + b.size() - 4, 4);
  const uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(b.data()), static_cast<uInt>(b.size() - 4));
  if (crc != stored) throw DataError("checkpoint " + path.string() + " is corrupt or truncated (crc mismatch)");
  try {
    p.header = nlohmann::json::parse(std::string(b.data() + 16, hlen));
  } catch (const std::exception& e) {
    throw DataError("checkpoint header unreadable: " + std::string(e.what()));
  }
  p.data_start = 16 + hlen;
  return p;
}

const char* blob_ptr(const Parsed& p, const std::string& name, const std::string& dtype, int64_t numel) {
  const auto& idx = p.header.at("tensors");
  auto it = idx.find(name);
  if (it == idx.end()) throw DataError("checkpoint lacks tensor " + name);
  const size_t width = dtype == "f64" ? 8 : 4;
  if ((*it).at("dtype") != dtype || shape_numel((*it).at("shape").get<Shape>()) != numel)
    throw DataError("checkpoint tensor " + name + " has a different shape or type");
  const size_t off = (*it).at("offset").get<size_t>();
  if (p.data_start + off + width * static_cast<size_t>(numel) > p.bytes.size() - 4)
    throw DataError("checkpoint tensor " + name + " out of range");
  return p.bytes.data() + p.data_start + off;
}

void restore_params(const Parsed& p, const std::string& prefix, const NamedParams& params) {
  for (const auto& [name, v] : params) {
    Var handle = v;
    Tensor& t = handle.value_mut();
    std::memcpy(t.data(), blob_ptr(p, prefix + name, "f32", t.numel()), sizeof(float) * static_cast<size_t>(t.numel()));
  }
}

}  // namespace

nlohmann::json read_checkpoint_header(const fs::path& path) { return parse_checkpoint(path).header; }

void Trainer::save_checkpoint(const fs::path& path) const {
  std::vector<Blob> blobs;
  auto add_params = [&](const std::string& prefix, const NamedParams& ps) {
    for (const auto& [name, v] : ps)
      blobs.push_back({prefix + name, "f32", v.shape(), v.value().data(), sizeof(float) * static_cast<size_t>(v.numel())});
  };
  add_params("net/", net_->parameters());
  add_params("disc/", disc_->parameters());
  for (auto [tag, opt] : {std::pair<const char*, Adam*>{"opt_g", opt_g_.get()}, {"opt_d", opt_d_.get()}}) {
    for (size_t i = 0; i < opt->params().size(); ++i) {
      const auto& name = opt->params()[i].first;
      const Tensor& m = opt->first_moments()[i];
      const Tensor& v = opt->second_moments()[i];
      blobs.push_back({std::string(tag) + "/m/" + name, "f32", m.shape(), m.data(), sizeof(float) * static_cast<size_t>(m.numel())});
      blobs.push_back({std::string(tag) + "/v/" + name, "f32", v.shape(), v.data(), sizeof(float) * static_cast<size_t>(v.numel())});
    }
  }
  for (size_t i = 0; i < ema_->names().size(); ++i) {
    const auto& s = ema_->shadow()[i];
    blobs.push_back({"ema/" + ema_->names()[i], "f64", Shape{static_cast<int64_t>(s.size())}, s.data(), sizeof(double) * s.size()});
  }
  nlohmann::ordered_json header;
  header["config"] = cfg_.to_json();
  header["step"] = step_;
  header["seed"] = seed_;
  header["next_batch"] = next_batch_;
  header["opt_g_steps"] = opt_g_->steps();
  header["opt_d_steps"] = opt_d_->steps();
  header["inference_weights"] = "ema";
  nlohmann::ordered_json index = nlohmann::ordered_json::object();
  size_t offset = 0;
  for (const auto& b : blobs) {
    index[b.name] = {{"dtype", b.dtype}, {"shape", b.shape}, {"offset", offset}};
    offset += b.bytes;
  }
  header["tensors"] = index;
  const std::string h = header.dump();
  std::vector<char> buf;
  buf.reserve(16 + h.size() + offset + 4);
  buf.insert(buf.end(), kMagic, kMagic + 4);
  auto put = [&](const void* p, size_t n) { buf.insert(buf.end(), static_cast<const char*>(p), static_cast<const char*>(p) + n); };
  put(&kVersion, 4);
  const uint64_t hlen = h.size();
  put(&hlen, 8);
  put(h.data(), h.size());
  for (const auto& b : blobs) put(b.data, b.bytes);
  const uint32_t crc = static_cast<uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
  put(&crc, 4);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError("failed writing checkpoint " + path.string());
  }
  fs::rename(tmp, path);
}

void Trainer::load_checkpoint(const fs::path& path) {
  const Parsed p = parse_checkpoint(path);
  restore_params(p, "net/", net_->parameters());
  restore_params(p, "disc/", disc_->parameters());
  for (auto [tag, opt] : {std::pair<const char*, Adam*>{"opt_g", opt_g_.get()}, {"opt_d", opt_d_.get()}}) {
    for (size_t i = 0; i < opt->params().size(); ++i) {
      const auto& name = opt->params()[i].first;
      Tensor& m = opt->first_moments()[i];
      Tensor& v = opt->second_moments()[i];
      std::memcpy(m.data(), blob_ptr(p, std::string(tag) + "/m/" + name, "f32", m.numel()), sizeof(float) * static_cast<size_t>(m.numel()));
      std::memcpy(v.data(), blob_ptr(p, std::string(tag) + "/v/" + name, "f32", v.numel()), sizeof(float) * static_cast<size_t>(v.numel()));
    }
  }
  opt_g_->set_steps(p.header.at("opt_g_steps").get<int64_t>());
  opt_d_->set_steps(p.header.at("opt_d_steps").get<int64_t>());
  for (size_t i = 0; i < ema_->names().size(); ++i) {
    auto& s = ema_->shadow()[i];
    std::memcpy(s.data(), blob_ptr(p, "ema/" + ema_->names()[i], "f64", static_cast<int64_t>(s.size())), sizeof(double) * s.size());
  }
  step_ = p.header.at("step").get<int64_t>();
  next_batch_ = p.header.at("next_batch").get<int64_t>();
  seed_ = p.header.at("seed").get<uint64_t>();
}

std::unique_ptr<StainNet> Trainer::ema_model() const {
  Rng rng(0);
  auto m = std::make_unique<StainNet>(mcfg_, rng);
  ema_->copy_to(m->parameters());
  return m;
}

InferenceModel load_inference_model(const fs::path& checkpoint) {
  const Parsed p = parse_checkpoint(checkpoint);
  InferenceModel im;
  im.config = Config::from_echo(p.header.at("config"));
  im.step = p.header.at("step").get<int64_t>();
  Rng rng(0);
  im.net = std::make_unique<StainNet>(model_config_from(im.config), rng);
  for (const auto& [name, v] : im.net->parameters()) {
    Var handle = v;
    Tensor& t = handle.value_mut();
    const auto* src = reinterpret_cast<const char*>(blob_ptr(p, "ema/" + name, "f64", t.numel()));
    for (int64_t j = 0; j < t.numel(); ++j) {
      double d;
      std::memcpy(&d, src + 8 * j, 8);
      t[j] = static_cast<float>(d);
    }
  }
  im.backbone = make_backbone(im.config);
  return im;
}

Tensor translate(const StainNet& net, const Tensor& hne, const Tensor& tokens, const std::vector<int>& ids) {
  NoGradGuard guard;
  const std::vector<bool> keep(ids.size(), false);
  return net.forward(Var(hne), tokens, ids, keep, keep).value();
}

Tensor translate_image(const StainNet& net, const Backbone& backbone, const Tensor& hne_unit, int token) {
  const ModelConfig& mc = net.config();
  const int64_t r = mc.generator.resolution;
  if (hne_unit.rank() != 3 || hne_unit.dim(0) != 3 || hne_unit.dim(1) % r != 0 || hne_unit.dim(2) % r != 0 ||
      hne_unit.dim(1) == 0 || hne_unit.dim(2) == 0)
    throw DataError("input image " + shape_str(hne_unit.shape()) + " is not a grid of " + std::to_string(r) + "px tiles");
  if (token < 0 || token >= mc.generator.num_classes)
    throw ConfigError("token index " + std::to_string(token) + " outside the embedding table");
  Tensor out(hne_unit.shape());
  const int64_t h = hne_unit.dim(1), w = hne_unit.dim(2);
  for (int64_t y = 0; y < h; y += r)
    for (int64_t x = 0; x < w; x += r) {
      const Tensor tile = crop(hne_unit, y, x, r, r).reshaped({1, 3, r, r});
      const Tensor tokens = extract_subcrop_tokens(tile, backbone, mc.token_grid);
      const Tensor gen = to_unit(translate(net, to_signed(tile), tokens, {token}));
      for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < r; ++i)
          std::copy_n(gen.data() + (c * r + i) * r, r, out.data() + (c * h + y + i) * w + x);
    }
  return out;
}

}  // namespace vstain
