// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "vstain/config.hpp"
#include "vstain/model.hpp"

namespace vstain {

/// One registered H&E/IHC pair from a manifest.
struct PairedSample {
  std::filesystem::path hne, ihc;
  std::string stain;
  std::optional<std::string> cls;
  std::string split;
  std::string source_id;
  int token = 0;  // embedding index
};

/// Reads a line-delimited JSON manifest. Paths resolve relative to the
/// manifest; `tokens` names the embedding rows and `token_field` selects
/// whether the stain or the class picks the row. With `require_files`,
/// missing images are an error.
std::vector<PairedSample> read_manifest(const std::filesystem::path& path, const std::vector<std::string>& tokens,
                                        const std::string& token_field = "stain", bool require_files = true);
std::vector<PairedSample> filter_split(const std::vector<PairedSample>& samples, const std::string& split);

/// Per-batch generator seeded from (seed, stream, index) so batches are a pure
/// function of the root seed.
Rng derived_rng(uint64_t seed, uint64_t stream, uint64_t index);

struct CropDraw {
  int64_t y = 0, x = 0;
  bool hflip = false, vflip = false;
};

struct TrainingPair {
  Tensor hne, ihc;  // [3,crop,crop], signed range
  int token = 0;
  CropDraw draw;
};

/// Same crop origin and flips for both images; inputs are [3,H,W] in [0,1].
TrainingPair sample_training_pair(const Tensor& hne, const Tensor& ihc, int token, int64_t crop, bool flips, Rng& rng);

struct DropRates {
  double cls = 0.10, uni = 0.10, both = 0.05;
};
struct Drops {
  bool cls = false, uni = false;
};
/// One of four exclusive outcomes: class only, spatial only, both, none.
Drops sample_conditioning_drops(Rng& rng, const DropRates& rates = {});

enum class StainBalance { kProportional, kUniform };

/// Draws training items with stains mixed inside a batch. Proportional mode
/// draws each stain in proportion to its size; uniform mode picks the stain
/// first, then an item.
class UnifiedSampler {
 public:
  /// groups: stain name -> item indices. Every group must be nonempty.
  UnifiedSampler(std::map<std::string, std::vector<size_t>> groups, StainBalance balance);
  static UnifiedSampler from_samples(const std::vector<PairedSample>& samples, StainBalance balance);
  size_t draw(Rng& rng) const;
  double probability(const std::string& stain) const;
  size_t size() const { return items_.size(); }

 private:
  std::vector<std::string> names_;
  std::vector<std::vector<size_t>> groups_;
  std::vector<std::pair<size_t, size_t>> items_;  // (group, item)
  StainBalance balance_;
};

/// Decoded unit-range images, loaded on first use and kept in memory.
class PairStore {
 public:
  explicit PairStore(std::vector<PairedSample> samples);
  const std::vector<PairedSample>& samples() const { return samples_; }
  /// Thread-safe. Throws DataError on unreadable or mismatched images.
  std::pair<std::shared_ptr<const Tensor>, std::shared_ptr<const Tensor>> load(size_t i) const;

 private:
  std::vector<PairedSample> samples_;
  mutable std::mutex mu_;
  mutable std::vector<std::pair<std::shared_ptr<const Tensor>, std::shared_ptr<const Tensor>>> cache_;
};

struct Batch {
  int64_t index = 0;
  Tensor hne, ihc;  // [B,3,R,R] signed
  Tensor tokens;    // [B,d,G,G]
  std::vector<int> ids;
  std::vector<bool> drop_cls, drop_uni;
  std::vector<size_t> items;
  std::vector<CropDraw> draws;
};

struct BatchPlan {
  uint64_t seed = 0;
  int64_t batch_size = 4;
  int64_t crop = 512;
  int64_t grid = 32;
  bool flips = true;
  DropRates drops;
};

/// Builds batch `index`; the result depends only on the plan, the index and the data.
Batch make_batch(const PairStore& store, const UnifiedSampler& sampler, const Backbone& backbone, const BatchPlan& plan,
                 int64_t index);

/// Delivers batches first, first+1, ... in order. With workers > 0, batches are
/// built ahead on background threads; the sequence is identical for any
/// worker count.
class BatchLoader {
 public:
  BatchLoader(const PairStore& store, const UnifiedSampler& sampler, const Backbone& backbone, BatchPlan plan,
              int64_t first, int workers, int64_t lookahead = 4);
  ~BatchLoader();
  BatchLoader(const BatchLoader&) = delete;
  BatchLoader& operator=(const BatchLoader&) = delete;
  Batch next();

 private:
  void work();

  const PairStore& store_;
  const UnifiedSampler& sampler_;
  const Backbone& backbone_;
  BatchPlan plan_;
  int64_t next_out_, next_claim_, lookahead_;
  bool stop_ = false;
  std::exception_ptr error_;
  std::map<int64_t, Batch> ready_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::thread> threads_;
};

/// Adam with bias correction over a fixed parameter list.
class Adam {
 public:
  Adam(NamedParams params, double beta1, double beta2, double eps);
  /// Applies one update with the given learning rate using the current grads.
  void step(double lr);
  int64_t steps() const { return t_; }
  NamedParams& params() { return params_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  void set_steps(int64_t t) { t_ = t; }

 private:
  NamedParams params_;
  double b1_, b2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

/// Linear warmup from 0 at step 0 to nominal at `warmup` steps.
double warmup_lr(double nominal, int64_t step, int64_t warmup);

/// Double-precision exponential moving average of a parameter list.
class Ema {
 public:
  explicit Ema(const NamedParams& params);
  /// s <- decay * s + (1 - decay) * theta
  void update(const NamedParams& params, double decay);
  /// Writes the shadow into parameters with the same names.
  void copy_to(const NamedParams& params) const;
  const std::vector<std::string>& names() const { return names_; }
  std::vector<std::vector<double>>& shadow() { return shadow_; }
  const std::vector<std::vector<double>>& shadow() const { return shadow_; }

 private:
  std::vector<std::string> names_;
  std::vector<std::vector<double>> shadow_;
};

struct StepStats {
  int64_t step = 0;
  LossBundle g;
  double d_loss = std::numeric_limits<double>::quiet_NaN();
  double r1 = std::numeric_limits<double>::quiet_NaN();
  double lr_g = 0.0, lr_d = 0.0;
  bool d_updated = false;
};

/// Owns the full training state: models, optimizers, EMA shadow, step and
/// the batch cursor (the only RNG state, since batches derive from it).
class Trainer {
 public:
  Trainer(const Config& cfg);

  StepStats step(const Batch& batch);
  /// Runs until `total_steps` G steps are done, logging and checkpointing
  /// into `out_dir`.
  void run(const PairStore& store, const std::filesystem::path& out_dir, int64_t total_steps);

  void save_checkpoint(const std::filesystem::path& path) const;
  /// Restores a checkpoint written by a trainer with the same model configuration.
  void load_checkpoint(const std::filesystem::path& path);

  const Config& config() const { return cfg_; }
  int64_t current_step() const { return step_; }
  int64_t next_batch() const { return next_batch_; }
  void set_next_batch(int64_t b) { next_batch_ = b; }
  StainNet& net() { return *net_; }
  const StainNet& net() const { return *net_; }
  Discriminator& discriminator() { return *disc_; }
  const Ema& ema() const { return *ema_; }
  const Backbone& backbone() const { return *backbone_; }
  BatchPlan batch_plan() const;
  /// Copy of the generator side carrying EMA weights.
  std::unique_ptr<StainNet> ema_model() const;

 private:
  Config cfg_;
  ModelConfig mcfg_;
  StainConfig scfg_;
  LossWeights weights_;
  uint64_t seed_;
  std::unique_ptr<Backbone> backbone_;
  std::unique_ptr<PerceptualExtractor> extractor_;
  std::unique_ptr<StainNet> net_;
  std::unique_ptr<Discriminator> disc_;
  std::unique_ptr<Adam> opt_g_, opt_d_;
  std::unique_ptr<Ema> ema_;
  int64_t step_ = 0;
  int64_t next_batch_ = 0;
};

/// Checkpoint contents needed for inference.
struct InferenceModel {
  Config config;
  std::unique_ptr<StainNet> net;  // EMA weights
  std::unique_ptr<Backbone> backbone;
  int64_t step = 0;
  std::string weights = "ema";
};
InferenceModel load_inference_model(const std::filesystem::path& checkpoint);

/// Reads only the JSON header of a checkpoint (version checked).
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

/// Generator output for [B,3,R,R] signed H&E with tokens; no drops. Returns signed.
Tensor translate(const StainNet& net, const Tensor& hne, const Tensor& tokens, const std::vector<int>& ids);

/// Translates a [3,H,W] unit-range H&E image tile by tile (non-overlapping
/// tiles of the model resolution, one forward pass each). H and W must be
/// multiples of the resolution. Returns a unit-range image.
Tensor translate_image(const StainNet& net, const Backbone& backbone, const Tensor& hne_unit, int token);
inline Tensor translate_image(const InferenceModel& model, const Tensor& hne_unit, int token) {
  return translate_image(*model.net, *model.backbone, hne_unit, token);
}

}  // namespace vstain
