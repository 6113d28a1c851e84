// SPDX-License-Identifier: Apache-2.0
#include "vstain/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "vstain/errors.hpp"

namespace vstain {
namespace {

using nlohmann::json;

std::vector<KeySpec> build_schema() {
  using K = KeyType;
  return {
      // Model and generator.
      {"model.resolution", K::kInt, 512, "generator input/output side"},
      {"model.encoder_channels", K::kIntList, {64, 128, 256, 512, 512}, "strided encoder widths"},
      {"model.bottleneck_blocks", K::kInt, 4, "residual blocks at the bottleneck"},
      {"model.attention", K::kBool, true, "self-attention block in the bottleneck"},
      {"model.embedding_dim", K::kInt, 64, "stain/class embedding width"},
      {"model.num_classes", K::kInt, 4, "conditioning classes (a null row is added)"},
      {"model.edge_channels", K::kInt, 32, "edge encoder width per scale"},
      {"model.head_channels", K::kInt, 32, "full-resolution decoder head width"},
      {"model.spade_hidden", K::kInt, 128, "SPADE shared conv width cap"},
      {"model.variant_1024", K::kBool, false, "add one encoder/decoder level (doubles resolution)"},
      // Backbone and processor.
      {"backbone.kind", K::kString, "toy", "toy | pretrained"},
      {"backbone.seed", K::kInt, 0, "toy backbone projection seed"},
      {"backbone.token_dim", K::kInt, 1024, "token width d"},
      {"backbone.native_side", K::kInt, 224, "backbone input side"},
      {"backbone.patch", K::kInt, 16, "backbone patch size"},
      {"backbone.grid", K::kInt, 32, "token grid side G after pooling"},
      {"backbone.weights", K::kPath, "", "safetensors file for the pretrained backbone"},
      {"processor.channels", K::kInt, 512, "conditioning map channels"},
      {"processor.residual_blocks", K::kInt, 2, "residual refinement blocks at G"},
      {"processor.groups", K::kInt, 32, "group-norm groups"},
      // Discriminator.
      {"disc.scales", K::kInt, 2, "PatchGAN scales"},
      {"disc.channels", K::kIntList, {64, 128, 256, 512}, "strided layer widths"},
      {"disc.r1_gamma", K::kDouble, 1.0, "R1 penalty weight"},
      {"disc.fm_layers", K::kIntList, json::array(), "feature-matching layers (empty = all)"},
      // Losses.
      {"loss.lambda_percept", K::kDouble, 1.0, "perceptual weight"},
      {"loss.lambda_l1", K::kDouble, 1.0, "low-resolution L1 weight"},
      {"loss.lambda_edge", K::kDouble, 0.5, "Sobel edge weight"},
      {"loss.lambda_adv", K::kDouble, 1.0, "adversarial weight"},
      {"loss.lambda_fm", K::kDouble, 10.0, "feature-matching weight"},
      {"loss.lambda_dab", K::kDouble, 0.2, "DAB score weight"},
      {"loss.percept_sides", K::kIntList, {128, 256}, "perceptual resize sides"},
      {"loss.percept_weights", K::kDoubleList, {1.0, 0.5}, "perceptual per-side weights"},
      {"loss.l1_side", K::kInt, 64, "L1 area-downsample side"},
      {"loss.edge_sides", K::kIntList, {512, 256}, "edge loss sides"},
      {"loss.extractor_seed", K::kInt, 7, "seed of the random-feature perceptual extractor"},
      // Stain chemistry.
      {"stain.matrix", K::kDoubleList, {0.650, 0.704, 0.286, 0.0, 0.0, 0.0, 0.269, 0.568, 0.872},
       "H, residual, DAB rows; a zero residual row is replaced by the cross product"},
      {"stain.od_eps", K::kDouble, 1.0 / 255.0, "optical-density clamp"},
      {"stain.hist_range", K::kDoubleList, {0.0, 3.0}, "DAB histogram range (OD units)"},
      {"stain.hist_bins", K::kInt, 256, "DAB histogram bins"},
      {"stain.hist_smoothing", K::kDouble, 1e-8, "additive smoothing per bin"},
      {"stain.top_fraction", K::kDouble, 0.10, "fraction of pixels in the DAB score"},
      {"stain.kl_direction", K::kString, "real_gen", "real_gen | gen_real"},
      // Training.
      {"train.batch_size", K::kInt, 4, "batch size"},
      {"train.steps", K::kInt, 0, "G steps (0 = derive from epochs)"},
      {"train.epochs", K::kInt, 100, "epochs when steps is 0"},
      {"train.crop", K::kInt, 512, "random crop side"},
      {"train.lr_g", K::kDouble, 1e-4, "generator learning rate"},
      {"train.lr_d", K::kDouble, 4e-4, "discriminator learning rate"},
      {"train.beta1", K::kDouble, 0.0, "Adam beta1"},
      {"train.beta2", K::kDouble, 0.99, "Adam beta2"},
      {"train.adam_eps", K::kDouble, 1e-8, "Adam epsilon"},
      {"train.warmup_steps", K::kInt, 1000, "linear warmup length in G steps"},
      {"train.adv_start", K::kInt, 2000, "first G step with adversarial training"},
      {"train.ema_decay", K::kDouble, 0.999, "EMA decay"},
      {"train.drop_cls", K::kDouble, 0.10, "P(drop class only)"},
      {"train.drop_uni", K::kDouble, 0.10, "P(drop spatial features only)"},
      {"train.drop_both", K::kDouble, 0.05, "P(drop both)"},
      {"train.flips", K::kBool, true, "synchronized random flips"},
      {"train.stain_balance", K::kString, "proportional", "proportional | uniform"},
      {"train.log_every", K::kInt, 1, "loss log interval"},
      {"train.checkpoint_every", K::kInt, 1000, "checkpoint interval (0 = final only)"},
      // Data.
      {"data.tokens", K::kStringList, {"HER2", "Ki67", "ER", "PR"}, "stain names in embedding order"},
      {"data.token_field", K::kString, "stain", "stain | class"},
      // Evaluation.
      {"eval.crop", K::kInt, 512, "deterministic test crop side"},
      {"eval.fid_shrinkage", K::kDouble, 1e-6, "covariance diagonal shrinkage (0 disables)"},
      {"eval.feature_seed", K::kInt, 11, "seed of the random-projection FID/KID extractor"},
      {"eval.feature_dim", K::kInt, 64, "FID/KID feature width"},
      // Failure analysis.
      {"failure.threshold", K::kDouble, 0.5, "failure when DAB KL exceeds this"},
      {"failure.labels", K::kStringList,
       {"invasive_carcinoma", "adipose", "necrosis", "background", "stroma", "normal_duct", "lymphocytes"},
       "tissue categories"},
      {"failure.classifier_side", K::kInt, 224, "classifier input side"},
      {"failure.external_command", K::kString, "", "external classifier command"},
      {"failure.worst_k", K::kInt, 4, "worst cases per stain"},
      {"failure.logistic_l2", K::kDouble, 1e-3, "logistic L2 penalty"},
      {"failure.logistic_steps", K::kInt, 2000, "gradient-descent iterations"},
      {"failure.logistic_lr", K::kDouble, 0.5, "gradient-descent step"},
      {"failure.test_fraction", K::kDouble, 0.2, "held-out fraction"},
      // Ablations.
      {"ablation.edge_encoder", K::kBool, true, "use the edge encoder"},
      {"ablation.feature_matching", K::kBool, true, "use feature matching"},
      {"ablation.dab_loss", K::kBool, true, "use the DAB loss"},
      {"ablation.lpips", K::kBool, true, "use the perceptual loss"},
      {"ablation.cls_grid", K::kBool, false, "pool tokens to 4x4 before conditioning"},
      {"ablation.discriminator", K::kBool, true, "train with a discriminator"},
      {"ablation.uni_features", K::kBool, true, "use spatial backbone conditioning"},
      // Run.
      {"run.seed", K::kInt, 0, "root seed"},
      {"run.workers", K::kInt, 0, "data prefetch workers"},
      {"run.device", K::kString, "cpu", "compute device (cpu only)"},
  };
}

const KeySpec& spec_for(const std::string& key) {
  const auto& schema = config_schema();
  auto it = std::find_if(schema.begin(), schema.end(), [&](const KeySpec& s) { return s.key == key; });
  if (it == schema.end()) throw ConfigError("unknown config key '" + key + "'");
  return *it;
}

const char* type_name(KeyType t) {
  switch (t) {
    case KeyType::kInt: return "integer";
    case KeyType::kDouble: return "number";
    case KeyType::kBool: return "boolean";
    case KeyType::kString: return "string";
    case KeyType::kPath: return "path";
    case KeyType::kIntList: return "integer list";
    case KeyType::kDoubleList: return "number list";
    case KeyType::kStringList: return "string list";
  }
  return "?";
}

bool matches(const json& v, KeyType t) {
  auto all = [&](auto pred) { return v.is_array() && std::all_of(v.begin(), v.end(), pred); };
  switch (t) {
    case KeyType::kInt: return v.is_number_integer();
    case KeyType::kDouble: return v.is_number();
    case KeyType::kBool: return v.is_boolean();
    case KeyType::kString:
    case KeyType::kPath: return v.is_string();
    case KeyType::kIntList: return all([](const json& e) { return e.is_number_integer(); });
    case KeyType::kDoubleList: return all([](const json& e) { return e.is_number(); });
    case KeyType::kStringList: return all([](const json& e) { return e.is_string(); });
  }
  return false;
}

void flatten(const json& obj, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  for (const auto& [k, v] : obj.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object())
      flatten(v, key, out);
    else
      out.emplace_back(key, v);
  }
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

const std::vector<KeySpec>& config_schema() {
  static const std::vector<KeySpec> schema = build_schema();
  return schema;
}

std::string env_name(const std::string& key, const std::string& prefix) {
  std::string out = prefix;
  for (char c : key) out += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

Config::Config() {
  for (const auto& s : config_schema()) values_[s.key] = s.default_value;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config " + path.string() + " must be a JSON object");
  Config c;
  c.merge(j, std::filesystem::absolute(path).parent_path());
  return c;
}

void Config::merge(const json& obj, const std::filesystem::path& base_dir) {
  std::vector<std::pair<std::string, json>> flat;
  flatten(obj, "", flat);
  for (auto& [k, v] : flat) set_checked(k, v, base_dir);
}

void Config::set_checked(const std::string& key, json value, const std::filesystem::path& base_dir) {
  const KeySpec& s = spec_for(key);
  if (s.type == KeyType::kDouble && value.is_number()) value = value.get<double>();
  if (s.type == KeyType::kDoubleList && value.is_array())
    for (auto& e : value) e = e.get<double>();
  if (!matches(value, s.type))
    throw ConfigError("config key '" + key + "' expects " + type_name(s.type) + ", got " + value.dump());
  if (s.type == KeyType::kPath) {
    const std::filesystem::path p = value.get<std::string>();
    if (!p.empty() && p.is_relative()) value = (base_dir / p).lexically_normal().string();
  }
  values_[key] = std::move(value);
}

void Config::set_from_string(const std::string& key, const std::string& text, const std::filesystem::path& base_dir) {
  const KeySpec& s = spec_for(key);
  json v;
  try {
    switch (s.type) {
      case KeyType::kInt: {
        size_t used = 0;
        v = std::stoll(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        break;
      }
      case KeyType::kDouble: {
        size_t used = 0;
        v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        break;
      }
      case KeyType::kBool:
        if (text == "true" || text == "1") v = true;
        else if (text == "false" || text == "0") v = false;
        else throw std::invalid_argument(text);
        break;
      case KeyType::kString:
      case KeyType::kPath: v = text; break;
      case KeyType::kIntList:
        v = json::array();
        for (const auto& e : split_list(text)) v.push_back(std::stoll(e));
        break;
      case KeyType::kDoubleList:
        v = json::array();
        for (const auto& e : split_list(text)) v.push_back(std::stod(e));
        break;
      case KeyType::kStringList:
        v = json::array();
        for (const auto& e : split_list(text)) v.push_back(e);
        break;
    }
  } catch (const std::logic_error&) {
    throw ConfigError("cannot parse '" + text + "' as " + type_name(s.type) + " for key '" + key + "'");
  }
  set_checked(key, v, base_dir);
}

void Config::apply_env(const std::string& prefix) {
  for (const auto& s : config_schema()) {
    const char* v = std::getenv(env_name(s.key, prefix).c_str());
    if (v != nullptr) set_from_string(s.key, v);
  }
}

const json& Config::raw(const std::string& key, KeyType expected) const {
  const KeySpec& s = spec_for(key);
  const bool ok = s.type == expected || (expected == KeyType::kString && s.type == KeyType::kPath);
  if (!ok) throw std::logic_error("config key '" + key + "' read with the wrong type");
  return values_.at(key);
}

int64_t Config::get_int(const std::string& key) const { return raw(key, KeyType::kInt).get<int64_t>(); }
double Config::get_double(const std::string& key) const { return raw(key, KeyType::kDouble).get<double>(); }
bool Config::get_bool(const std::string& key) const { return raw(key, KeyType::kBool).get<bool>(); }
std::string Config::get_string(const std::string& key) const { return raw(key, KeyType::kString).get<std::string>(); }
std::filesystem::path Config::get_path(const std::string& key) const {
  return raw(key, KeyType::kPath).get<std::string>();
}
std::vector<int64_t> Config::get_int_list(const std::string& key) const {
  return raw(key, KeyType::kIntList).get<std::vector<int64_t>>();
}
std::vector<double> Config::get_double_list(const std::string& key) const {
  return raw(key, KeyType::kDoubleList).get<std::vector<double>>();
}
std::vector<std::string> Config::get_string_list(const std::string& key) const {
  return raw(key, KeyType::kStringList).get<std::vector<std::string>>();
}

nlohmann::ordered_json Config::to_json() const {
  nlohmann::ordered_json out;
  for (const auto& s : config_schema()) out[s.key] = values_.at(s.key);
  return out;
}

Config Config::from_echo(const json& echo) {
  Config c;
  for (const auto& [k, v] : echo.items()) c.set_checked(k, v, std::filesystem::path{});
  return c;
}

}  // namespace vstain
