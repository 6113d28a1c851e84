// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace vstain {

enum class KeyType { kInt, kDouble, kBool, kString, kPath, kIntList, kDoubleList, kStringList };

struct KeySpec {
  std::string key;
  KeyType type;
  nlohmann::json default_value;
  std::string doc;
};

/// Every recognized configuration key with its type and default.
const std::vector<KeySpec>& config_schema();

/// Flat, validated key-value configuration. Files are JSON; nested objects
/// are flattened to dotted keys ("train.lr_g"). Unknown keys are rejected,
/// values are type-checked, and path-typed values are resolved relative to
/// the directory of the file that set them.
class Config {
 public:
  /// Defaults only.
  Config();
  static Config load(const std::filesystem::path& path);

  /// Merges a JSON object (nested or dotted keys). Relative paths resolve
  /// against `base_dir`.
  void merge(const nlohmann::json& obj, const std::filesystem::path& base_dir);
  /// Applies VSTAIN_<KEY> environment overrides, where KEY is the dotted key
  /// uppercased with dots replaced by underscores.
  void apply_env(const std::string& prefix = "VSTAIN_");
  /// Sets one key from its textual form (as used for env and CLI overrides).
  void set_from_string(const std::string& key, const std::string& text,
                       const std::filesystem::path& base_dir = std::filesystem::current_path());

  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  std::filesystem::path get_path(const std::string& key) const;
  std::vector<int64_t> get_int_list(const std::string& key) const;
  std::vector<double> get_double_list(const std::string& key) const;
  std::vector<std::string> get_string_list(const std::string& key) const;

  /// Flat echo of all values, for provenance and checkpoints.
  nlohmann::ordered_json to_json() const;
  /// Rebuilds a Config from a flat echo.
  static Config from_echo(const nlohmann::json& echo);

 private:
  const nlohmann::json& raw(const std::string& key, KeyType expected) const;
  void set_checked(const std::string& key, nlohmann::json value, const std::filesystem::path& base_dir);

  std::map<std::string, nlohmann::json> values_;
};

/// Environment variable name for a dotted key.
std::string env_name(const std::string& key, const std::string& prefix = "VSTAIN_");

}  // namespace vstain
