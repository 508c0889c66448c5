// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value run configuration for the command-line driver.
//
// Precedence, lowest first: built-in task defaults, config file, flags.
// Lines are `key = value`; `#` starts a comment; blank lines are ignored.

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "hgrn/model.hpp"
#include "hgrn/tasks.hpp"
#include "hgrn/training.hpp"

namespace hgrn {

enum class Task { mqar, charlm };

std::string_view to_string(Task t);

struct RunConfig {
  Task task = Task::mqar;
  ModelConfig model;
  TrainConfig train;
  MqarConfig mqar;
  std::int64_t eval_examples = 512;  // mqar
  std::filesystem::path corpus = "data/corpus.txt";
  double valid_fraction = 0.1;       // charlm
  std::int64_t eval_windows = 0;     // charlm, 0: all

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Ordered key/value pairs as written.
using FlatConfig = std::vector<std::pair<std::string, std::string>>;

/// Parses flat text; malformed lines raise ConfigError with the line number.
FlatConfig parse_flat_config(std::string_view text);
FlatConfig read_flat_config(const std::filesystem::path& path);

/// Desk-scale defaults for a task.
RunConfig default_run_config(Task task);

/// Applies one key; unknown keys and bad values raise ConfigError naming the key.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

/// Every field with its resolved value, in a fixed order.
FlatConfig resolved_settings(const RunConfig& cfg);
std::string format_flat_config(const FlatConfig& flat);

/// {"command", "config", "version", "seed", "out_dir"}.
nlohmann::json make_manifest(const std::string& command, const RunConfig& cfg, const std::filesystem::path& out_dir);

/// Build version stamp.
std::string version_stamp();

}  // namespace hgrn
