#pragma once

// Declarative run configuration: a JSON tree with full defaults, strict key
// checking, dotted overrides and conversion into the library's structs.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "gflow/dynamics.hpp"
#include "gflow/gradcheck.hpp"

namespace gflow {

using Json = nlohmann::json;

/// Every key the loader accepts, with its default value.
Json default_config();

/// Named starting points: "translate" (the default), "rotate", "swap", "nvs".
Json preset_config(std::string_view name);
std::vector<std::string> preset_names();

/// Recursively overlays `overrides` on `base`. Throws ConfigError on keys
/// that `base` does not have or on type mismatches. Arrays replace whole;
/// cluster entries are completed from the cluster defaults.
Json merge_config(const Json& base, const Json& overrides);

/// Applies "a.b.c=value". The value parses as JSON when it can and is a
/// string otherwise. Array elements are addressed by index ("scene.clusters.0.scale").
void apply_override(Json& config, std::string_view assignment);

/// Parses a JSON file as is. Throws ConfigError.
Json read_json(const std::filesystem::path& path);

/// Reads a JSON file and merges it over the defaults.
Json load_config(const std::filesystem::path& path);

struct RunConfig {
  std::uint64_t seed = 0;
  SceneSpec scene;
  TrainConfig train;
  InitNoise init_noise;
  /// Views scored by eval and the fit summary. Empty: all views.
  std::vector<int> eval_views;
  int preview_every = 50;
  GradcheckOptions gradcheck;
  int gradcheck_scenes = 1;
  /// The fully defaulted tree this was built from.
  Json tree;

  /// Seed of the initial-field perturbation.
  std::uint64_t init_seed() const { return seed + 1; }
};

/// Validates and converts a defaulted tree. Throws ConfigError.
RunConfig parse_run_config(const Json& config);

/// Single-line rendering of a config tree (sorted keys).
std::string config_echo(const Json& config);

}  // namespace gflow
