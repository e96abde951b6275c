#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dynainfer/datagen.hpp"
#include "dynainfer/eval.hpp"
#include "dynainfer/infer.hpp"
#include "dynainfer/models.hpp"

namespace dynainfer {

std::string_view estimator_name(DerivativeEstimator e);
DerivativeEstimator parse_estimator(std::string_view name);

/// dynainfer, or one of the fixed baselines.
struct Strategy {
  bool dynainfer = true;
  BaselineStrategy baseline = BaselineStrategy::AllInOne;

  std::string name() const;
  static Strategy parse(std::string_view name);
};

struct PerEnvCounts {
  std::size_t train = 4;
  std::size_t test = 32;
  std::size_t adapt = 1;
  std::size_t adapt_test = 32;
};

struct ExperimentConfig {
  std::string system = "lv";
  std::string preset = "paper-lv";
  /// Inline environment tables; replace the preset's when present.
  std::optional<std::vector<EnvironmentParams>> train_envs;
  std::optional<std::vector<EnvironmentParams>> adapt_envs;
  PerEnvCounts per_env;
  std::vector<std::uint64_t> seeds = {0};
  std::size_t env_count = 9;
  ModelOptions model;
  LossSpec loss;
  Strategy strategy;
  TrainHyper hyper;
  EvalOptions eval;
  std::size_t prefix_points = 2;
  std::size_t adapt_epochs = 500;
  double adapt_lr = 1e-2;
  std::vector<std::size_t> sweep_m = {3, 6, 9, 12, 16};
  std::string out = "out";

  EnvPreset resolved_preset() const;
};

/// Defaults for a system: preset, network sizes, features, loss, epochs.
ExperimentConfig default_config(std::string_view system);

/// Parses JSON text. Missing keys take the system's defaults; unknown keys,
/// wrong types and invalid values throw ConfigError naming the key.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON of every resolved field; parse_config(to_json(c)) == c.
std::string config_to_json(const ExperimentConfig& config);

/// Throws ConfigError for inconsistent combinations.
void validate_config(const ExperimentConfig& config);

/// FNV-1a of the canonical JSON with seeds and output directory removed.
std::uint64_t config_hash(const ExperimentConfig& config);
/// "s<seed>-<16 hex digits of config_hash>".
std::string run_id(const ExperimentConfig& config, std::uint64_t seed);

/// Generator seed of a split for run seed `seed`.
std::uint64_t split_seed(std::uint64_t seed, Split split);

}  // namespace dynainfer
