#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dynainfer/config.hpp"

namespace dynainfer::cli {

struct GlobalOptions {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  int threads = 0;
};

struct CommandOptions {
  std::optional<std::filesystem::path> checkpoint;
  bool oracle_env = false;
  std::vector<std::size_t> m_list;
};

/// Config with --seed / --out applied.
ExperimentConfig resolve(const GlobalOptions& g);

int cmd_gen(const ExperimentConfig& c);
int cmd_train(const ExperimentConfig& c);
int cmd_eval(const ExperimentConfig& c, const CommandOptions& o);
int cmd_adapt(const ExperimentConfig& c, const CommandOptions& o);
int cmd_sweep_m(const ExperimentConfig& c, const CommandOptions& o);
int cmd_loss_matrix(const ExperimentConfig& c, const CommandOptions& o);
int cmd_report(const ExperimentConfig& c);

}  // namespace dynainfer::cli
