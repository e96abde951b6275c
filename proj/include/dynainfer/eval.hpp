#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dynainfer/datagen.hpp"
#include "dynainfer/infer.hpp"
#include "dynainfer/models.hpp"
#include "dynainfer/tensor.hpp"

namespace dynainfer {

inline constexpr double kMapeGuard = 1e-8;

/// Mean over all entries of the squared difference.
double mse(const Tensor& pred, const Tensor& truth);
/// 100 * mean |pred - truth| / max(|truth|, kMapeGuard).
double mape(const Tensor& pred, const Tensor& truth);

struct EvalOptions {
  /// RK4 steps per observation interval.
  std::size_t substeps = 20;
  /// LV states at or below this are raised to it and the rollout flagged.
  double lv_floor = 1e-12;
};

struct ModelRollout {
  Tensor states;  // [count, D]
  bool flagged = false;
};

/// Full-horizon rollouts of model_vf under block env[i] from each x0[i]
/// ([B, D]). A row that turns non-finite keeps its last finite state and is
/// flagged.
std::vector<ModelRollout> rollout_batch(const DecomposedModel& model,
                                        std::span<const std::size_t> envs,
                                        const Tensor& x0, const TimeGrid& grid,
                                        const EvalOptions& opts = {});

struct MetricReport {
  std::string split;
  std::vector<double> per_traj_mse;
  std::vector<double> per_traj_mape;
  double mse = 0.0;
  double mape = 0.0;
  std::size_t n = 0;
  std::size_t n_flagged = 0;
  std::uint64_t seed = 0;
};

/// Scores full rollouts from every trajectory's first state against the
/// stored states, trajectory i using block envs[i].
MetricReport eval_rollout(const DecomposedModel& model, const DatasetView& view,
                          std::span<const std::size_t> envs,
                          const EvalOptions& opts = {});

/// Environment whose block best predicts the prefix (>= 2 points); lowest
/// index on ties.
std::size_t infer_test_env(const DecomposedModel& model, const Tensor& prefix,
                           double dt, const LossSpec& spec,
                           const Tensor* derivatives = nullptr);

/// infer_test_env on the first `prefix_points` states of every trajectory.
std::vector<std::size_t> infer_test_envs(const DecomposedModel& model,
                                         const DatasetView& view,
                                         std::size_t prefix_points,
                                         const LossSpec& spec);

struct MatchResult {
  /// [true labels, assigned labels].
  Tensor confusion;
  /// mapping[a] = true label matched to assigned label a, or -1.
  std::vector<std::int64_t> mapping;
  double accuracy = 0.0;
};

/// Maximum-weight matching on a rectangular weight matrix; returns the
/// column matched to every row (-1 when unmatched) and the total weight.
std::pair<std::vector<std::int64_t>, double> hungarian_max(const Tensor& weights);
/// Same by enumerating permutations; max(rows, cols) <= 9.
std::pair<std::vector<std::int64_t>, double> exhaustive_max(const Tensor& weights);

MatchResult match_accuracy(std::span<const std::size_t> assigned,
                           std::span<const std::size_t> truth);
/// Labels from an unsealed view; PermissionError otherwise.
MatchResult match_accuracy(std::span<const std::size_t> assigned,
                           const DatasetView& view);

std::size_t label_count(std::span<const std::size_t> labels);

struct RunInfo {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string system;
  std::string model_law;
  std::string assignment_strategy;
};

/// run_id,seed,system,model_law,assignment_strategy,split,mse,mape,n_flagged_rollouts
void write_metrics_csv(const std::vector<std::pair<RunInfo, MetricReport>>& rows,
                       const std::filesystem::path& path);

struct SweepRow {
  std::size_t env_count = 0;
  double test_mse = 0.0;
  double accuracy = 0.0;
  std::size_t label_count = 0;
  std::uint64_t seed = 0;
};

/// M,seed,test_mse,matched_accuracy,label_count
void write_sweep_csv(const std::vector<SweepRow>& rows,
                     const std::filesystem::path& path);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};
/// Sample standard deviation (n - 1); 0 for a single value.
MeanStd mean_std(std::span<const double> values);

}  // namespace dynainfer
