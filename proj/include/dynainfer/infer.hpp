#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dynainfer/datagen.hpp"
#include "dynainfer/models.hpp"
#include "dynainfer/optim.hpp"
#include "dynainfer/tensor.hpp"

namespace dynainfer {

enum class LossMode : std::uint8_t { Rollout = 0, Derivative = 1 };

std::string_view loss_mode_name(LossMode mode);
LossMode parse_loss_mode(std::string_view name);

struct LossSpec {
  LossMode mode = LossMode::Rollout;
  /// RK4 steps per observation interval in rollout mode.
  std::size_t substeps = 5;
  DerivativeEstimator estimator = DerivativeEstimator::CentralDifference;

  /// Rollout with 5 substeps for LV, 10 for GS.
  static LossSpec defaults(const SystemSpec& spec);
};

void validate_loss_spec(const LossSpec& spec);

/// Loss of one trajectory under environment block `env`; +infinity when the
/// prediction is not finite. `derivatives` is needed only by derivative mode
/// with the exact estimator.
double traj_env_loss(const DecomposedModel& model, std::size_t env,
                     const Tensor& states, double dt, const LossSpec& spec,
                     const Tensor* derivatives = nullptr);
double traj_env_loss(const DecomposedModel& model, std::size_t env,
                     const DatasetView& view, std::size_t i,
                     const LossSpec& spec);

/// [N, M] matrix of traj_env_loss values, batched per environment.
Tensor loss_matrix(const DecomposedModel& model, const DatasetView& view,
                   const LossSpec& spec);

namespace ref {
/// One traj_env_loss call per entry, serially. Bit-identical to
/// dynainfer::loss_matrix.
Tensor loss_matrix(const DecomposedModel& model, const DatasetView& view,
                   const LossSpec& spec);
}  // namespace ref

using Labels = std::vector<std::size_t>;

struct AssignmentState {
  Labels labels;
  /// Rounds completed.
  std::size_t round = 0;
  std::vector<Labels> history;

  static AssignmentState initial(Labels labels);
  void push(Labels next);
};

inline constexpr double kTieTolerance = 1e-12;

/// Argmin of every row of `losses` [N, M]. A row keeps its previous label
/// when that label is within kTieTolerance (relative) of the row minimum;
/// otherwise the lowest index within tolerance wins.
Labels argmin_labels(const Tensor& losses, std::span<const std::size_t> prev);

AssignmentState assign_step(const DecomposedModel& model,
                            const DatasetView& view,
                            const AssignmentState& prev, const LossSpec& spec);

struct Objective {
  double datafit = 0.0;
  /// lambda * sum_e Omega(phi_e).
  double omega = 0.0;
  double total() const { return datafit + omega; }
};

/// sum_i loss(i, labels[i]) from a precomputed loss matrix.
double datafit_from_matrix(const Tensor& losses,
                           std::span<const std::size_t> labels);

/// States used as probes by the function-norm regularizer: every state of
/// the view, stacked.
Tensor probe_states(const DatasetView& view);

Objective objective(const DecomposedModel& model, const DatasetView& view,
                    std::span<const std::size_t> labels, const LossSpec& spec);

struct OptimizeOptions {
  std::size_t epochs = 50;
  double lr = 1e-3;
  /// Hold the shared block fixed (adaptation).
  bool freeze_shared = false;
  /// Upper bound on feature rows per tape; larger groups are split.
  std::size_t chunk_rows = std::size_t{1} << 16;
  std::size_t max_failures = 3;
};

struct OptimizeResult {
  DecomposedModel model;
  /// Epochs whose gradient was not finite (lr halved, step reverted).
  std::size_t halvings = 0;
  bool aborted = false;
  std::string diagnostics;
};

/// Refit (theta, phi) with labels fixed. The linear-basis law is solved
/// exactly; the MLP laws run `epochs` full-batch Adam passes. `state`
/// carries optimizer moments across calls when given.
OptimizeResult optimize_step(const DecomposedModel& model,
                             const DatasetView& view,
                             std::span<const std::size_t> labels,
                             const LossSpec& spec, const OptimizeOptions& opts,
                             OptimState* state = nullptr);

enum class InitStrategy : std::uint8_t {
  /// Random parameters, then the first assignment step.
  Random = 0,
  /// Fit one block per trajectory, then keep the M blocks that are medoids
  /// of the symmetrised cross-loss matrix.
  Affinity = 1,
};

std::string_view init_name(InitStrategy s);
InitStrategy parse_init(std::string_view name);

struct TrainHyper {
  std::size_t rounds = 40;
  std::size_t epochs = 50;
  double lr = 1e-3;
  InitStrategy init = InitStrategy::Affinity;
  /// Epochs of the per-trajectory fit behind the affinity start.
  std::size_t init_epochs = 1000;
  /// Medoids whose cluster holds fewer trajectories than this start as
  /// neutral blocks instead.
  std::size_t init_min_support = 2;
  std::uint64_t seed = 0;
  std::size_t chunk_rows = std::size_t{1} << 16;
  /// Keep Adam moments across rounds.
  bool carry_optimizer = true;
  /// Regularization continuation: when > 0, the initial fit and round 1 use this
  /// lambda, which then decays geometrically to the model's lambda at round
  /// 1 + anneal_rounds.
  double lambda_start = 0.0;
  std::size_t anneal_rounds = 0;
};

/// Lambda in effect during round `round` (1-based); round 0 is the initial fit.
double scheduled_lambda(const TrainHyper& hyper, double target, std::size_t round);

struct RoundRecord {
  std::size_t round = 0;
  double r_total = 0.0;
  double r_datafit = 0.0;
  double r_omega = 0.0;
  std::size_t n_reassigned = 0;
  double elapsed_ms = 0.0;
  /// R after the assignment sub-step, before the refit.
  double r_after_assign = 0.0;
  double r_before_assign = 0.0;
  std::size_t halvings = 0;
  bool aborted = false;
};

struct TrainReport {
  std::vector<RoundRecord> rounds;
  AssignmentState assignments;
  std::uint64_t seed = 0;
  /// Round (1-based) after which labels never changed; 0 if they did in the
  /// last round.
  std::size_t stable_from = 0;
};

struct TrainResult {
  DecomposedModel model;
  TrainReport report;
};

/// Alternating assignment and refit for hyper.rounds rounds.
TrainResult dynainfer_train(const DatasetView& view, const ModelOptions& model,
                            const LossSpec& spec, const TrainHyper& hyper);

/// Indices of `k` medoids of the symmetric dissimilarity matrix `d` [N, N]:
/// greedy build, then best-improvement swaps until none lowers
/// sum_i min_m d(i, m).
std::vector<std::size_t> k_medoids(const Tensor& d, std::size_t k);

/// Same loop from an explicit starting model and labels.
TrainResult dynainfer_train_from(const DecomposedModel& start,
                                 const DatasetView& view, Labels labels,
                                 const LossSpec& spec, const TrainHyper& hyper);

enum class BaselineStrategy : std::uint8_t {
  AllInOne = 0,
  OnePerEnv = 1,
  Random = 2,
  Oracle = 3,
};

std::string_view baseline_name(BaselineStrategy s);
BaselineStrategy parse_baseline(std::string_view name);

/// Fixed labels for a baseline. One-per-env returns N labels and ignores
/// `env_count`; oracle needs an unsealed view.
AssignmentState baseline_assign(BaselineStrategy strategy,
                                const DatasetView& view, std::size_t env_count,
                                std::uint64_t seed);
/// Number of blocks a baseline needs.
std::size_t baseline_env_count(BaselineStrategy strategy,
                               const DatasetView& view, std::size_t env_count);

/// Training with fixed labels (no assignment step).
TrainResult train_fixed(const DatasetView& view, const ModelOptions& model,
                        const AssignmentState& labels, const LossSpec& spec,
                        const TrainHyper& hyper);

/// New neutral environment blocks fitted on labelled adaptation data with
/// the shared block frozen. Labels index the new blocks.
DecomposedModel adapt(const DecomposedModel& trained, const DatasetView& view,
                      const LossSpec& spec, std::size_t epochs, double lr,
                      std::uint64_t seed = 0);

/// FNV-1a over the bytes of a tensor.
std::uint64_t checksum(const Tensor& t);

/// round,R_total,R_datafit,R_omega,n_reassigned,elapsed_ms
void write_rounds_csv(const TrainReport& report,
                      const std::filesystem::path& path);
/// round,traj_id,assigned,true; labels are 1-based, true is -1 when hidden.
void write_assignments_csv(const TrainReport& report, const DatasetView& view,
                           const std::filesystem::path& path);
/// traj_id followed by one loss column per environment.
void write_loss_matrix_csv(const Tensor& losses, const DatasetView& view,
                           const std::filesystem::path& path);

}  // namespace dynainfer
