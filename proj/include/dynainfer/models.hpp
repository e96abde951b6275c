#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dynainfer/autodiff.hpp"
#include "dynainfer/datagen.hpp"
#include "dynainfer/dynamics.hpp"
#include "dynainfer/mlp.hpp"
#include "dynainfer/tensor.hpp"

namespace dynainfer {

/// How the shared parameters and an environment block combine.
enum class DecompositionLaw : std::uint8_t {
  /// h = f_shared(psi(x)) + g_env(psi(x)), two networks of one shape.
  FunctionalSum = 0,
  /// h = f_{shared + env}(psi(x)), one network with offset parameters.
  ParamOffset = 1,
  /// h = psi(x) * (Theta + Phi_env), linear in the parameters.
  LinearBasis = 2,
};

enum class Regularizer : std::uint8_t {
  /// Mean squared output of g_env over probe states (functional-sum).
  FunctionNorm = 0,
  L2 = 1,
  L1 = 2,
  /// Squared Frobenius norm of Phi_env (linear-basis).
  Frobenius = 3,
};

enum class FeatureKind : std::uint8_t {
  RawState = 0,
  /// (m, n) -> (m, n, m*n).
  LvBasis = 1,
  /// Every Gray-Scott cell -> (m, n, lap m, lap n).
  GsStencil = 2,
};

std::string_view law_name(DecompositionLaw law);
DecompositionLaw parse_law(std::string_view name);
std::string_view regularizer_name(Regularizer r);
Regularizer parse_regularizer(std::string_view name);
std::string_view feature_name(FeatureKind f);
FeatureKind parse_feature(std::string_view name);

/// Per-row input width of a feature map on a system.
std::size_t feature_dim(const SystemSpec& spec, FeatureKind kind);
/// Per-row output width (derivative values produced per feature row).
std::size_t row_output_dim(const SystemSpec& spec, FeatureKind kind);

/// Feature rows for a batch of states [B, D].
Tensor features(const SystemSpec& spec, FeatureKind kind, const Tensor& states);
ad::Var features(const SystemSpec& spec, FeatureKind kind, ad::Var states);

struct ModelOptions {
  DecompositionLaw law = DecompositionLaw::ParamOffset;
  FeatureKind features = FeatureKind::RawState;
  Regularizer regularizer = Regularizer::L2;
  double lambda = 1e-5;
  std::vector<std::size_t> hidden = {64, 64, 64};
  std::size_t env_count = 1;
  /// Draw environment blocks at random (as the shared part is) rather than
  /// starting them at the neutral element (zero offset, zero-output g,
  /// zero Phi).
  bool random_env_blocks = true;
};

/// Shared parameters plus one parameter block per environment.
struct DecomposedModel {
  SystemSpec system;
  DecompositionLaw law = DecompositionLaw::ParamOffset;
  FeatureKind features = FeatureKind::RawState;
  Regularizer regularizer = Regularizer::L2;
  double lambda = 0.0;
  /// Network layout for the MLP laws; {feature_dim, out} for linear-basis.
  MlpLayout layout;
  Tensor shared;
  std::vector<Tensor> env_blocks;

  std::size_t env_count() const { return env_blocks.size(); }
  std::size_t block_size() const { return shared.size(); }
};

DecomposedModel make_model(const SystemSpec& spec, const ModelOptions& options,
                           std::mt19937_64& rng);

/// Throws ArgumentError for inconsistent law / regularizer / feature choices.
void validate_model(const DecomposedModel& model);

/// Fresh environment block at the law's neutral element: zero offset, zero
/// Phi, or (functional-sum) random hidden layers feeding a zero output layer.
Tensor neutral_env_block(const DecomposedModel& model, std::mt19937_64& rng);

/// Linear-basis model from explicit coefficient matrices [out, feature_dim].
DecomposedModel linear_basis_model(const SystemSpec& spec, FeatureKind features,
                                   const Tensor& shared_coeffs,
                                   const std::vector<Tensor>& env_coeffs,
                                   double lambda);
/// Theta + Phi_env of a linear-basis model as [out, feature_dim].
Tensor linear_coefficients(const DecomposedModel& model, std::size_t env);

/// d(state)/dt predicted for environment `env`. `states` is [D] or [B, D].
Tensor model_vf(const DecomposedModel& model, std::size_t env,
                const Tensor& states);

/// Tape handles for one environment's parameters.
struct EnvParamVars {
  ad::Var first;   // shared + env (offset, linear) or shared (functional)
  ad::Var second;  // env network (functional only)
};
EnvParamVars bind_env(const DecomposedModel& model, ad::Var shared,
                      ad::Var env_block);
/// Differentiable model_vf over a batch [B, D].
ad::Var model_vf(const DecomposedModel& model, const EnvParamVars& params,
                 ad::Var states);

/// Regularizer value of environment block `env` (without lambda).
/// `probe_states` [B, D] is used only by FunctionNorm.
double omega(const DecomposedModel& model, std::size_t env,
             const Tensor& probe_states);
ad::Var omega(const DecomposedModel& model, ad::Var env_block,
              ad::Var probe_states);

/// Derivative-regression targets of trajectory i.
Tensor derivative_targets(const DatasetView& view, std::size_t i,
                          DerivativeEstimator estimator);

/// Label that excludes a trajectory from a fit.
inline constexpr std::size_t kUnassigned = static_cast<std::size_t>(-1);

/// Exact minimiser over (Theta, Phi_1..Phi_M) of
///   sum_i mean_t |x'_t - psi(x_t)(Theta + Phi_{labels[i]})|^2
///   + lambda * sum_e |Phi_e|_F^2
/// for a linear-basis `like` model (its shape, features and lambda are used).
/// With lambda = 0 every environment needs a nonsingular normal matrix;
/// otherwise RankDeficiencyError names the first that does not.
DecomposedModel solve_linear_basis(const DecomposedModel& like,
                                   const DatasetView& view,
                                   std::span<const std::size_t> labels,
                                   DerivativeEstimator estimator);

/// Exact fit of fresh environment blocks with Theta held fixed.
DecomposedModel solve_linear_basis_frozen(const DecomposedModel& trained,
                                          const DatasetView& view,
                                          std::span<const std::size_t> labels,
                                          std::size_t env_count,
                                          DerivativeEstimator estimator);

/// "DYNF" checkpoint, format version 2: after the version comes the
/// decomposition-law byte and the environment count M, then the layer-size
/// list, system/feature/regularizer metadata, and the parameters (shared
/// block, then env blocks in order) as little-endian f64.
void save_model(const DecomposedModel& model, const std::filesystem::path& path);
DecomposedModel load_model(const std::filesystem::path& path);

inline constexpr std::uint32_t kModelCheckpointVersion = 2;

}  // namespace dynainfer
