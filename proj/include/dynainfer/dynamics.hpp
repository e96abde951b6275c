#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "dynainfer/tensor.hpp"

namespace dynainfer {

enum class SystemKind : std::uint8_t {
  LotkaVolterra = 0,
  GrayScott = 1,
  /// dx/dt = a * x componentwise; a small analytic system for tests.
  Linear = 2,
};

/// Which ground-truth system a state belongs to, and its layout.
///
/// Lotka-Volterra states are (m, n). Gray-Scott states are two side x side
/// fields, the m field then the n field, each flattened row-major.
struct SystemSpec {
  SystemKind kind = SystemKind::LotkaVolterra;
  std::size_t grid_side = 0;
  double ds = 0.0;
  std::size_t linear_dim = 0;

  static SystemSpec lotka_volterra();
  static SystemSpec gray_scott(std::size_t side = 32, double ds = 2.0);
  static SystemSpec linear(std::size_t dim = 1);

  std::size_t state_dim() const;
  std::string name() const;

  friend bool operator==(const SystemSpec&, const SystemSpec&) = default;
};

/// Dynamics coefficients of one environment. LV: (alpha, beta, gamma, delta).
/// GS: (F, k, D_m, D_n). Linear: (a, -, -, -).
struct EnvironmentParams {
  std::array<double, 4> values{};

  static EnvironmentParams lotka_volterra(double alpha, double beta,
                                          double gamma, double delta);
  static EnvironmentParams gray_scott(double feed, double kill,
                                      double diff_m = 0.2097,
                                      double diff_n = 0.105);
  static EnvironmentParams linear(double rate);

  friend bool operator==(const EnvironmentParams&,
                         const EnvironmentParams&) = default;
};

/// Throws ArgumentError if an LV or GS coefficient is not strictly positive.
void validate_environment(const SystemSpec& spec, const EnvironmentParams& env);

/// Uniform observation grid t_i = t0 + i * dt, i < count.
struct TimeGrid {
  double t0 = 0.0;
  double dt = 1.0;
  std::size_t count = 2;

  static TimeGrid from_horizon(double dt, double horizon);
  double time(std::size_t i) const { return t0 + static_cast<double>(i) * dt; }
  double horizon() const { return time(count - 1); }

  friend bool operator==(const TimeGrid&, const TimeGrid&) = default;
};

/// Right-hand side of the ground-truth system. `state` is [D] or [B, D].
Tensor true_vf(const SystemSpec& spec, const EnvironmentParams& env,
               const Tensor& state);

/// 5-point Laplacian with wrap-around on a square [side, side] field.
Tensor laplacian_periodic(const Tensor& field, double ds);

/// Lotka-Volterra first integral delta*m - gamma*ln m + beta*n - alpha*ln n.
double lv_first_integral(const EnvironmentParams& env, double m, double n);

using VectorField = std::function<Tensor(const Tensor&)>;

/// Classical four-stage Runge-Kutta step. Throws NumericError naming the
/// stage if an intermediate becomes non-finite.
Tensor rk4_step(const VectorField& vf, const Tensor& state, double h);

enum class IntegratorMode { Fixed, Adaptive };

struct IntegrateOptions {
  IntegratorMode mode = IntegratorMode::Adaptive;
  /// Fixed mode: RK4 steps per observation interval.
  std::size_t substeps = 1;
  double rtol = 1e-8;
  double atol = 1e-8;
  /// Fixed mode only: states below this are raised to it and flagged.
  std::optional<double> clamp_floor;
};

struct Rollout {
  Tensor states;  // [count, D]
  bool clamped = false;
};

/// States at every grid point, starting from x0 at grid.t0.
/// Adaptive mode uses Dormand-Prince 5(4) and lands on grid points exactly;
/// it throws StiffnessError if the step size underflows.
Rollout integrate(const VectorField& vf, const Tensor& x0, const TimeGrid& grid,
                  const IntegrateOptions& options = {});

}  // namespace dynainfer

namespace dynainfer {

enum class DerivativeEstimator : std::uint8_t {
  /// Derivatives recorded by the generator alongside the states.
  Exact = 0,
  /// Second-order central differences, one-sided at the ends.
  CentralDifference = 1,
};

/// dx/dt estimates at every row of `states` [count, D] sampled every `dt`.
Tensor central_difference(const Tensor& states, double dt);

}  // namespace dynainfer
