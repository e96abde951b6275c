#include "dynainfer/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "dynainfer/errors.hpp"
#include "dynainfer/kernels.hpp"

namespace dynainfer {

SystemSpec SystemSpec::lotka_volterra() {
  return SystemSpec{SystemKind::LotkaVolterra, 0, 0.0, 0};
}

SystemSpec SystemSpec::gray_scott(std::size_t side, double ds) {
  if (side < 3) throw ArgumentError("Gray-Scott grid side must be >= 3");
  if (!(ds > 0.0)) throw ArgumentError("Gray-Scott spatial step must be > 0");
  return SystemSpec{SystemKind::GrayScott, side, ds, 0};
}

SystemSpec SystemSpec::linear(std::size_t dim) {
  if (dim == 0) throw ArgumentError("linear system needs dim >= 1");
  return SystemSpec{SystemKind::Linear, 0, 0.0, dim};
}

std::size_t SystemSpec::state_dim() const {
  switch (kind) {
    case SystemKind::LotkaVolterra:
      return 2;
    case SystemKind::GrayScott:
      return 2 * grid_side * grid_side;
    case SystemKind::Linear:
      return linear_dim;
  }
  return 0;
}

std::string SystemSpec::name() const {
  switch (kind) {
    case SystemKind::LotkaVolterra:
      return "lv";
    case SystemKind::GrayScott:
      return "gs";
    case SystemKind::Linear:
      return "linear";
  }
  return "?";
}

EnvironmentParams EnvironmentParams::lotka_volterra(double alpha, double beta,
                                                    double gamma,
                                                    double delta) {
  return EnvironmentParams{{alpha, beta, gamma, delta}};
}

EnvironmentParams EnvironmentParams::gray_scott(double feed, double kill,
                                                double diff_m, double diff_n) {
  return EnvironmentParams{{feed, kill, diff_m, diff_n}};
}

EnvironmentParams EnvironmentParams::linear(double rate) {
  return EnvironmentParams{{rate, 0.0, 0.0, 0.0}};
}

void validate_environment(const SystemSpec& spec,
                          const EnvironmentParams& env) {
  if (spec.kind == SystemKind::Linear) {
    if (!std::isfinite(env.values[0])) {
      throw ArgumentError("linear rate must be finite");
    }
    return;
  }
  for (double v : env.values) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw ArgumentError(spec.name() +
                          " environment coefficients must be strictly positive");
    }
  }
}

TimeGrid TimeGrid::from_horizon(double dt, double horizon) {
  if (!(dt > 0.0)) throw ArgumentError("time grid needs dt > 0");
  const double steps = horizon / dt;
  const auto n = static_cast<std::size_t>(std::llround(steps));
  if (n < 1 || std::abs(steps - static_cast<double>(n)) > 1e-9 * steps) {
    throw ArgumentError("horizon must be a positive multiple of dt");
  }
  return TimeGrid{0.0, dt, n + 1};
}

namespace {

void lv_rows(const EnvironmentParams& env, const Tensor& state, Tensor& out) {
  const auto [alpha, beta, gamma, delta] = env.values;
  for (std::size_t r = 0; r < state.rows(); ++r) {
    const double m = state[2 * r], n = state[2 * r + 1];
    out[2 * r] = alpha * m - beta * m * n;
    out[2 * r + 1] = delta * m * n - gamma * n;
  }
}

void gs_rows(const SystemSpec& spec, const EnvironmentParams& env,
             const Tensor& state, Tensor& out) {
  const auto [feed, kill, diff_m, diff_n] = env.values;
  const std::size_t side = spec.grid_side;
  const std::size_t cells = side * side;
  for (std::size_t r = 0; r < state.rows(); ++r) {
    const double* m = state.ptr() + r * 2 * cells;
    const double* n = m + cells;
    double* dm = out.ptr() + r * 2 * cells;
    double* dn = dm + cells;
    kernels::laplacian_periodic(m, side, spec.ds, dm);
    kernels::laplacian_periodic(n, side, spec.ds, dn);
    for (std::size_t j = 0; j < cells; ++j) {
      const double mnn = m[j] * n[j] * n[j];
      dm[j] = diff_m * dm[j] - mnn + feed * (1.0 - m[j]);
      dn[j] = diff_n * dn[j] + mnn - (feed + kill) * n[j];
    }
  }
}

}  // namespace

Tensor true_vf(const SystemSpec& spec, const EnvironmentParams& env,
               const Tensor& state) {
  if (state.cols() != spec.state_dim() || state.rank() > 2 ||
      state.rank() == 0) {
    throw ShapeError("true_vf: state " + shape_string(state.shape()) +
                     " does not match " + spec.name() + " layout of " +
                     std::to_string(spec.state_dim()) + " values");
  }
  Tensor out = Tensor::zeros_like(state);
  switch (spec.kind) {
    case SystemKind::LotkaVolterra:
      lv_rows(env, state, out);
      break;
    case SystemKind::GrayScott:
      gs_rows(spec, env, state, out);
      break;
    case SystemKind::Linear:
      for (std::size_t i = 0; i < state.size(); ++i) {
        out[i] = env.values[0] * state[i];
      }
      break;
  }
  return out;
}

Tensor laplacian_periodic(const Tensor& field, double ds) {
  if (field.rank() != 2 || field.dim(0) != field.dim(1)) {
    throw ShapeError("laplacian_periodic: field must be square, got " +
                     shape_string(field.shape()));
  }
  Tensor out = Tensor::zeros_like(field);
  kernels::laplacian_periodic(field.ptr(), field.dim(0), ds, out.ptr());
  return out;
}

double lv_first_integral(const EnvironmentParams& env, double m, double n) {
  const auto [alpha, beta, gamma, delta] = env.values;
  return delta * m - gamma * std::log(m) + beta * n - alpha * std::log(n);
}

namespace {

// out = x + h * sum_j c_j k_j
Tensor combine(const Tensor& x, double h,
               std::initializer_list<std::pair<double, const Tensor*>> terms) {
  Tensor out = x;
  for (const auto& [c, k] : terms) {
    if (c == 0.0) continue;
    const double f = h * c;
    const double* kp = k->ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += f * kp[i];
  }
  return out;
}

void require_finite_stage(const Tensor& t, int stage) {
  if (!t.all_finite()) {
    throw NumericError("rk4_step: non-finite value at stage " +
                       std::to_string(stage));
  }
}

}  // namespace

Tensor rk4_step(const VectorField& vf, const Tensor& state, double h) {
  if (!(h > 0.0)) throw ArgumentError("rk4_step: step size must be > 0");
  const Tensor k1 = vf(state);
  require_finite_stage(k1, 1);
  const Tensor k2 = vf(combine(state, 0.5 * h, {{1.0, &k1}}));
  require_finite_stage(k2, 2);
  const Tensor k3 = vf(combine(state, 0.5 * h, {{1.0, &k2}}));
  require_finite_stage(k3, 3);
  const Tensor k4 = vf(combine(state, h, {{1.0, &k3}}));
  require_finite_stage(k4, 4);
  Tensor next = combine(state, h / 6.0,
                        {{1.0, &k1}, {2.0, &k2}, {2.0, &k3}, {1.0, &k4}});
  require_finite_stage(next, 5);
  return next;
}

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double kC2 = 1.0 / 5, kC3 = 3.0 / 10, kC4 = 4.0 / 5, kC5 = 8.0 / 9;
constexpr double kA21 = 1.0 / 5;
constexpr double kA31 = 3.0 / 40, kA32 = 9.0 / 40;
constexpr double kA41 = 44.0 / 45, kA42 = -56.0 / 15, kA43 = 32.0 / 9;
constexpr double kA51 = 19372.0 / 6561, kA52 = -25360.0 / 2187,
                 kA53 = 64448.0 / 6561, kA54 = -212.0 / 729;
constexpr double kA61 = 9017.0 / 3168, kA62 = -355.0 / 33,
                 kA63 = 46732.0 / 5247, kA64 = 49.0 / 176,
                 kA65 = -5103.0 / 18656;
constexpr double kB1 = 35.0 / 384, kB3 = 500.0 / 1113, kB4 = 125.0 / 192,
                 kB5 = -2187.0 / 6784, kB6 = 11.0 / 84;
constexpr double kE1 = 71.0 / 57600, kE3 = -71.0 / 16695, kE4 = 71.0 / 1920,
                 kE5 = -17253.0 / 339200, kE6 = 22.0 / 525, kE7 = -1.0 / 40;

Tensor adaptive_segment(const VectorField& vf, Tensor y, double t,
                        double t_end, double& h, const IntegrateOptions& o) {
  Tensor k1 = vf(y);
  while (t < t_end) {
    const double remaining = t_end - t;
    const bool last = h >= remaining;
    const double step = last ? remaining : h;
    const double floor =
        16.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(t));
    if (step < floor || !std::isfinite(step)) {
      std::ostringstream os;
      os << "adaptive step size underflow at t = " << t;
      throw StiffnessError(os.str(), t);
    }
    const Tensor k2 = vf(combine(y, step, {{kA21, &k1}}));
    const Tensor k3 = vf(combine(y, step, {{kA31, &k1}, {kA32, &k2}}));
    const Tensor k4 =
        vf(combine(y, step, {{kA41, &k1}, {kA42, &k2}, {kA43, &k3}}));
    const Tensor k5 = vf(combine(
        y, step, {{kA51, &k1}, {kA52, &k2}, {kA53, &k3}, {kA54, &k4}}));
    const Tensor k6 = vf(combine(y, step,
                                 {{kA61, &k1},
                                  {kA62, &k2},
                                  {kA63, &k3},
                                  {kA64, &k4},
                                  {kA65, &k5}}));
    Tensor y_new = combine(
        y, step,
        {{kB1, &k1}, {kB3, &k3}, {kB4, &k4}, {kB5, &k5}, {kB6, &k6}});
    Tensor k7 = vf(y_new);
    double err = 0.0;
    bool finite = y_new.all_finite() && k7.all_finite();
    if (finite) {
      for (std::size_t i = 0; i < y.size(); ++i) {
        const double e =
            step * (kE1 * k1[i] + kE3 * k3[i] + kE4 * k4[i] + kE5 * k5[i] +
                    kE6 * k6[i] + kE7 * k7[i]);
        const double sc =
            o.atol + o.rtol * std::max(std::abs(y[i]), std::abs(y_new[i]));
        err += (e / sc) * (e / sc);
      }
      err = std::sqrt(err / static_cast<double>(y.size()));
      finite = std::isfinite(err);
    }
    if (finite && err <= 1.0) {
      t = last ? t_end : t + step;
      y = std::move(y_new);
      k1 = std::move(k7);
      const double factor =
          err == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err, -0.2), 0.2, 5.0);
      // A step shortened to land on the grid says nothing about the
      // natural step size.
      if (!last || step >= h) h = step * factor;
    } else {
      const double factor =
          finite ? std::clamp(0.9 * std::pow(err, -0.2), 0.1, 0.9) : 0.25;
      h = step * factor;
    }
  }
  return y;
}

}  // namespace

Rollout integrate(const VectorField& vf, const Tensor& x0, const TimeGrid& grid,
                  const IntegrateOptions& options) {
  if (options.substeps < 1) {
    throw ArgumentError("integrate: substeps must be >= 1");
  }
  if (!(grid.dt > 0.0) || grid.count < 2) {
    throw ArgumentError("integrate: grid needs dt > 0 and count >= 2");
  }
  const std::size_t dim = x0.size();
  Rollout result{Tensor({grid.count, dim}), false};
  std::copy(x0.data().begin(), x0.data().end(), result.states.ptr());
  Tensor y = x0;

  if (options.mode == IntegratorMode::Fixed) {
    const double h = grid.dt / static_cast<double>(options.substeps);
    for (std::size_t i = 1; i < grid.count; ++i) {
      for (std::size_t s = 0; s < options.substeps; ++s) {
        y = rk4_step(vf, y, h);
        if (options.clamp_floor) {
          for (double& v : y.data()) {
            if (v <= *options.clamp_floor) {
              v = *options.clamp_floor;
              result.clamped = true;
            }
          }
        }
      }
      std::copy(y.data().begin(), y.data().end(), result.states.row(i).begin());
    }
    return result;
  }

  double h = 0.1 * grid.dt;
  for (std::size_t i = 1; i < grid.count; ++i) {
    y = adaptive_segment(vf, std::move(y), grid.time(i - 1), grid.time(i), h,
                         options);
    std::copy(y.data().begin(), y.data().end(), result.states.row(i).begin());
  }
  return result;
}

}  // namespace dynainfer

namespace dynainfer {

Tensor central_difference(const Tensor& states, double dt) {
  const std::size_t n = states.rows(), d = states.cols();
  if (n < 2) throw ArgumentError("central_difference needs at least 2 states");
  Tensor out({n, d});
  if (n == 2) {
    for (std::size_t c = 0; c < d; ++c) {
      const double g = (states.at(1, c) - states.at(0, c)) / dt;
      out.at(0, c) = g;
      out.at(1, c) = g;
    }
    return out;
  }
  const double inv = 1.0 / (2.0 * dt);
  for (std::size_t c = 0; c < d; ++c) {
    out.at(0, c) = (-3.0 * states.at(0, c) + 4.0 * states.at(1, c) -
                    states.at(2, c)) * inv;
    for (std::size_t r = 1; r + 1 < n; ++r) {
      out.at(r, c) = (states.at(r + 1, c) - states.at(r - 1, c)) * inv;
    }
    out.at(n - 1, c) = (3.0 * states.at(n - 1, c) - 4.0 * states.at(n - 2, c) +
                        states.at(n - 3, c)) * inv;
  }
  return out;
}

}  // namespace dynainfer
