#include <doctest.h>

#include <cmath>
#include <random>

#include "dynainfer/dynamics.hpp"
#include "dynainfer/errors.hpp"
#include "support.hpp"

using namespace dynainfer;

namespace {

const EnvironmentParams kLv1 = EnvironmentParams::lotka_volterra(0.5, 0.5, 0.5, 0.5);

VectorField decay() {
  return [](const Tensor& x) {
    Tensor d = x;
    for (double& v : d.storage()) v = -v;
    return d;
  };
}

double rk4_error(double h) {
  Tensor x = Tensor::vector({1.0});
  const int steps = static_cast<int>(std::lround(1.0 / h));
  for (int i = 0; i < steps; ++i) x = rk4_step(decay(), x, h);
  return std::abs(x[0] - std::exp(-1.0));
}

}  // namespace

TEST_SUITE("dynamics") {

TEST_CASE("lotka-volterra field hand values") {
  const SystemSpec lv = SystemSpec::lotka_volterra();
  const Tensor eq = true_vf(lv, kLv1, Tensor::vector({1.0, 1.0}));
  CHECK(eq[0] == 0.0);
  CHECK(eq[1] == 0.0);
  const Tensor d = true_vf(lv, kLv1, Tensor::vector({2.0, 1.0}));
  CHECK(d[0] == doctest::Approx(0.0));
  CHECK(d[1] == doctest::Approx(0.5));
  CHECK_THROWS_AS(true_vf(lv, kLv1, Tensor::vector({1.0, 2.0, 3.0})), ShapeError);
}

TEST_CASE("gray-scott field on a uniform state") {
  const SystemSpec gs = SystemSpec::gray_scott();
  Tensor x({gs.state_dim()});
  for (std::size_t i = 0; i < 1024; ++i) x[1024 + i] = 1.0;
  const Tensor d = true_vf(gs, EnvironmentParams::gray_scott(0.037, 0.06), x);
  for (std::size_t i = 0; i < 1024; ++i) {
    CHECK(d[i] == doctest::Approx(0.037).epsilon(1e-14));
    CHECK(d[1024 + i] == doctest::Approx(-0.097).epsilon(1e-14));
  }
}

TEST_CASE("periodic laplacian") {
  const Tensor flat = laplacian_periodic(Tensor({32, 32}, 0.7), 2.0);
  for (double v : flat.data()) CHECK(v == 0.0);

  Tensor spike({32, 32});
  spike.at(0, 0) = 1.0;
  const Tensor l = laplacian_periodic(spike, 2.0);
  CHECK(l.at(0, 0) == -1.0);
  CHECK(l.at(0, 1) == 0.25);
  CHECK(l.at(1, 0) == 0.25);
  CHECK(l.at(31, 0) == 0.25);
  CHECK(l.at(0, 31) == 0.25);
  double rest = 0.0;
  for (std::size_t r = 0; r < 32; ++r) {
    for (std::size_t c = 0; c < 32; ++c) rest += std::abs(l.at(r, c));
  }
  CHECK(rest == doctest::Approx(2.0));

  Tensor ramp({32, 32});
  for (std::size_t r = 0; r < 32; ++r) {
    for (std::size_t c = 0; c < 32; ++c) ramp.at(r, c) = static_cast<double>(c);
  }
  CHECK(laplacian_periodic(ramp, 1.0).at(5, 0) != 0.0);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor f = testing::random_tensor({32, 32}, rng, -1.0, 1.0);
    double total = 0.0;
    const Tensor l = laplacian_periodic(f, 2.0);
    for (double v : l.data()) total += v;
    CHECK(std::abs(total) < 1e-10);
  }
  CHECK_THROWS_AS(laplacian_periodic(Tensor({4, 5}), 1.0), ShapeError);
}

TEST_CASE("rk4 step") {
  CHECK(rk4_step(decay(), Tensor::vector({1.0}), 0.1)[0] == doctest::Approx(0.9048375).epsilon(1e-7));
  const VectorField zero = [](const Tensor& x) { return Tensor::zeros_like(x); };
  CHECK(rk4_step(zero, Tensor::vector({2.5, -1.0}), 0.3) == Tensor::vector({2.5, -1.0}));
  const VectorField constant = [](const Tensor& x) {
    Tensor d = Tensor::zeros_like(x);
    d.fill(1.25);
    return d;
  };
  CHECK(rk4_step(constant, Tensor::vector({1.0}), 0.5)[0] == 1.0 + 1.25 * 0.5);
  const VectorField blowup = [](const Tensor& x) {
    Tensor d = Tensor::zeros_like(x);
    d.fill(std::numeric_limits<double>::quiet_NaN());
    return d;
  };
  CHECK_THROWS_AS(rk4_step(blowup, Tensor::vector({1.0}), 0.1), NumericError);
}

TEST_CASE("rk4 is fourth order") {
  const double ratio = rk4_error(0.1) / rk4_error(0.05);
  CHECK(ratio >= 12.0);
  CHECK(ratio <= 20.0);
}

TEST_CASE("adaptive integration of exponential decay") {
  const TimeGrid grid = TimeGrid::from_horizon(0.5, 2.0);
  CHECK(grid.count == 5);
  const Rollout r = integrate(decay(), Tensor::vector({1.0}), grid);
  for (std::size_t i = 0; i < grid.count; ++i) {
    CHECK(std::abs(r.states.at(i, 0) - std::exp(-grid.time(i))) < 1e-7);
  }
}

TEST_CASE("lotka-volterra trajectories") {
  const SystemSpec lv = SystemSpec::lotka_volterra();
  const VectorField f = [&](const Tensor& x) { return true_vf(lv, kLv1, x); };
  const TimeGrid grid = TimeGrid::from_horizon(0.5, 10.0);
  const Rollout eq = integrate(f, Tensor::vector({1.0, 1.0}), grid);
  for (std::size_t i = 0; i < grid.count; ++i) {
    CHECK(eq.states.at(i, 0) == 1.0);
    CHECK(eq.states.at(i, 1) == 1.0);
  }
  const Rollout r = integrate(f, Tensor::vector({2.0, 1.0}), grid);
  const double v0 = lv_first_integral(kLv1, 2.0, 1.0);
  for (std::size_t i = 0; i < grid.count; ++i) {
    const double v = lv_first_integral(kLv1, r.states.at(i, 0), r.states.at(i, 1));
    CHECK(std::abs(v - v0) / std::abs(v0) < 1e-5);
  }
  IntegrateOptions fixed;
  fixed.mode = IntegratorMode::Fixed;
  fixed.substeps = 64;
  const Rollout rf = integrate(f, Tensor::vector({2.0, 1.0}), grid, fixed);
  for (std::size_t i = 0; i < r.states.size(); ++i) {
    CHECK(std::abs(rf.states[i] - r.states[i]) / std::abs(r.states[i]) < 1e-6);
  }
}

TEST_CASE("gray-scott uniform fixed point is stationary") {
  const SystemSpec gs = SystemSpec::gray_scott();
  Tensor x({gs.state_dim()});
  for (std::size_t i = 0; i < 1024; ++i) x[i] = 1.0;
  const EnvironmentParams env = EnvironmentParams::gray_scott(0.037, 0.06);
  const VectorField f = [&](const Tensor& s) { return true_vf(gs, env, s); };
  const Rollout r = integrate(f, x, TimeGrid::from_horizon(40.0, 400.0));
  for (std::size_t i = 0; i < r.states.rows(); ++i) {
    for (std::size_t j = 0; j < gs.state_dim(); ++j) CHECK(r.states.at(i, j) == x[j]);
  }
}

TEST_CASE("central differences") {
  Tensor s({5, 1});
  for (std::size_t i = 0; i < 5; ++i) s.at(i, 0) = 3.0 * static_cast<double>(i) * 0.5 + 1.0;
  const Tensor d = central_difference(s, 0.5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(d.at(i, 0) == doctest::Approx(3.0));
  CHECK_THROWS_AS(central_difference(Tensor({1, 1}), 0.5), ArgumentError);
}

TEST_CASE("environment validation") {
  CHECK_THROWS_AS(validate_environment(SystemSpec::lotka_volterra(),
                                       EnvironmentParams::lotka_volterra(0.5, -1.0, 0.5, 0.5)),
                  ArgumentError);
  CHECK_NOTHROW(validate_environment(SystemSpec::lotka_volterra(), kLv1));
}

}
