#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "dynainfer/autodiff.hpp"
#include "dynainfer/datagen.hpp"
#include "dynainfer/models.hpp"
#include "dynainfer/tensor.hpp"

namespace testing {

using namespace dynainfer;

inline Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng,
                            double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.storage()) v = u(rng);
  return t;
}

inline double eval_scalar(const std::function<ad::Var(ad::Var)>& f, const Tensor& p) {
  ad::Tape tape;
  return f(tape.constant(p)).value().item();
}

inline Tensor finite_difference(const std::function<ad::Var(ad::Var)>& f, const Tensor& p,
                                double h = 1e-5) {
  Tensor g = Tensor::zeros_like(p);
  for (std::size_t i = 0; i < p.size(); ++i) {
    Tensor a = p, b = p;
    a[i] += h;
    b[i] -= h;
    g[i] = (eval_scalar(f, a) - eval_scalar(f, b)) / (2.0 * h);
  }
  return g;
}

inline double max_rel_error(const Tensor& a, const Tensor& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, d);
  }
  return worst;
}

/// Two 1-D environments dx/dt = +x and dx/dt = -x, `per_env` trajectories each.
inline Dataset two_linear_systems(std::size_t per_env, std::uint64_t seed,
                                  double horizon = 1.0, double dt = 0.1) {
  Dataset ds = generate_dataset(SystemSpec::linear(1), TimeGrid::from_horizon(dt, horizon),
                                {EnvironmentParams::linear(1.0), EnvironmentParams::linear(-1.0)},
                                per_env, Split::Train, seed, "two-linear");
  attach_exact_derivatives(ds);
  return ds;
}

/// (m, n, mn) coefficients of an LV environment, [2, 3].
inline Tensor lv_coefficients(const EnvironmentParams& e) {
  const auto& v = e.values;
  return Tensor::matrix(2, 3, {v[0], 0.0, -v[1], 0.0, -v[2], v[3]});
}

/// Linear-basis model whose blocks are the true LV fields of `envs`.
inline DecomposedModel lv_truth_model(const std::vector<EnvironmentParams>& envs,
                                      double lambda = 0.0) {
  std::vector<Tensor> blocks;
  for (const auto& e : envs) blocks.push_back(lv_coefficients(e));
  return linear_basis_model(SystemSpec::lotka_volterra(), FeatureKind::LvBasis,
                            Tensor({2, 3}), blocks, lambda);
}

}  // namespace testing
