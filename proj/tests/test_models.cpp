#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "dynainfer/errors.hpp"
#include "dynainfer/infer.hpp"
#include "dynainfer/models.hpp"
#include "support.hpp"

using namespace dynainfer;
namespace fs = std::filesystem;

namespace {

DecomposedModel small_model(DecompositionLaw law, Regularizer reg, std::size_t m,
                            std::uint64_t seed = 1) {
  ModelOptions o;
  o.law = law;
  o.regularizer = reg;
  o.hidden = {6, 6};
  o.env_count = m;
  o.lambda = 1e-3;
  std::mt19937_64 rng(seed);
  return make_model(SystemSpec::lotka_volterra(), o, rng);
}

LossSpec exact_derivative() {
  LossSpec s;
  s.mode = LossMode::Derivative;
  s.estimator = DerivativeEstimator::Exact;
  return s;
}

DecomposedModel linear_like(std::size_t m, double lambda, const SystemSpec& spec,
                            FeatureKind f) {
  const std::size_t p = feature_dim(spec, f), out = row_output_dim(spec, f);
  return linear_basis_model(spec, f, Tensor({out, p}), std::vector<Tensor>(m, Tensor({out, p})),
                            lambda);
}

}  // namespace

TEST_SUITE("models") {

TEST_CASE("names parse back") {
  for (auto law : {DecompositionLaw::FunctionalSum, DecompositionLaw::ParamOffset,
                   DecompositionLaw::LinearBasis}) {
    CHECK(parse_law(law_name(law)) == law);
  }
  for (auto r : {Regularizer::FunctionNorm, Regularizer::L2, Regularizer::L1, Regularizer::Frobenius}) {
    CHECK(parse_regularizer(regularizer_name(r)) == r);
  }
  for (auto f : {FeatureKind::RawState, FeatureKind::LvBasis, FeatureKind::GsStencil}) {
    CHECK(parse_feature(feature_name(f)) == f);
  }
  CHECK_THROWS_AS(parse_law("hypernetwork"), ConfigError);
}

TEST_CASE("feature maps") {
  const SystemSpec lv = SystemSpec::lotka_volterra(), gs = SystemSpec::gray_scott();
  CHECK(feature_dim(lv, FeatureKind::RawState) == 2);
  CHECK(feature_dim(lv, FeatureKind::LvBasis) == 3);
  CHECK(feature_dim(gs, FeatureKind::GsStencil) == 4);
  CHECK(row_output_dim(gs, FeatureKind::GsStencil) == 2);
  const Tensor b = features(lv, FeatureKind::LvBasis, Tensor::matrix(1, 2, {2.0, 3.0}));
  CHECK(b == Tensor::matrix(1, 3, {2.0, 3.0, 6.0}));
  CHECK_THROWS_AS(feature_dim(lv, FeatureKind::GsStencil), ArgumentError);
}

TEST_CASE("zero offsets give one field for every environment") {
  DecomposedModel m = small_model(DecompositionLaw::ParamOffset, Regularizer::L2, 3);
  for (Tensor& b : m.env_blocks) b.fill(0.0);
  const Tensor x = Tensor::matrix(2, 2, {1.0, 2.0, 0.5, 1.5});
  CHECK(model_vf(m, 0, x) == model_vf(m, 1, x));
  CHECK(model_vf(m, 0, x) == model_vf(m, 2, x));
  CHECK(model_vf(m, 0, x) == mlp_forward(m.layout, m.shared.data(), x));
  CHECK_THROWS_AS(model_vf(m, 3, x), IndexError);
}

TEST_CASE("functional sum with a zero network is the shared network") {
  DecomposedModel m = small_model(DecompositionLaw::FunctionalSum, Regularizer::FunctionNorm, 2);
  m.env_blocks[1].fill(0.0);
  const Tensor x = Tensor::matrix(3, 2, {1.0, 2.0, 0.5, 1.5, 2.5, 2.5});
  CHECK(model_vf(m, 1, x) == mlp_forward(m.layout, m.shared.data(), x));
  std::mt19937_64 rng(3);
  m.env_blocks[0] = neutral_env_block(m, rng);
  CHECK(model_vf(m, 0, x) == mlp_forward(m.layout, m.shared.data(), x));
}

TEST_CASE("linear basis reproduces the lotka-volterra field") {
  const SystemSpec lv = SystemSpec::lotka_volterra();
  const Tensor coeffs = Tensor::matrix(2, 3, {0.5, 0.0, -0.5, 0.0, -0.5, 0.5});
  const DecomposedModel m = linear_basis_model(lv, FeatureKind::LvBasis, coeffs, {Tensor({2, 3})}, 0.0);
  const Tensor d = model_vf(m, 0, Tensor::vector({2.0, 1.0}));
  CHECK(d[0] == doctest::Approx(0.0));
  CHECK(d[1] == doctest::Approx(0.5));
  CHECK(linear_coefficients(m, 0) == coeffs);
}

TEST_CASE("regularizer values") {
  DecomposedModel po = small_model(DecompositionLaw::ParamOffset, Regularizer::L2, 1);
  const Tensor probes = Tensor::matrix(2, 2, {1.0, 1.0, 2.0, 2.0});
  po.env_blocks[0].fill(0.0);
  CHECK(omega(po, 0, probes) == 0.0);
  po.env_blocks[0][0] = 3.0;
  po.env_blocks[0][1] = 4.0;
  CHECK(omega(po, 0, probes) == 25.0);
  po.regularizer = Regularizer::L1;
  po.env_blocks[0][1] = -4.0;
  CHECK(omega(po, 0, probes) == 7.0);

  DecomposedModel fs = small_model(DecompositionLaw::FunctionalSum, Regularizer::FunctionNorm, 1);
  fs.env_blocks[0].fill(0.0);
  CHECK(omega(fs, 0, probes) == 0.0);
  std::mt19937_64 rng(8);
  fs.env_blocks[0] = testing::random_tensor({fs.block_size()}, rng, -0.5, 0.5);
  const Tensor g = mlp_forward(fs.layout, fs.env_blocks[0].data(), probes);
  double want = 0.0;
  for (double v : g.data()) want += v * v;
  CHECK(omega(fs, 0, probes) == doctest::Approx(want / 2.0).epsilon(1e-12));
  CHECK_THROWS_AS(omega(fs, 0, Tensor({0, 2})), ArgumentError);

  const DecomposedModel lb = linear_like(1, 0.0, SystemSpec::lotka_volterra(), FeatureKind::LvBasis);
  CHECK(omega(lb, 0, probes) == 0.0);
}

TEST_CASE("l2 and frobenius penalties are strictly convex") {
  std::mt19937_64 rng(12);
  DecomposedModel m = small_model(DecompositionLaw::ParamOffset, Regularizer::L2, 3);
  const Tensor probes = Tensor::matrix(1, 2, {1.0, 1.0});
  for (int trial = 0; trial < 50; ++trial) {
    m.env_blocks[0] = testing::random_tensor({m.block_size()}, rng);
    m.env_blocks[1] = testing::random_tensor({m.block_size()}, rng);
    for (std::size_t i = 0; i < m.block_size(); ++i) {
      m.env_blocks[2][i] = 0.5 * (m.env_blocks[0][i] + m.env_blocks[1][i]);
    }
    const double mid = omega(m, 2, probes);
    CHECK(mid < 0.5 * (omega(m, 0, probes) + omega(m, 1, probes)));
  }
}

TEST_CASE("permuting blocks permutes environments") {
  const DecomposedModel m = small_model(DecompositionLaw::ParamOffset, Regularizer::L2, 4, 5);
  DecomposedModel p = m;
  const std::size_t perm[] = {2, 0, 3, 1};
  for (std::size_t e = 0; e < 4; ++e) p.env_blocks[e] = m.env_blocks[perm[e]];
  const Tensor x = Tensor::matrix(2, 2, {1.0, 2.0, 0.5, 1.5});
  for (std::size_t e = 0; e < 4; ++e) CHECK(model_vf(p, e, x) == model_vf(m, perm[e], x));
}

TEST_CASE("exact solve on two linear systems") {
  const Dataset ds = testing::two_linear_systems(3, 7);
  const DatasetView view(ds);
  const auto truth = DatasetView::unsealed(ds).true_labels();
  const std::vector<std::size_t> labels(truth.begin(), truth.end());
  const DecomposedModel like = linear_like(2, 0.0, SystemSpec::linear(1), FeatureKind::RawState);
  const DecomposedModel sol = solve_linear_basis(like, view, labels, DerivativeEstimator::Exact);
  CHECK(std::abs(linear_coefficients(sol, 0)[0] - 1.0) < 1e-10);
  CHECK(std::abs(linear_coefficients(sol, 1)[0] + 1.0) < 1e-10);
}

TEST_CASE("one environment with lambda > 0 leaves the block empty") {
  const Dataset ds = generate_dataset(SystemSpec::linear(1), TimeGrid::from_horizon(0.1, 1.0),
                                      {EnvironmentParams::linear(0.7)}, 3, Split::Train, 1);
  Dataset d = ds;
  attach_exact_derivatives(d);
  const DecomposedModel like = linear_like(1, 1e-2, SystemSpec::linear(1), FeatureKind::RawState);
  const std::vector<std::size_t> labels(3, 0);
  const DecomposedModel sol = solve_linear_basis(like, DatasetView(d), labels, DerivativeEstimator::Exact);
  CHECK(std::abs(sol.env_blocks[0][0]) < 1e-12);
  CHECK(sol.shared[0] == doctest::Approx(0.7).epsilon(1e-10));
}

TEST_CASE("exact solve recovers lotka-volterra coefficients") {
  const EnvPreset& preset = find_preset("paper-lv");
  Dataset ds = generate_dataset(preset.spec, preset.grid, {preset.train[0]}, 4, Split::Train, 3);
  attach_exact_derivatives(ds);
  const DecomposedModel like = linear_like(1, 0.0, preset.spec, FeatureKind::LvBasis);
  const std::vector<std::size_t> labels(4, 0);
  const DecomposedModel sol = solve_linear_basis(like, DatasetView(ds), labels, DerivativeEstimator::Exact);
  const Tensor c = linear_coefficients(sol, 0);
  const double want[] = {0.5, 0.0, -0.5, 0.0, -0.5, 0.5};
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(c[i] - want[i]) < 1e-8);
}

TEST_CASE("singular systems at lambda = 0 name the environment") {
  const Dataset ds = testing::two_linear_systems(2, 3);
  const DecomposedModel like = linear_like(3, 0.0, SystemSpec::linear(1), FeatureKind::RawState);
  const std::vector<std::size_t> labels{0, 0, 1, 1};
  try {
    solve_linear_basis(like, DatasetView(ds), labels, DerivativeEstimator::Exact);
    FAIL("expected rank deficiency");
  } catch (const RankDeficiencyError& e) {
    CHECK(e.env() == 2);
  }
  const DecomposedModel ridge = linear_like(3, 1e-3, SystemSpec::linear(1), FeatureKind::RawState);
  const DecomposedModel sol = solve_linear_basis(ridge, DatasetView(ds), labels, DerivativeEstimator::Exact);
  CHECK(sol.env_blocks[2][0] == 0.0);
}

TEST_CASE("exact solve is a minimiser") {
  const EnvPreset& preset = find_preset("paper-lv");
  Dataset ds = generate_dataset(preset, 2, Split::Train, 6);
  attach_exact_derivatives(ds);
  const DatasetView view(ds);
  std::vector<std::size_t> labels(ds.trajectories.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 3;
  const DecomposedModel like = linear_like(3, 1e-2, preset.spec, FeatureKind::LvBasis);
  const DecomposedModel sol = solve_linear_basis(like, view, labels, DerivativeEstimator::Exact);
  const LossSpec spec = exact_derivative();
  const double best = objective(sol, view, labels, spec).total();
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n(0.0, 1.0);
  const std::size_t dim = sol.shared.size() * 4;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> dir(dim);
    double norm = 0.0;
    for (double& v : dir) {
      v = n(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    DecomposedModel p = sol;
    std::size_t k = 0;
    for (double& v : p.shared.storage()) v += 1e-3 * dir[k++] / norm;
    for (Tensor& b : p.env_blocks) {
      for (double& v : b.storage()) v += 1e-3 * dir[k++] / norm;
    }
    CHECK(objective(p, view, labels, spec).total() >= best);
  }
}

TEST_CASE("law and regularizer pairs are checked") {
  ModelOptions o;
  o.law = DecompositionLaw::FunctionalSum;
  o.regularizer = Regularizer::L2;
  o.hidden = {4};
  std::mt19937_64 rng(0);
  CHECK_THROWS_AS(validate_model(make_model(SystemSpec::lotka_volterra(), o, rng)), ArgumentError);
}

TEST_CASE("gray-scott stencil models produce whole-field derivatives") {
  ModelOptions o;
  o.features = FeatureKind::GsStencil;
  o.hidden = {8};
  o.env_count = 2;
  std::mt19937_64 rng(4);
  const SystemSpec gs = SystemSpec::gray_scott();
  const DecomposedModel m = make_model(gs, o, rng);
  CHECK(m.layout.in_dim() == 4);
  CHECK(m.layout.out_dim() == 2);
  const Tensor x = sample_ic(gs, 3);
  const Tensor d = model_vf(m, 1, x);
  CHECK(d.size() == gs.state_dim());
  // Translation equivariance on the periodic grid.
  Tensor shifted = x;
  for (std::size_t f = 0; f < 2; ++f) {
    for (std::size_t r = 0; r < 32; ++r) {
      for (std::size_t c = 0; c < 32; ++c) shifted[f * 1024 + r * 32 + (c + 1) % 32] = x[f * 1024 + r * 32 + c];
    }
  }
  const Tensor ds = model_vf(m, 1, shifted);
  for (std::size_t f = 0; f < 2; ++f) {
    for (std::size_t r = 0; r < 32; ++r) {
      for (std::size_t c = 0; c < 32; ++c) {
        CHECK(ds[f * 1024 + r * 32 + (c + 1) % 32] == doctest::Approx(d[f * 1024 + r * 32 + c]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("checkpoint round trip") {
  const fs::path p = fs::temp_directory_path() / "dynainfer_model_rt.dynf";
  const DecomposedModel models[] = {
      small_model(DecompositionLaw::FunctionalSum, Regularizer::FunctionNorm, 3),
      small_model(DecompositionLaw::ParamOffset, Regularizer::L1, 2),
      linear_like(4, 0.5, SystemSpec::lotka_volterra(), FeatureKind::LvBasis),
  };
  for (const DecomposedModel& m : models) {
    save_model(m, p);
    const DecomposedModel b = load_model(p);
    CHECK(b.law == m.law);
    CHECK(b.regularizer == m.regularizer);
    CHECK(b.features == m.features);
    CHECK(b.lambda == m.lambda);
    CHECK(b.system == m.system);
    CHECK(b.layout == m.layout);
    CHECK(b.shared == m.shared);
    CHECK(b.env_blocks == m.env_blocks);
    std::ifstream is(p, std::ios::binary);
    char head[13];
    is.read(head, 13);
    CHECK(std::string(head, 4) == "DYNF");
    CHECK(static_cast<std::uint8_t>(head[8]) == static_cast<std::uint8_t>(m.law));
    CHECK(static_cast<std::uint8_t>(head[9]) == m.env_count());
  }
  {
    std::ifstream is(p, std::ios::binary);
    std::vector<char> bytes{std::istreambuf_iterator<char>(is), {}};
    bytes.resize(bytes.size() - 5);
    std::ofstream os(p, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(load_model(p), FormatError);
  fs::remove(p);
}

}
