#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "dynainfer/errors.hpp"
#include "dynainfer/eval.hpp"
#include "dynainfer/infer.hpp"
#include "support.hpp"

using namespace dynainfer;
namespace fs = std::filesystem;

namespace {

LossSpec exact_derivative() {
  LossSpec s;
  s.mode = LossMode::Derivative;
  s.estimator = DerivativeEstimator::Exact;
  return s;
}

DecomposedModel random_mlp(std::size_t m, std::uint64_t seed,
                           DecompositionLaw law = DecompositionLaw::ParamOffset) {
  ModelOptions o;
  o.law = law;
  o.regularizer = law == DecompositionLaw::FunctionalSum ? Regularizer::FunctionNorm : Regularizer::L2;
  o.hidden = {8, 8};
  o.env_count = m;
  std::mt19937_64 rng(seed);
  return make_model(SystemSpec::lotka_volterra(), o, rng);
}

Dataset small_lv(std::size_t per_env, std::uint64_t seed, bool derivatives = false) {
  Dataset ds = generate_dataset(find_preset("paper-lv"), per_env, Split::Train, seed);
  if (derivatives) attach_exact_derivatives(ds);
  return ds;
}

Labels truth_of(const Dataset& ds) {
  const auto t = DatasetView::unsealed(ds).true_labels();
  return Labels(t.begin(), t.end());
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("infer-engine") {

TEST_CASE("derivative loss of a zero model on exponential decay") {
  const DecomposedModel zero = linear_basis_model(SystemSpec::linear(1), FeatureKind::RawState,
                                                  Tensor({1, 1}), {Tensor({1, 1})}, 0.0);
  const Tensor states = Tensor::matrix(3, 1, {1.0, std::exp(-0.5), std::exp(-1.0)});
  const Tensor derivs = Tensor::matrix(3, 1, {-1.0, -std::exp(-0.5), -std::exp(-1.0)});
  const double want = (1.0 + std::exp(-1.0) + std::exp(-2.0)) / 3.0;
  CHECK(traj_env_loss(zero, 0, states, 0.5, exact_derivative(), &derivs) ==
        doctest::Approx(want).epsilon(1e-14));
  CHECK(want == doctest::Approx(0.5011).epsilon(1e-4));
  CHECK_THROWS_AS(traj_env_loss(zero, 0, states, 0.5, exact_derivative()), ArgumentError);
}

TEST_CASE("a zero model on the equilibrium costs nothing") {
  const DecomposedModel zero = testing::lv_truth_model({EnvironmentParams{}});
  const Tensor eq = Tensor::matrix(3, 2, {1.0, 1.0, 1.0, 1.0, 1.0, 1.0});
  CHECK(traj_env_loss(zero, 0, eq, 0.5, LossSpec::defaults(SystemSpec::lotka_volterra())) == 0.0);
}

TEST_CASE("ground-truth fields fit their own trajectories") {
  const EnvPreset& p = find_preset("paper-lv");
  const Dataset ds = small_lv(2, 4);
  const DecomposedModel truth = testing::lv_truth_model(p.train);
  const DatasetView view = DatasetView::unsealed(ds);
  const LossSpec spec = LossSpec::defaults(p.spec);
  const Tensor l = loss_matrix(truth, view, spec);
  for (std::size_t i = 0; i < view.size(); ++i) {
    const auto e = static_cast<std::size_t>(view.true_env(i));
    CHECK(l.at(i, e) < 1e-8);
  }
  const Labels a = argmin_labels(l, Labels(view.size(), 0));
  CHECK(a == truth_of(ds));
}

TEST_CASE("argmin labels and the tie rule") {
  CHECK(argmin_labels(Tensor::matrix(1, 2, {0.5, 0.2}), Labels{0}) == Labels{1});
  CHECK(argmin_labels(Tensor::matrix(1, 2, {0.3, 0.3}), Labels{0}) == Labels{0});
  CHECK(argmin_labels(Tensor::matrix(1, 2, {0.3, 0.3}), Labels{1}) == Labels{1});
  CHECK(argmin_labels(Tensor::matrix(1, 3, {0.4, 0.3, 0.3}), Labels{0}) == Labels{1});
  CHECK(argmin_labels(Tensor::matrix(1, 2, {0.3, 0.3 * (1.0 + 1e-13)}), Labels{1}) == Labels{1});
  CHECK(argmin_labels(Tensor::matrix(1, 2, {0.3, 0.3 * (1.0 + 1e-9)}), Labels{1}) == Labels{0});
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(argmin_labels(Tensor::matrix(1, 2, {inf, 5.0}), Labels{0}) == Labels{1});
  CHECK(argmin_labels(Tensor::matrix(1, 2, {inf, inf}), Labels{1}) == Labels{1});
  CHECK(argmin_labels(Tensor::matrix(2, 1, {9.0, 0.1}), Labels{0, 0}) == Labels{0, 0});
}

TEST_CASE("one environment assigns everything to it") {
  const Dataset ds = small_lv(1, 2);
  const DatasetView view(ds);
  const DecomposedModel m = random_mlp(1, 3);
  const AssignmentState s = assign_step(m, view, AssignmentState::initial(Labels(view.size(), 0)),
                                        LossSpec::defaults(ds.spec));
  CHECK(s.labels == Labels(view.size(), 0));
  CHECK(s.round == 1);
  CHECK(s.history.size() == 1);
}

TEST_CASE("assignment ignores lambda") {
  const Dataset ds = small_lv(1, 5);
  const DatasetView view(ds);
  for (auto law : {DecompositionLaw::ParamOffset, DecompositionLaw::FunctionalSum}) {
    DecomposedModel m = random_mlp(4, 6, law);
    const AssignmentState prev = AssignmentState::initial(Labels(view.size(), 0));
    const LossSpec spec = LossSpec::defaults(ds.spec);
    m.lambda = 0.0;
    const Labels a = assign_step(m, view, prev, spec).labels;
    m.lambda = 1e3;
    CHECK(assign_step(m, view, prev, spec).labels == a);
  }
}

TEST_CASE("a previous argmin is kept") {
  const Dataset ds = small_lv(1, 8);
  const DatasetView view(ds);
  const DecomposedModel m = random_mlp(3, 9);
  const LossSpec spec = LossSpec::defaults(ds.spec);
  const AssignmentState first = assign_step(m, view, AssignmentState::initial(Labels(view.size(), 2)), spec);
  const AssignmentState second = assign_step(m, view, first, spec);
  CHECK(second.labels == first.labels);
  // Duplicated blocks tie exactly; every trajectory stays where it was.
  DecomposedModel dup = m;
  dup.env_blocks[1] = dup.env_blocks[0];
  Labels prev(view.size());
  for (std::size_t i = 0; i < prev.size(); ++i) prev[i] = i % 2;
  const Labels l = assign_step(dup, view, AssignmentState::initial(prev), spec).labels;
  for (std::size_t i = 0; i < l.size(); ++i) {
    if (l[i] != 2) CHECK(l[i] == prev[i]);
  }
}

TEST_CASE("permuting blocks permutes assignments and keeps the losses") {
  const Dataset ds = small_lv(1, 10);
  const DatasetView view(ds);
  const DecomposedModel m = random_mlp(4, 11);
  DecomposedModel p = m;
  const std::size_t perm[] = {3, 1, 0, 2};
  for (std::size_t e = 0; e < 4; ++e) p.env_blocks[e] = m.env_blocks[perm[e]];
  const LossSpec spec = LossSpec::defaults(ds.spec);
  const AssignmentState prev = AssignmentState::initial(Labels(view.size(), 0));
  const Labels a = assign_step(m, view, prev, spec).labels;
  const Labels b = assign_step(p, view, prev, spec).labels;
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(perm[b[i]] == a[i]);
  const Tensor lm = loss_matrix(m, view, spec), lp = loss_matrix(p, view, spec);
  for (std::size_t i = 0; i < view.size(); ++i) {
    std::vector<double> x, y;
    for (std::size_t e = 0; e < 4; ++e) {
      x.push_back(lm.at(i, e));
      y.push_back(lp.at(i, e));
    }
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    CHECK(x == y);
  }
}

TEST_CASE("loss matrix kernels agree bit for bit") {
  const Dataset ds = small_lv(1, 12, true);
  const DatasetView view(ds);
  const DecomposedModel m = random_mlp(5, 13, DecompositionLaw::FunctionalSum);
  LossSpec cd;
  cd.mode = LossMode::Derivative;
  for (const LossSpec& spec : {LossSpec::defaults(ds.spec), exact_derivative(), cd}) {
    const Tensor a = loss_matrix(m, view, spec), b = ref::loss_matrix(m, view, spec);
    CHECK(a == b);
    CHECK(a.rows() == view.size());
    CHECK(a.cols() == 5);
  }
  const DecomposedModel one = random_mlp(1, 14);
  const Tensor col = loss_matrix(one, view, LossSpec::defaults(ds.spec));
  for (std::size_t i = 0; i < view.size(); ++i) {
    CHECK(col.at(i, 0) == traj_env_loss(one, 0, view, i, LossSpec::defaults(ds.spec)));
  }
}

TEST_CASE("reassignment never raises the data fit") {
  const LossSpec spec = LossSpec::defaults(SystemSpec::lotka_volterra());
  for (std::uint64_t k = 0; k < 20; ++k) {
    const Dataset ds = small_lv(1, 100 + k);
    const DatasetView view(ds);
    const DecomposedModel m = random_mlp(3 + k % 4, 200 + k);
    std::mt19937_64 rng(k);
    Labels prev(view.size());
    for (auto& l : prev) l = rng() % m.env_count();
    const Tensor losses = loss_matrix(m, view, spec);
    const AssignmentState next = assign_step(m, view, AssignmentState::initial(prev), spec);
    CHECK(datafit_from_matrix(losses, next.labels) <= datafit_from_matrix(losses, prev));
  }
}

TEST_CASE("optimize step") {
  const Dataset ds = testing::two_linear_systems(3, 15);
  const DatasetView view(ds);
  const Labels truth = truth_of(ds);
  const DecomposedModel like = linear_basis_model(SystemSpec::linear(1), FeatureKind::RawState,
                                                  Tensor({1, 1}), {Tensor({1, 1}), Tensor({1, 1})}, 0.0);
  OptimizeOptions o;
  const OptimizeResult r = optimize_step(like, view, truth, exact_derivative(), o);
  CHECK(std::abs(linear_coefficients(r.model, 0)[0] - 1.0) < 1e-10);
  CHECK(std::abs(linear_coefficients(r.model, 1)[0] + 1.0) < 1e-10);
  CHECK(objective(r.model, view, truth, exact_derivative()).total() <=
        objective(like, view, truth, exact_derivative()).total());

  const Dataset lv = small_lv(1, 16);
  const DatasetView lview(lv);
  const DecomposedModel m = random_mlp(2, 17);
  o.epochs = 0;
  const OptimizeResult same = optimize_step(m, lview, Labels(lview.size(), 1), LossSpec::defaults(lv.spec), o);
  CHECK(same.model.shared == m.shared);
  CHECK(same.model.env_blocks == m.env_blocks);
  o.epochs = 5;
  o.freeze_shared = true;
  const OptimizeResult frozen = optimize_step(m, lview, Labels(lview.size(), 1), LossSpec::defaults(lv.spec), o);
  CHECK(frozen.model.shared == m.shared);
  CHECK(!(frozen.model.env_blocks[1] == m.env_blocks[1]));
}

TEST_CASE("two linear systems separate within five rounds") {
  const Dataset ds = testing::two_linear_systems(4, 18);
  ModelOptions o;
  o.law = DecompositionLaw::LinearBasis;
  o.regularizer = Regularizer::Frobenius;
  o.lambda = 1e-4;
  o.env_count = 2;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainHyper h;
    h.rounds = 8;
    h.seed = seed;
    const TrainResult r = dynainfer_train(DatasetView(ds), o, exact_derivative(), h);
    const auto& hist = r.report.assignments.history;
    h.init = InitStrategy::Random;
    const TrainResult cold = dynainfer_train(DatasetView(ds), o, exact_derivative(), h);
    for (std::size_t k = 1; k < cold.report.rounds.size(); ++k) {
      CHECK(cold.report.rounds[k].r_total <= cold.report.rounds[k - 1].r_total);
    }
    REQUIRE(hist.size() == 8);
    CHECK(match_accuracy(hist[4], truth_of(ds)).accuracy == 1.0);
    for (std::size_t k = 4; k < hist.size(); ++k) CHECK(hist[k] == hist[4]);
    CHECK(r.report.stable_from <= 5);
    for (std::size_t k = 1; k < r.report.rounds.size(); ++k) {
      CHECK(r.report.rounds[k].r_total <= r.report.rounds[k - 1].r_total);
    }
  }
}

TEST_CASE("mlp training bookkeeping") {
  const Dataset ds = small_lv(1, 19);
  const DatasetView view(ds);
  ModelOptions o;
  o.hidden = {8};
  o.env_count = 3;
  TrainHyper h;
  h.rounds = 3;
  h.epochs = 10;
  h.init = InitStrategy::Random;
  h.seed = 20;
  const LossSpec spec = LossSpec::defaults(ds.spec);
  const TrainResult r = dynainfer_train(view, o, spec, h);
  CHECK(r.report.rounds.size() == 3);
  CHECK(r.report.assignments.history.size() == r.report.assignments.round);
  CHECK(r.report.assignments.round == 3);
  for (const RoundRecord& rec : r.report.rounds) {
    CHECK(std::abs(rec.r_total - (rec.r_datafit + rec.r_omega)) <= 1e-10);
    CHECK(rec.r_after_assign <= rec.r_before_assign);
  }
  const Objective obj = objective(r.model, view, r.report.assignments.labels, spec);
  CHECK(obj.total() == doctest::Approx(r.report.rounds.back().r_total).epsilon(1e-12));
  const TrainResult again = dynainfer_train(view, o, spec, h);
  CHECK(again.model.shared == r.model.shared);
  CHECK(again.report.assignments.history == r.report.assignments.history);

  o.env_count = 1;
  const TrainResult single = dynainfer_train(view, o, spec, h);
  for (const Labels& l : single.report.assignments.history) CHECK(l == Labels(view.size(), 0));
}

TEST_CASE("baseline assignments") {
  const Dataset ds = small_lv(4, 21);
  const DatasetView sealed(ds);
  REQUIRE(sealed.size() == 36);
  CHECK(baseline_assign(BaselineStrategy::AllInOne, sealed, 9, 0).labels == Labels(36, 0));
  const Labels one = baseline_assign(BaselineStrategy::OnePerEnv, sealed, 9, 0).labels;
  for (std::size_t i = 0; i < 36; ++i) CHECK(one[i] == i);
  CHECK(baseline_env_count(BaselineStrategy::OnePerEnv, sealed, 9) == 36);
  CHECK(baseline_env_count(BaselineStrategy::AllInOne, sealed, 9) == 1);
  const Labels oracle = baseline_assign(BaselineStrategy::Oracle, DatasetView::unsealed(ds), 9, 0).labels;
  for (std::size_t e = 0; e < 9; ++e) CHECK(std::count(oracle.begin(), oracle.end(), e) == 4);
  CHECK_THROWS_AS(baseline_assign(BaselineStrategy::Oracle, sealed, 9, 0), PermissionError);
  const Labels r1 = baseline_assign(BaselineStrategy::Random, sealed, 9, 7).labels;
  CHECK(r1 == baseline_assign(BaselineStrategy::Random, sealed, 9, 7).labels);
  for (std::size_t l : r1) CHECK(l < 9);
  for (auto s : {BaselineStrategy::AllInOne, BaselineStrategy::OnePerEnv, BaselineStrategy::Random,
                 BaselineStrategy::Oracle}) {
    CHECK(parse_baseline(baseline_name(s)) == s);
  }
}

TEST_CASE("adaptation freezes the shared block") {
  const EnvPreset& p = find_preset("paper-lv");
  Dataset ad = generate_dataset(p, 2, Split::Adapt, 22);
  attach_exact_derivatives(ad);
  const DecomposedModel trained = linear_basis_model(p.spec, FeatureKind::LvBasis,
                                                     testing::lv_coefficients(p.train[0]),
                                                     std::vector<Tensor>(9, Tensor({2, 3})), 0.0);
  const DecomposedModel a = adapt(trained, DatasetView::unsealed(ad), exact_derivative(), 0, 0.0);
  CHECK(checksum(a.shared) == checksum(trained.shared));
  REQUIRE(a.env_count() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    const Tensor c = linear_coefficients(a, e), want = testing::lv_coefficients(p.adapt[e]);
    for (std::size_t k = 0; k < 6; ++k) CHECK(std::abs(c[k] - want[k]) < 1e-6);
  }
  CHECK(std::abs(p.adapt[0].values[0] - 0.7) < 1e-15);
  CHECK_THROWS_AS(adapt(trained, DatasetView(ad), exact_derivative(), 0, 0.0), PermissionError);

  const DecomposedModel mlp = random_mlp(9, 23);
  const DatasetView view = DatasetView::unsealed(ad);
  const DecomposedModel untrained = adapt(mlp, view, LossSpec::defaults(p.spec), 0, 1e-2);
  const Tensor x = view.states(0);
  CHECK(model_vf(untrained, 0, x) == mlp_forward(mlp.layout, mlp.shared.data(), x));
  const DecomposedModel tuned = adapt(mlp, view, LossSpec::defaults(p.spec), 20, 1e-2);
  CHECK(checksum(tuned.shared) == checksum(mlp.shared));
  CHECK(tuned.env_count() == 2);
}

TEST_CASE("report csv files") {
  const Dataset ds = testing::two_linear_systems(2, 24);
  ModelOptions o;
  o.law = DecompositionLaw::LinearBasis;
  o.regularizer = Regularizer::Frobenius;
  o.env_count = 2;
  TrainHyper h;
  h.rounds = 2;
  const TrainResult r = dynainfer_train(DatasetView(ds), o, exact_derivative(), h);
  const fs::path dir = fs::temp_directory_path() / "dynainfer_csv_test";
  write_rounds_csv(r.report, dir / "rounds.csv");
  write_assignments_csv(r.report, DatasetView(ds), dir / "sealed.csv");
  write_assignments_csv(r.report, DatasetView::unsealed(ds), dir / "open.csv");
  const std::string rounds = slurp(dir / "rounds.csv");
  CHECK(rounds.rfind("round,R_total,R_datafit,R_omega,n_reassigned,elapsed_ms\n", 0) == 0);
  CHECK(std::count(rounds.begin(), rounds.end(), '\n') == 3);
  const std::string sealed = slurp(dir / "sealed.csv");
  CHECK(sealed.rfind("round,traj_id,assigned,true\n", 0) == 0);
  CHECK(sealed.find(",-1\n") != std::string::npos);
  const std::string open = slurp(dir / "open.csv");
  CHECK(open.find(",-1\n") == std::string::npos);
  CHECK(std::count(open.begin(), open.end(), '\n') == 1 + 2 * 4);
  std::istringstream rows(open);
  std::string line;
  std::getline(rows, line);
  while (std::getline(rows, line)) {
    std::size_t round = 0, id = 0;
    int assigned = 0, truth = 0;
    char c = 0;
    std::istringstream(line) >> round >> c >> id >> c >> assigned >> c >> truth;
    CHECK(assigned >= 1);
    CHECK(assigned <= 2);
    CHECK(truth >= 1);
    CHECK(truth <= 2);
  }
  write_loss_matrix_csv(loss_matrix(r.model, DatasetView(ds), exact_derivative()), DatasetView(ds),
                        dir / "lm.csv");
  CHECK(slurp(dir / "lm.csv").rfind("traj_id,env_1,env_2\n", 0) == 0);
  fs::remove_all(dir);
}

}
