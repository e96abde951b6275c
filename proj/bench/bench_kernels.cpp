#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "dynainfer/datagen.hpp"
#include "dynainfer/infer.hpp"
#include "dynainfer/kernels.hpp"
#include "dynainfer/models.hpp"

using namespace dynainfer;

namespace {

std::vector<double> random_vector(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

// rows x 64 -> 64, the hidden layer of the default models.
template <auto Kernel>
void BM_linear_forward(benchmark::State& state) {
  const std::size_t rows = static_cast<std::size_t>(state.range(0));
  const std::size_t in = 64, out = 64;
  const auto x = random_vector(rows * in, 1), w = random_vector(in * out, 2),
             b = random_vector(out, 3);
  std::vector<double> y(rows * out);
  for (auto _ : state) {
    Kernel(x.data(), rows, in, w.data(), b.data(), out, y.data());
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(rows));
}

template <auto Kernel>
void BM_linear_backward_params(benchmark::State& state) {
  const std::size_t rows = static_cast<std::size_t>(state.range(0));
  const std::size_t in = 64, out = 64;
  const auto dy = random_vector(rows * out, 1), x = random_vector(rows * in, 2);
  std::vector<double> dw(in * out), db(out);
  for (auto _ : state) {
    Kernel(dy.data(), x.data(), rows, in, out, dw.data(), db.data());
    benchmark::DoNotOptimize(dw.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(rows));
}

template <auto Kernel>
void BM_swish_forward(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  const auto x = random_vector(n, 1);
  std::vector<double> y(n);
  for (auto _ : state) {
    Kernel(x.data(), n, y.data());
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(n));
}

template <auto Kernel>
void BM_laplacian(benchmark::State& state) {
  const std::size_t side = static_cast<std::size_t>(state.range(0));
  const auto f = random_vector(side * side, 1);
  std::vector<double> out(side * side);
  for (auto _ : state) {
    Kernel(f.data(), side, 2.0, out.data());
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(side * side));
}

struct LvFixture {
  Dataset data;
  DecomposedModel model;
  LossSpec spec;
  LvFixture() {
    const EnvPreset& p = find_preset("paper-lv");
    data = generate_dataset(p, 4, Split::Train, 7);
    ModelOptions o;
    o.env_count = 9;
    std::mt19937_64 rng(0);
    model = make_model(p.spec, o, rng);
    spec = LossSpec::defaults(p.spec);
  }
};

const LvFixture& lv_fixture() {
  static const LvFixture f;
  return f;
}

void BM_loss_matrix_ref(benchmark::State& state) {
  const LvFixture& f = lv_fixture();
  const DatasetView view(f.data);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ref::loss_matrix(f.model, view, f.spec));
  }
}

void BM_loss_matrix_par(benchmark::State& state) {
  const LvFixture& f = lv_fixture();
  const DatasetView view(f.data);
  for (auto _ : state) {
    benchmark::DoNotOptimize(loss_matrix(f.model, view, f.spec));
  }
}

}  // namespace

BENCHMARK_TEMPLATE(BM_linear_forward, kernels::ref::linear_forward)->Arg(1024)->Arg(16384);
BENCHMARK_TEMPLATE(BM_linear_forward, kernels::par::linear_forward)->Arg(1024)->Arg(16384);
BENCHMARK_TEMPLATE(BM_linear_backward_params, kernels::ref::linear_backward_params)->Arg(16384);
BENCHMARK_TEMPLATE(BM_linear_backward_params, kernels::par::linear_backward_params)->Arg(16384);
BENCHMARK_TEMPLATE(BM_swish_forward, kernels::ref::swish_forward)->Arg(1 << 16);
BENCHMARK_TEMPLATE(BM_swish_forward, kernels::par::swish_forward)->Arg(1 << 16);
BENCHMARK_TEMPLATE(BM_laplacian, kernels::ref::laplacian_periodic)->Arg(32)->Arg(256);
BENCHMARK_TEMPLATE(BM_laplacian, kernels::par::laplacian_periodic)->Arg(32)->Arg(256);
BENCHMARK(BM_loss_matrix_ref)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_loss_matrix_par)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
