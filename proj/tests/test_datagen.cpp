#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "dynainfer/datagen.hpp"
#include "dynainfer/errors.hpp"

using namespace dynainfer;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("dynainfer_test_" + name);
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void write_bytes(const fs::path& p, const std::vector<char>& b) {
  std::ofstream os(p, std::ios::binary);
  os.write(b.data(), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_SUITE("datagen") {

TEST_CASE("preset tables") {
  const EnvPreset& lv = find_preset("paper-lv");
  CHECK(lv.train.size() == 9);
  CHECK(lv.adapt.size() == 2);
  CHECK(lv.train[0] == EnvironmentParams::lotka_volterra(0.5, 0.5, 0.5, 0.5));
  CHECK(lv.adapt[0] == EnvironmentParams::lotka_volterra(0.7, 0.8, 0.5, 0.5));
  CHECK(lv.grid.dt == 0.5);
  CHECK(lv.grid.count == 21);
  const EnvPreset& gs = find_preset("paper-gs");
  CHECK(gs.train.size() == 3);
  CHECK(gs.adapt.size() == 2);
  CHECK(gs.train[0].values[0] == 0.037);
  CHECK(gs.train[0].values[1] == 0.06);
  CHECK(gs.grid.count == 11);
  CHECK(gs.spec.state_dim() == 2048);
  CHECK_THROWS(find_preset("paper-ns"));
}

TEST_CASE("initial conditions") {
  const SystemSpec lv = SystemSpec::lotka_volterra();
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Tensor x = sample_ic(lv, s);
    CHECK(x[0] >= 1.0);
    CHECK(x[0] <= 3.0);
    CHECK(x[1] >= 1.0);
    CHECK(x[1] <= 3.0);
  }
  CHECK(sample_ic(lv, 7) == sample_ic(lv, 7));
  CHECK(sample_ic(lv, 7) != sample_ic(lv, 8));

  const SystemSpec gs = SystemSpec::gray_scott();
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor x = sample_ic(gs, s);
    std::size_t differ = 0;
    for (std::size_t i = 0; i < 1024; ++i) {
      const double m = x[i], n = x[1024 + i];
      if (m == 0.0 && n == 1.0) continue;
      ++differ;
      CHECK(m == 0.95);
      CHECK(n == 0.05);
    }
    CHECK(differ <= 12);
    CHECK(differ >= 4);
  }
}

TEST_CASE("dataset sizes and labels") {
  const Dataset train = generate_dataset(find_preset("paper-lv"), 4, Split::Train, 1);
  CHECK(train.trajectories.size() == 36);
  std::vector<int> counts(9, 0);
  for (const Trajectory& t : train.trajectories) {
    REQUIRE(t.true_env >= 0);
    ++counts[static_cast<std::size_t>(t.true_env)];
    CHECK(t.states.rows() == 21);
    for (double v : t.states.data()) {
      CHECK(v > 0.0);
      CHECK(v < 50.0);
    }
  }
  for (int c : counts) CHECK(c == 4);

  const Dataset test = generate_dataset(find_preset("paper-lv"), 32, Split::Test, 1);
  CHECK(test.trajectories.size() == 288);

  const Dataset one = generate_dataset(SystemSpec::linear(1), TimeGrid::from_horizon(0.1, 1.0),
                                       {EnvironmentParams::linear(1.0)}, 1, Split::Train, 3);
  CHECK(one.trajectories.size() == 1);
  CHECK(one.trajectories[0].true_env == 0);
}

TEST_CASE("stored states reproduce under the labelled field") {
  const Dataset ds = generate_dataset(find_preset("paper-lv"), 2, Split::Train, 5);
  for (const Trajectory& t : ds.trajectories) {
    const EnvironmentParams& env = ds.environments[static_cast<std::size_t>(t.true_env)];
    const VectorField f = [&](const Tensor& x) { return true_vf(ds.spec, env, x); };
    for (std::size_t i = 0; i + 1 < t.states.rows(); ++i) {
      const Tensor x0 = Tensor::vector({t.states.at(i, 0), t.states.at(i, 1)});
      TimeGrid g{0.0, ds.grid.dt, 2};
      const Rollout r = integrate(f, x0, g);
      for (std::size_t j = 0; j < 2; ++j) {
        const double want = t.states.at(i + 1, j);
        CHECK(std::abs(r.states.at(1, j) - want) / std::abs(want) < 1e-6);
      }
    }
  }
}

TEST_CASE("sealed views withhold labels") {
  const Dataset ds = generate_dataset(find_preset("paper-lv"), 1, Split::Train, 2);
  const DatasetView sealed(ds);
  CHECK(sealed.sealed());
  CHECK_THROWS_AS(sealed.true_env(0), PermissionError);
  CHECK_THROWS_AS(sealed.true_labels(), PermissionError);
  CHECK(sealed.label_or_hidden(0) == kHiddenEnv);
  const DatasetView open = DatasetView::unsealed(ds);
  CHECK(open.true_env(3) == 3);
  Dataset hidden = ds;
  hidden.trajectories[0].true_env = kHiddenEnv;
  CHECK_THROWS_AS(DatasetView::unsealed(hidden).true_env(0), PermissionError);
}

TEST_CASE("seed isolation") {
  const Dataset a = generate_dataset(find_preset("paper-lv"), 2, Split::Train, 10);
  const Dataset b = generate_dataset(find_preset("paper-lv"), 2, Split::Train, 10);
  const Dataset c = generate_dataset(find_preset("paper-lv"), 2, Split::Train, 11);
  for (std::size_t i = 0; i < a.trajectories.size(); ++i) {
    CHECK(a.trajectories[i].states == b.trajectories[i].states);
  }
  CHECK(a.trajectories[0].states != c.trajectories[0].states);
}

TEST_CASE("file round trip is bit exact") {
  const fs::path p = temp_file("rt.dyn");
  for (const char* preset : {"paper-lv", "paper-gs"}) {
    const Dataset ds = generate_dataset(find_preset(preset), 1, Split::Adapt, 4);
    save_dataset(ds, p);
    CHECK(fs::exists(manifest_path(p)));
    const Dataset back = load_dataset(p);
    CHECK(back.spec == ds.spec);
    CHECK(back.grid == ds.grid);
    CHECK(back.environments == ds.environments);
    CHECK(back.split == ds.split);
    CHECK(back.meta == ds.meta);
    REQUIRE(back.trajectories.size() == ds.trajectories.size());
    for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
      CHECK(back.trajectories[i].id == ds.trajectories[i].id);
      CHECK(back.trajectories[i].true_env == ds.trajectories[i].true_env);
      CHECK(back.trajectories[i].states == ds.trajectories[i].states);
    }
    save_dataset(back, temp_file("rt2.dyn"));
    CHECK(read_bytes(p) == read_bytes(temp_file("rt2.dyn")));
  }
  fs::remove(p);
  fs::remove(manifest_path(p));
  fs::remove(temp_file("rt2.dyn"));
  fs::remove(manifest_path(temp_file("rt2.dyn")));
}

TEST_CASE("corrupt files are format errors") {
  const fs::path p = temp_file("bad.dyn");
  const Dataset ds = generate_dataset(find_preset("paper-lv"), 1, Split::Train, 4);
  save_dataset(ds, p);
  fs::remove(manifest_path(p));
  const std::vector<char> bytes = read_bytes(p);

  write_bytes(p, std::vector<char>(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 2)));
  CHECK_THROWS_AS(load_dataset(p), FormatError);

  std::vector<char> magic = bytes;
  magic[0] = 'X';
  write_bytes(p, magic);
  CHECK_THROWS_AS(load_dataset(p), FormatError);

  std::vector<char> version = bytes;
  version[7] = '9';
  write_bytes(p, version);
  try {
    load_dataset(p);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
  fs::remove(p);
  CHECK_THROWS_AS(load_dataset(temp_file("missing.dyn")), FileError);
}

}
