#include "dynainfer/datagen.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "dynainfer/errors.hpp"

namespace dynainfer {
namespace {

constexpr std::array<char, 8> kMagic = {'D', 'Y', 'N', 'T', 'R', 'A', 'J', '1'};
constexpr std::array<char, 7> kMagicStem = {'D', 'Y', 'N', 'T', 'R', 'A', 'J'};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t trajectory_seed(std::uint64_t seed, Split split, std::size_t env,
                              std::size_t k) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(split));
  h = splitmix64(h ^ static_cast<std::uint64_t>(env));
  return splitmix64(h ^ static_cast<std::uint64_t>(k));
}

EnvPreset make_paper_lv() {
  // alpha, beta, gamma, delta per environment.
  const double beta[] = {0.5, 0.75, 1.0, 0.5, 0.5, 0.75, 0.75, 1.0, 1.0};
  const double delta[] = {0.5, 0.5, 0.5, 0.75, 1.0, 0.75, 1.0, 0.75, 1.0};
  EnvPreset p{"paper-lv", SystemSpec::lotka_volterra(),
              TimeGrid::from_horizon(0.5, 10.0), {}, {}};
  for (int e = 0; e < 9; ++e) {
    p.train.push_back(
        EnvironmentParams::lotka_volterra(0.5, beta[e], 0.5, delta[e]));
  }
  p.adapt.push_back(EnvironmentParams::lotka_volterra(0.7, 0.8, 0.5, 0.5));
  p.adapt.push_back(EnvironmentParams::lotka_volterra(0.6, 0.7, 0.5, 0.5));
  return p;
}

EnvPreset make_paper_gs() {
  EnvPreset p{"paper-gs", SystemSpec::gray_scott(32, 2.0),
              TimeGrid::from_horizon(40.0, 400.0), {}, {}};
  p.train = {EnvironmentParams::gray_scott(0.037, 0.06),
             EnvironmentParams::gray_scott(0.03, 0.062),
             EnvironmentParams::gray_scott(0.039, 0.058)};
  p.adapt = {EnvironmentParams::gray_scott(0.033, 0.059),
             EnvironmentParams::gray_scott(0.036, 0.061)};
  return p;
}

const std::vector<EnvPreset>& presets() {
  static const std::vector<EnvPreset> all = {make_paper_lv(), make_paper_gs()};
  return all;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string_view split_name(Split split) {
  switch (split) {
    case Split::Train:
      return "train";
    case Split::Test:
      return "test";
    case Split::Adapt:
      return "adapt";
    case Split::AdaptTest:
      return "adapt_test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  for (Split s : {Split::Train, Split::Test, Split::Adapt, Split::AdaptTest}) {
    if (split_name(s) == name) return s;
  }
  throw ConfigError("unknown split '" + std::string(name) +
                    "' (valid: train, test, adapt, adapt_test)");
}

const std::vector<EnvironmentParams>& EnvPreset::environments(
    Split split) const {
  return split == Split::Adapt || split == Split::AdaptTest ? adapt : train;
}

const EnvPreset& find_preset(std::string_view name) {
  for (const EnvPreset& p : presets()) {
    if (p.name == name) return p;
  }
  std::string valid;
  for (const std::string& n : preset_names()) {
    valid += (valid.empty() ? "" : ", ") + n;
  }
  throw ConfigError("unknown preset '" + std::string(name) +
                    "' (valid presets: " + valid + ")");
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const EnvPreset& p : presets()) names.push_back(p.name);
  return names;
}

Tensor sample_ic(const SystemSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  switch (spec.kind) {
    case SystemKind::LotkaVolterra: {
      std::uniform_real_distribution<double> u(1.0, 3.0);
      const double m = u(rng);
      const double n = u(rng);
      return Tensor::vector({m, n});
    }
    case SystemKind::GrayScott: {
      constexpr double eps = 0.05;
      const std::size_t side = spec.grid_side;
      const std::size_t cells = side * side;
      Tensor x({2 * cells});
      for (std::size_t j = 0; j < cells; ++j) {
        x[j] = 0.0;
        x[cells + j] = 1.0;
      }
      std::uniform_int_distribution<std::size_t> pos(0, side - 1);
      for (int sq = 0; sq < 3; ++sq) {
        const std::size_t r0 = pos(rng);
        const std::size_t c0 = pos(rng);
        for (std::size_t dr = 0; dr < 2; ++dr) {
          for (std::size_t dc = 0; dc < 2; ++dc) {
            const std::size_t j =
                ((r0 + dr) % side) * side + (c0 + dc) % side;
            x[j] = 1.0 - eps;
            x[cells + j] = eps;
          }
        }
      }
      return x;
    }
    case SystemKind::Linear: {
      std::uniform_real_distribution<double> u(1.0, 3.0);
      Tensor x({spec.linear_dim});
      for (double& v : x.data()) v = u(rng);
      return x;
    }
  }
  return {};
}

Dataset generate_dataset(const EnvPreset& preset, std::size_t per_env,
                         Split split, std::uint64_t seed) {
  return generate_dataset(preset.spec, preset.grid, preset.environments(split),
                          per_env, split, seed, preset.name);
}

Dataset generate_dataset(const SystemSpec& spec, const TimeGrid& grid,
                         const std::vector<EnvironmentParams>& environments,
                         std::size_t per_env, Split split, std::uint64_t seed,
                         std::string preset_name) {
  if (per_env < 1) throw ArgumentError("generate_dataset: per_env must be >= 1");
  if (environments.empty()) {
    throw ArgumentError("generate_dataset: no environments");
  }
  for (const EnvironmentParams& env : environments) {
    validate_environment(spec, env);
  }
  Dataset ds;
  ds.spec = spec;
  ds.grid = grid;
  ds.environments = environments;
  ds.split = split;
  ds.meta = DatasetMetadata{std::move(preset_name), seed, per_env, 1e-8, 1e-8,
                            kDatasetFormatVersion};
  const std::size_t total = environments.size() * per_env;
  ds.trajectories.resize(total);

  std::vector<std::string> errors(total);
  const auto n = static_cast<std::ptrdiff_t>(total);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t idx = 0; idx < n; ++idx) {
    const std::size_t i = static_cast<std::size_t>(idx);
    const std::size_t e = i / per_env, k = i % per_env;
    const EnvironmentParams& env = environments[e];
    const Tensor x0 = sample_ic(spec, trajectory_seed(seed, split, e, k));
    IntegrateOptions opts;
    opts.mode = IntegratorMode::Adaptive;
    opts.rtol = ds.meta.rtol;
    opts.atol = ds.meta.atol;
    try {
      Rollout r = integrate(
          [&](const Tensor& x) { return true_vf(spec, env, x); }, x0, grid,
          opts);
      ds.trajectories[i] = Trajectory{static_cast<std::uint32_t>(i),
                                      std::move(r.states),
                                      static_cast<std::int32_t>(e), {}};
    } catch (const StiffnessError& err) {
      errors[i] = std::string(err.what()) + " (environment " +
                  std::to_string(e) + ", trajectory " + std::to_string(k) +
                  ")";
    }
  }
  for (std::size_t i = 0; i < total; ++i) {
    if (!errors[i].empty()) {
      throw StiffnessError(errors[i], std::nan(""));
    }
  }
  return ds;
}

void attach_exact_derivatives(Dataset& dataset) {
  for (Trajectory& t : dataset.trajectories) {
    if (t.true_env < 0 ||
        static_cast<std::size_t>(t.true_env) >= dataset.environments.size()) {
      throw PermissionError(
          "exact derivatives need a visible environment label");
    }
    t.derivatives = true_vf(dataset.spec, dataset.environments[t.true_env],
                            t.states);
  }
}

std::filesystem::path manifest_path(const std::filesystem::path& path) {
  return path.string() + ".manifest";
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileError("cannot open " + path.string() + " for writing");
  const std::size_t dim = ds.spec.state_dim();
  os.write(kMagic.data(), kMagic.size());
  io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(ds.spec.kind));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(dim));
  io::write_pod<double>(os, ds.grid.t0);
  io::write_pod<double>(os, ds.grid.dt);
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.grid.count));
  io::write_pod<std::uint32_t>(
      os, static_cast<std::uint32_t>(ds.environments.size()));
  for (const EnvironmentParams& env : ds.environments) {
    for (double v : env.values) io::write_pod<double>(os, v);
  }
  io::write_pod<std::uint32_t>(
      os, static_cast<std::uint32_t>(ds.trajectories.size()));
  for (const Trajectory& t : ds.trajectories) {
    if (t.states.size() != ds.grid.count * dim) {
      throw ShapeError("save_dataset: trajectory " + std::to_string(t.id) +
                       " does not match the grid");
    }
    io::write_pod<std::uint32_t>(os, t.id);
    io::write_pod<std::int32_t>(os, t.true_env);
    io::write_doubles(os, t.states.ptr(), t.states.size());
  }
  if (!os) throw FileError("write failed for " + path.string());

  std::ofstream ms(manifest_path(path));
  if (!ms) throw FileError("cannot write manifest for " + path.string());
  ms << "format_version = " << ds.meta.format_version << '\n'
     << "system = " << ds.spec.name() << '\n'
     << "preset = " << ds.meta.preset << '\n'
     << "split = " << split_name(ds.split) << '\n'
     << "seed = " << ds.meta.seed << '\n'
     << "per_env = " << ds.meta.per_env << '\n'
     << "rtol = " << format_double(ds.meta.rtol) << '\n'
     << "atol = " << format_double(ds.meta.atol) << '\n';
  if (ds.spec.kind == SystemKind::GrayScott) {
    ms << "ds = " << format_double(ds.spec.ds) << '\n';
  }
}

namespace {

void read_manifest(const std::filesystem::path& path, Dataset& ds) {
  std::ifstream ms(path);
  if (!ms) return;
  std::string line;
  while (std::getline(ms, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "preset") {
        ds.meta.preset = value;
      } else if (key == "split") {
        ds.split = parse_split(value);
      } else if (key == "seed") {
        ds.meta.seed = std::stoull(value);
      } else if (key == "per_env") {
        ds.meta.per_env = std::stoull(value);
      } else if (key == "rtol") {
        ds.meta.rtol = std::stod(value);
      } else if (key == "atol") {
        ds.meta.atol = std::stod(value);
      } else if (key == "format_version") {
        ds.meta.format_version = static_cast<std::uint32_t>(std::stoul(value));
      } else if (key == "ds" && ds.spec.kind == SystemKind::GrayScott) {
        ds.spec.ds = std::stod(value);
      }
    } catch (const std::logic_error&) {
      throw FormatError("manifest: bad value for '" + key + "'");
    }
  }
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileError("cannot open " + path.string());
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is) throw FormatError("truncated file while reading magic");
  if (std::memcmp(magic.data(), kMagicStem.data(), kMagicStem.size()) != 0) {
    throw FormatError("bad magic: not a DYNTRAJ file");
  }
  if (magic != kMagic) {
    throw FormatError(std::string("unsupported format version '") + magic[7] +
                      "' (this build reads version 1)");
  }
  Dataset ds;
  const auto kind = io::read_pod<std::uint8_t>(is, "system id");
  const auto dim = io::read_pod<std::uint32_t>(is, "state dim");
  switch (kind) {
    case 0:
      ds.spec = SystemSpec::lotka_volterra();
      break;
    case 1: {
      const auto side =
          static_cast<std::size_t>(std::llround(std::sqrt(dim / 2.0)));
      if (2 * side * side != dim) {
        throw FormatError("state dim " + std::to_string(dim) +
                          " is not a Gray-Scott field pair");
      }
      ds.spec = SystemSpec::gray_scott(side, 2.0);
      break;
    }
    case 2:
      ds.spec = SystemSpec::linear(dim);
      break;
    default:
      throw FormatError("unknown system id " + std::to_string(kind));
  }
  if (ds.spec.state_dim() != dim) {
    throw FormatError("state dim " + std::to_string(dim) +
                      " does not match system " + ds.spec.name());
  }
  ds.grid.t0 = io::read_pod<double>(is, "grid t0");
  ds.grid.dt = io::read_pod<double>(is, "grid dt");
  ds.grid.count = io::read_pod<std::uint32_t>(is, "grid count");
  if (!(ds.grid.dt > 0.0) || ds.grid.count < 2) {
    throw FormatError("invalid time grid");
  }
  const auto env_count = io::read_pod<std::uint32_t>(is, "environment count");
  for (std::uint32_t e = 0; e < env_count; ++e) {
    EnvironmentParams env;
    for (double& v : env.values) v = io::read_pod<double>(is, "environment parameters");
    ds.environments.push_back(env);
  }
  const auto traj_count = io::read_pod<std::uint32_t>(is, "trajectory count");
  ds.trajectories.reserve(traj_count);
  for (std::uint32_t i = 0; i < traj_count; ++i) {
    Trajectory t;
    t.id = io::read_pod<std::uint32_t>(is, "trajectory id");
    t.true_env = io::read_pod<std::int32_t>(is, "trajectory label");
    if (t.true_env < kHiddenEnv ||
        (t.true_env >= 0 && static_cast<std::uint32_t>(t.true_env) >= env_count)) {
      throw FormatError("trajectory label " + std::to_string(t.true_env) +
                        " out of range");
    }
    t.states = Tensor({ds.grid.count, dim});
    io::read_doubles(is, t.states.ptr(), t.states.size(), "trajectory states");
    ds.trajectories.push_back(std::move(t));
  }
  read_manifest(manifest_path(path), ds);
  return ds;
}

DatasetView DatasetView::unsealed(const Dataset& dataset) {
  DatasetView v(dataset);
  v.sealed_ = false;
  return v;
}

const Tensor& DatasetView::states(std::size_t i) const {
  if (i >= size()) throw IndexError("trajectory index out of range");
  return ds_->trajectories[i].states;
}

const Tensor* DatasetView::derivatives(std::size_t i) const {
  if (i >= size()) throw IndexError("trajectory index out of range");
  const auto& d = ds_->trajectories[i].derivatives;
  return d ? &*d : nullptr;
}

std::uint32_t DatasetView::id(std::size_t i) const {
  if (i >= size()) throw IndexError("trajectory index out of range");
  return ds_->trajectories[i].id;
}

std::int32_t DatasetView::true_env(std::size_t i) const {
  if (sealed_) {
    throw PermissionError("environment labels are sealed in this view");
  }
  if (i >= size()) throw IndexError("trajectory index out of range");
  const std::int32_t e = ds_->trajectories[i].true_env;
  if (e < 0) {
    throw PermissionError("trajectory " + std::to_string(i) +
                          " has a hidden environment label");
  }
  return e;
}

std::vector<std::int32_t> DatasetView::true_labels() const {
  std::vector<std::int32_t> out(size());
  for (std::size_t i = 0; i < size(); ++i) out[i] = true_env(i);
  return out;
}

std::int32_t DatasetView::label_or_hidden(std::size_t i) const {
  if (sealed_ || i >= size()) return kHiddenEnv;
  return ds_->trajectories[i].true_env;
}

}  // namespace dynainfer
