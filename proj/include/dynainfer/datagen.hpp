#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dynainfer/dynamics.hpp"
#include "dynainfer/tensor.hpp"

namespace dynainfer {

inline constexpr std::int32_t kHiddenEnv = -1;
inline constexpr std::uint32_t kDatasetFormatVersion = 1;

enum class Split : std::uint8_t { Train, Test, Adapt, AdaptTest };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct Trajectory {
  std::uint32_t id = 0;
  Tensor states;  // [grid.count, state_dim]
  std::int32_t true_env = kHiddenEnv;
  /// Exact dx/dt at each stored state, when the generator attached it.
  /// Not part of the file format.
  std::optional<Tensor> derivatives;
};

struct DatasetMetadata {
  std::string preset;
  std::uint64_t seed = 0;
  std::size_t per_env = 0;
  double rtol = 1e-8;
  double atol = 1e-8;
  std::uint32_t format_version = kDatasetFormatVersion;

  friend bool operator==(const DatasetMetadata&,
                         const DatasetMetadata&) = default;
};

struct Dataset {
  SystemSpec spec;
  TimeGrid grid;
  std::vector<EnvironmentParams> environments;
  std::vector<Trajectory> trajectories;
  Split split = Split::Train;
  DatasetMetadata meta;
};

/// Named environment tables with their simulation grid.
struct EnvPreset {
  std::string name;
  SystemSpec spec;
  TimeGrid grid;
  std::vector<EnvironmentParams> train;
  std::vector<EnvironmentParams> adapt;

  const std::vector<EnvironmentParams>& environments(Split split) const;
};

/// "paper-lv": 9 training and 2 adaptation Lotka-Volterra environments,
/// dt = 0.5, T = 10. "paper-gs": 3 training and 2 adaptation Gray-Scott
/// environments on a 32 x 32 grid with ds = 2, dt = 40, T = 400.
const EnvPreset& find_preset(std::string_view name);
std::vector<std::string> preset_names();

/// LV: uniform in [1, 3]^2. GS: (m, n) = (0, 1) except three 2 x 2 squares
/// (placed uniformly, may overlap or wrap) set to (0.95, 0.05).
/// Linear: uniform in [1, 3] per component.
Tensor sample_ic(const SystemSpec& spec, std::uint64_t seed);

/// Integrates `per_env` trajectories per environment of the split with the
/// adaptive solver at rtol = atol = 1e-8. Labels are stored (visible in the
/// file); training code sees them only through an unsealed view.
Dataset generate_dataset(const EnvPreset& preset, std::size_t per_env,
                         Split split, std::uint64_t seed);
Dataset generate_dataset(const SystemSpec& spec, const TimeGrid& grid,
                         const std::vector<EnvironmentParams>& environments,
                         std::size_t per_env, Split split, std::uint64_t seed,
                         std::string preset_name = "inline");

/// Fills Trajectory::derivatives with the true field of each trajectory's
/// labeled environment. Requires visible labels.
void attach_exact_derivatives(Dataset& dataset);

/// Writes the DYNTRAJ1 binary file and "<path>.manifest" next to it.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
/// Throws FormatError naming the failing field on bad magic, unsupported
/// version or truncation; reads the manifest when present.
Dataset load_dataset(const std::filesystem::path& path);

std::filesystem::path manifest_path(const std::filesystem::path& path);

/// Read-only access to a dataset that withholds true labels unless it was
/// explicitly created unsealed (oracle baseline and evaluators only).
class DatasetView {
 public:
  explicit DatasetView(const Dataset& dataset) : ds_(&dataset) {}
  static DatasetView unsealed(const Dataset& dataset);

  std::size_t size() const { return ds_->trajectories.size(); }
  const SystemSpec& spec() const { return ds_->spec; }
  const TimeGrid& grid() const { return ds_->grid; }
  const Tensor& states(std::size_t i) const;
  const Tensor* derivatives(std::size_t i) const;
  std::uint32_t id(std::size_t i) const;

  bool sealed() const { return sealed_; }
  /// Throws PermissionError if the view is sealed or the label is hidden.
  std::int32_t true_env(std::size_t i) const;
  /// All labels; same errors as true_env.
  std::vector<std::int32_t> true_labels() const;
  /// Label or kHiddenEnv, for reports. Always kHiddenEnv when sealed.
  std::int32_t label_or_hidden(std::size_t i) const;

 private:
  const Dataset* ds_;
  bool sealed_ = true;
};

}  // namespace dynainfer
