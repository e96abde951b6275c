#include "dynainfer/mlp.hpp"

#include <array>
#include <cmath>
#include <fstream>

#include "binary_io.hpp"
#include "dynainfer/errors.hpp"
#include "dynainfer/kernels.hpp"

namespace dynainfer {
namespace {

constexpr std::array<char, 4> kMagic = {'D', 'Y', 'N', 'F'};

}  // namespace

MlpLayout::MlpLayout(std::vector<std::size_t> sizes) : sizes_(std::move(sizes)) {
  if (sizes_.size() < 2) {
    throw ShapeError("an MLP needs at least an input and an output size");
  }
  for (std::size_t s : sizes_) {
    if (s == 0) throw ShapeError("MLP layer sizes must be positive");
  }
  offsets_.reserve(sizes_.size() - 1);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    offsets_.push_back(total_);
    total_ += sizes_[l] * sizes_[l + 1] + sizes_[l + 1];
  }
}

std::size_t mlp_param_count(std::span<const std::size_t> sizes) {
  return MlpLayout(std::vector<std::size_t>(sizes.begin(), sizes.end()))
      .param_count();
}

MlpParams MlpParams::with_swish(MlpLayout layout, Tensor flat) {
  if (flat.size() != layout.param_count()) {
    throw ShapeError("MLP parameter vector has " + std::to_string(flat.size()) +
                     " values, layout needs " +
                     std::to_string(layout.param_count()));
  }
  std::vector<Activation> hidden(layout.layer_count() - 1, Activation::Swish);
  return MlpParams{std::move(layout), std::move(flat), std::move(hidden)};
}

Tensor mlp_init(const MlpLayout& layout, std::mt19937_64& rng) {
  Tensor flat({layout.param_count()});
  for (std::size_t l = 0; l < layout.layer_count(); ++l) {
    const std::size_t in = layout.sizes()[l], out = layout.sizes()[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    double* w = flat.ptr() + layout.weight_offset(l);
    for (std::size_t i = 0; i < in * out; ++i) w[i] = dist(rng);
  }
  return flat;
}

Tensor mlp_forward(const MlpLayout& layout, std::span<const double> params,
                   const Tensor& input, Activation hidden) {
  if (params.size() != layout.param_count()) {
    throw ShapeError("mlp_forward: parameter count mismatch");
  }
  if (input.cols() != layout.in_dim()) {
    throw ShapeError("mlp_forward: input " + shape_string(input.shape()) +
                     " does not match in-dimension " +
                     std::to_string(layout.in_dim()));
  }
  const std::size_t rows = input.rows();
  Tensor act = input;
  for (std::size_t l = 0; l < layout.layer_count(); ++l) {
    const std::size_t in = layout.sizes()[l], out = layout.sizes()[l + 1];
    Tensor next({rows, out});
    kernels::linear_forward(act.ptr(), rows, in,
                            params.data() + layout.weight_offset(l),
                            params.data() + layout.bias_offset(l), out,
                            next.ptr());
    if (l + 1 < layout.layer_count() && hidden == Activation::Swish) {
      kernels::swish_forward(next.ptr(), next.size(), next.ptr());
    }
    act = std::move(next);
  }
  if (input.rank() <= 1) return act.reshaped({layout.out_dim()});
  return act;
}

Tensor mlp_forward(const MlpParams& params, const Tensor& input) {
  const Activation a =
      params.hidden.empty() ? Activation::Swish : params.hidden.front();
  return mlp_forward(params.layout, params.flat.data(), input, a);
}

ad::Var mlp_forward(const MlpLayout& layout, ad::Var params, ad::Var input,
                    Activation hidden) {
  if (params.value().size() != layout.param_count()) {
    throw ShapeError("mlp_forward: parameter count mismatch");
  }
  ad::Var act = input;
  for (std::size_t l = 0; l < layout.layer_count(); ++l) {
    act = ad::linear(act, params, layout.weight_offset(l),
                     layout.bias_offset(l), layout.sizes()[l],
                     layout.sizes()[l + 1]);
    if (l + 1 < layout.layer_count() && hidden == Activation::Swish) {
      act = ad::swish(act);
    }
  }
  return act;
}

void save_mlp_checkpoint(const std::filesystem::path& path,
                         const MlpParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileError("cannot open " + path.string() + " for writing");
  os.write(kMagic.data(), kMagic.size());
  io::write_pod<std::uint32_t>(os, kMlpCheckpointVersion);
  io::write_pod<std::uint32_t>(
      os, static_cast<std::uint32_t>(params.layout.sizes().size()));
  for (std::size_t s : params.layout.sizes()) {
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s));
  }
  io::write_doubles(os, params.flat.ptr(), params.flat.size());
  if (!os) throw FileError("write failed for " + path.string());
}

MlpParams load_mlp_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileError("cannot open " + path.string());
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is) throw FormatError("truncated file while reading magic");
  if (magic != kMagic) throw FormatError("bad magic: not a DYNF checkpoint");
  const auto version = io::read_pod<std::uint32_t>(is, "format version");
  if (version != kMlpCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(version));
  }
  const auto count = io::read_pod<std::uint32_t>(is, "layer count");
  if (count < 2 || count > 64) {
    throw FormatError("implausible layer count " + std::to_string(count));
  }
  std::vector<std::size_t> sizes;
  for (std::uint32_t i = 0; i < count; ++i) {
    sizes.push_back(io::read_pod<std::uint32_t>(is, "layer size"));
  }
  MlpLayout layout(std::move(sizes));
  Tensor flat({layout.param_count()});
  io::read_doubles(is, flat.ptr(), flat.size(), "parameters");
  return MlpParams::with_swish(std::move(layout), std::move(flat));
}

}  // namespace dynainfer
