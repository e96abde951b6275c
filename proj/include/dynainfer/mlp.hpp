#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "dynainfer/autodiff.hpp"
#include "dynainfer/tensor.hpp"

namespace dynainfer {

enum class Activation : std::uint8_t { Swish = 0, Identity = 1 };

/// Layer-size list of a fully connected network and the offsets of each
/// layer's weights and bias inside one flat parameter vector.
///
/// Layer l stores its weight matrix [in_l, out_l] row-major followed by its
/// bias [out_l]; layers are laid out in order.
class MlpLayout {
 public:
  MlpLayout() = default;
  explicit MlpLayout(std::vector<std::size_t> sizes);

  const std::vector<std::size_t>& sizes() const { return sizes_; }
  std::size_t layer_count() const { return sizes_.empty() ? 0 : sizes_.size() - 1; }
  std::size_t in_dim() const { return sizes_.front(); }
  std::size_t out_dim() const { return sizes_.back(); }
  std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }
  std::size_t bias_offset(std::size_t layer) const {
    return offsets_[layer] + sizes_[layer] * sizes_[layer + 1];
  }
  std::size_t param_count() const { return total_; }

  friend bool operator==(const MlpLayout&, const MlpLayout&) = default;

 private:
  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_;
  std::size_t total_ = 0;
};

std::size_t mlp_param_count(std::span<const std::size_t> sizes);

struct MlpParams {
  MlpLayout layout;
  Tensor flat;
  /// One entry per hidden layer; the output layer is always linear.
  std::vector<Activation> hidden;

  static MlpParams with_swish(MlpLayout layout, Tensor flat);
};

/// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
Tensor mlp_init(const MlpLayout& layout, std::mt19937_64& rng);

/// Plain forward pass. `input` is [in] or [rows, in].
Tensor mlp_forward(const MlpLayout& layout, std::span<const double> params,
                   const Tensor& input, Activation hidden = Activation::Swish);
Tensor mlp_forward(const MlpParams& params, const Tensor& input);

/// Differentiable forward pass; `params` is the flat parameter vector.
ad::Var mlp_forward(const MlpLayout& layout, ad::Var params, ad::Var input,
                    Activation hidden = Activation::Swish);

/// Writes the "DYNF" checkpoint: magic, u32 format version, u32 layer-size
/// count and sizes, then little-endian f64 parameters in layer order.
void save_mlp_checkpoint(const std::filesystem::path& path,
                         const MlpParams& params);
MlpParams load_mlp_checkpoint(const std::filesystem::path& path);

inline constexpr std::uint32_t kMlpCheckpointVersion = 1;

}  // namespace dynainfer
