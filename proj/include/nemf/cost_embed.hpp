#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nemf/features.hpp"
#include "nemf/geometry.hpp"
#include "nemf/tensor.hpp"

namespace nemf {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct EmbedderConfig {
  std::size_t src_rows = 16;
  std::size_t src_cols = 16;
  std::size_t tgt_rows = 16;
  std::size_t tgt_cols = 16;
  std::size_t channels = 16;  // K_channels of the cost feature volume
  std::size_t conv_channels = 4;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 32;

  friend bool operator==(const EmbedderConfig&, const EmbedderConfig&) = default;
};

// Conv -> tokenize -> project -> one pre-norm attention block. Convolution
// weights are laid out [3, 3, c_in, c_out].
struct EmbedderParams {
  EmbedderConfig config;

  Tensor conv1_src_w, conv1_src_b, conv1_tgt_w, conv1_tgt_b;
  Tensor conv2_src_w, conv2_src_b, conv2_tgt_w, conv2_tgt_b;
  Tensor token_w, token_b;
  Tensor ln1_gain, ln1_bias;
  Tensor query_w, key_w, value_w, out_w, out_b;
  Tensor ln2_gain, ln2_bias;
  Tensor ffn1_w, ffn1_b, ffn2_w, ffn2_b;

  static EmbedderParams initialize(const EmbedderConfig& config, std::uint64_t seed);

  // Stable order; handles share storage with the members.
  std::vector<NamedTensor> parameters() const;
  std::size_t parameter_count() const;
  // Expected shapes for `config`, same order as parameters().
  static std::vector<std::pair<std::string, Shape>> layout(const EmbedderConfig& config);

  // Copy whose parameters do not require gradients.
  EmbedderParams frozen() const;
};

// 5D volume [src_rows, src_cols, tgt_rows, tgt_cols, K] plus the pixel extents
// of the images it was computed from.
struct CostFeatureVolume {
  Tensor values;
  Extent source_extent;
  Extent target_extent;

  std::size_t src_rows() const { return values.extent(0); }
  std::size_t src_cols() const { return values.extent(1); }
  std::size_t tgt_rows() const { return values.extent(2); }
  std::size_t tgt_cols() const { return values.extent(3); }
  std::size_t channels() const { return values.extent(4); }

  CostFeatureVolume detached() const { return {values.detach(), source_extent, target_extent}; }
};

enum class ConvPlane { kSource, kTarget };

// 3x3 zero-padded convolution over one 2D factor of a [S1, S2, T1, T2, C] volume.
Tensor conv_plane(const Tensor& input, const Tensor& weight, const Tensor& bias, ConvPlane plane);

// Self-attention + feed-forward block over [tokens, K] with residual connections.
Tensor attention_block(const Tensor& tokens, const EmbedderParams& params);

CostFeatureVolume embed(const CostVolume& cost, const EmbedderParams& params, Extent source_extent,
                        Extent target_extent);

// Quadlinear lookup of a [B, 4] tensor of pixel-space query points; returns
// [B, K]. Coordinates are clamped per axis to the lattice, and the gradient
// through a clamped axis is zero.
Tensor interpolate(const CostFeatureVolume& volume, const Tensor& points);

// Channel mean of the volume: [src_rows, src_cols, tgt_rows, tgt_cols].
Tensor pool(const CostFeatureVolume& volume);

}  // namespace nemf
