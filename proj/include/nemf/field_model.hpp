#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "nemf/cost_embed.hpp"
#include "nemf/features.hpp"
#include "nemf/geometry.hpp"
#include "nemf/tensor.hpp"

namespace nemf {

struct EncoderConfig {
  std::size_t octaves = 10;  // L

  std::size_t dims_per_scalar() const { return 2 * (octaves + 1); }
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct FieldConfig {
  EncoderConfig encoder;
  std::size_t channels = 16;  // K_channels of the conditioning vector
  std::size_t hidden = 256;
  std::size_t blocks = 3;

  std::size_t input_dims() const { return 4 * encoder.dims_per_scalar(); }
  friend bool operator==(const FieldConfig&, const FieldConfig&) = default;
};

struct ResidualBlock {
  Tensor cond_w, cond_b;  // projection of the cost feature vector, added to the block input
  Tensor fc1_w, fc1_b;
  Tensor fc2_w, fc2_b;
};

// Residual-conditioned MLP with a sigmoid head.
struct FieldModel {
  FieldConfig config;
  Tensor in_w, in_b;
  std::vector<ResidualBlock> blocks;
  Tensor head_w, head_b;

  // He-uniform for ReLU layers, LeCun-uniform head weights, zero biases;
  // values are rounded to float32 so checkpoints reproduce them exactly.
  static FieldModel initialize(const FieldConfig& config, std::uint64_t seed);

  std::vector<NamedTensor> parameters() const;
  std::size_t parameter_count() const;
  static std::vector<std::pair<std::string, Shape>> layout(const FieldConfig& config);

  // Copy whose parameters do not require gradients; safe for concurrent evaluation.
  FieldModel frozen() const;
};

// Per scalar t: sin(2^0 pi t), cos(2^0 pi t), ..., sin(2^L pi t), cos(2^L pi t).
// Input [B, n] -> [B, n * 2(L+1)].
Tensor positional_encoding(const Tensor& normalized, const EncoderConfig& config);

// Pixel-space [B, 4] points -> [-1, 1] per axis.
Tensor normalize_points(const Tensor& points, Extent source_extent, Extent target_extent);

struct FieldOutput {
  Tensor logits;  // [B, 1], pre-sigmoid
  Tensor scores;  // [B, 1], in (0, 1)
};

FieldOutput evaluate(const FieldModel& model, const CostFeatureVolume& volume, const Tensor& points);

// Batched scoring without gradients. Rows are independent, so the result does
// not depend on `batch_size`.
std::vector<double> score_points(const FieldModel& frozen_model, const CostFeatureVolume& frozen_volume,
                                 std::span<const QueryPoint> points, std::size_t batch_size);

// Everything needed to rebuild features, embedder and field for inference.
struct ModelBundle {
  FieldModel field;
  EmbedderParams embedder;
  ExtractorConfig extractor;
};

struct ModelConfig {
  FieldConfig field;
  EmbedderConfig embedder;
  ExtractorConfig extractor;
};

inline constexpr std::uint16_t kWeightFormatVersion = 1;

void save_model(const std::filesystem::path& path, const FieldModel& field, const EmbedderParams& embedder,
                const ExtractorConfig& extractor = {});
// With `expected`, every stored tensor must match the shapes that configuration implies.
ModelBundle load_model(const std::filesystem::path& path, const std::optional<ModelConfig>& expected = std::nullopt);
std::string describe_model(const ModelBundle& bundle);

}  // namespace nemf
