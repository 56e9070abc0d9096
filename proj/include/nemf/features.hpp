#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nemf/tensor.hpp"

namespace nemf {

// Interleaved raster with intensities in [0, 1].
struct Image {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t channels = 1;
  std::vector<float> data;

  float at(std::size_t r, std::size_t c, std::size_t ch = 0) const { return data[(r * cols + c) * channels + ch]; }
  float& at(std::size_t r, std::size_t c, std::size_t ch = 0) { return data[(r * cols + c) * channels + ch]; }
};

inline constexpr std::size_t kMinImageExtent = 16;

struct ImagePair {
  Image source;
  Image target;
  std::string source_id;
  std::string target_id;
};

// Throws unless both rasters are at least kMinImageExtent on a side with 1 or 3 channels.
void validate_pair(const ImagePair& pair);

// PNG (8/16-bit, gray or color) and binary PPM/PGM.
Image read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);
// Dimensions from the file header only: {rows, cols}.
std::pair<std::size_t, std::size_t> probe_image_size(const std::filesystem::path& path);

enum class FeatureProvenance { kHandcrafted, kImported };

// Descriptor grid, y-major then x then channel.
struct FeatureGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t channels = 0;
  std::vector<float> values;
  FeatureProvenance provenance = FeatureProvenance::kHandcrafted;

  const float* descriptor(std::size_t r, std::size_t c) const { return values.data() + (r * cols + c) * channels; }
};

enum class BoundaryMode { kClamp, kWrap };

struct ExtractorConfig {
  std::size_t grid_rows = 16;
  std::size_t grid_cols = 16;
  std::size_t descriptor_dim = 32;  // mean color + 8 orientation bins + random projection
  std::size_t patch_size = 8;
  std::uint64_t projection_seed = 0x5eed;
  BoundaryMode boundary = BoundaryMode::kClamp;
};

inline constexpr std::size_t kOrientationBins = 8;

FeatureGrid extract_handcrafted(const Image& image, const ExtractorConfig& config);

void export_features(const std::filesystem::path& path, const FeatureGrid& grid);
FeatureGrid import_features(const std::filesystem::path& path);

// 4D cosine-similarity volume, shape [src_rows, src_cols, tgt_rows, tgt_cols].
struct CostVolume {
  std::size_t src_rows = 0;
  std::size_t src_cols = 0;
  std::size_t tgt_rows = 0;
  std::size_t tgt_cols = 0;
  std::vector<double> values;

  double at(std::size_t sr, std::size_t sc, std::size_t tr, std::size_t tc) const {
    return values[((sr * src_cols + sc) * tgt_rows + tr) * tgt_cols + tc];
  }
  Tensor as_tensor() const;
};

CostVolume correlate(const FeatureGrid& source, const FeatureGrid& target);

}  // namespace nemf
