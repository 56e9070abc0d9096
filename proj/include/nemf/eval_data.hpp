#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nemf/annotation.hpp"
#include "nemf/features.hpp"
#include "nemf/inference.hpp"
#include "nemf/random.hpp"

namespace nemf {

// ---- annotations -----------------------------------------------------------

// One JSON object per line:
//   {"src": "a.png", "tgt": "b.png", "kps": [[xs, ys, xt, yt], ...],
//    "bbox": [x0, y0, x1, y1], "category": "cat",
//    "src_size": [W, H], "tgt_size": [W, H]}
// Sizes are required for "synthetic:<id>" references and otherwise read from
// the image files, resolved relative to the annotation file.
struct DatasetLoad {
  std::vector<PairAnnotation> annotations;
  std::vector<std::string> errors;  // "line N: reason"
  std::size_t lines = 0;
};

DatasetLoad load_dataset(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& path, std::span<const PairAnnotation> annotations);

// Throws kInvalidArgument describing the first violated bound.
void validate_annotation(const PairAnnotation& annotation);

// ---- synthetic pairs -------------------------------------------------------

enum class WarpFamily { kTranslation, kAffine, kSmooth };

WarpFamily parse_warp_family(const std::string& name);
std::string warp_family_name(WarpFamily family);

// Maps a source pixel to its target position. Affine maps act about the image
// center; the smooth family is defined through its inverse, a sum of low
// frequency sinusoidal offsets, and inverted by fixed-point iteration.
struct SyntheticWarp {
  WarpFamily family = WarpFamily::kTranslation;
  std::array<double, 4> linear = {1.0, 0.0, 0.0, 1.0};  // row-major 2x2 on (row, col)
  Point2 shift;
  Point2 center;
  std::vector<std::array<double, 4>> waves;  // amplitude_row, amplitude_col, frequency_row, frequency_col

  Point2 forward(Point2 source) const;
  Point2 inverse(Point2 target) const;
};

struct SyntheticConfig {
  std::size_t rows = 32;
  std::size_t cols = 32;
  std::size_t channels = 3;
  std::size_t keypoints = 10;
  double max_shift = 4.0;     // pixels, translation and affine offset
  double max_rotation = 0.15;  // radians, affine
  double max_scale = 0.08;     // relative, affine
  double smooth_amplitude = 1.5;  // pixels, smooth
};

struct SyntheticPair {
  ImagePair images;
  PairAnnotation annotation;
  FlowField flow;  // dense, full resolution, exact
  SyntheticWarp warp;
};

SyntheticWarp random_warp(WarpFamily family, const SyntheticConfig& config, Rng& rng);

// Renders a procedural texture (multi-frequency noise plus shapes) and its
// warped copy; keypoints sit on integer source pixels whose targets fall
// inside the target image.
SyntheticPair render_synthetic(const SyntheticWarp& warp, const SyntheticConfig& config, std::uint64_t seed,
                               const std::string& id);

std::vector<SyntheticPair> generate_synthetic(std::size_t count, WarpFamily family, std::uint64_t seed,
                                              const SyntheticConfig& config = {});

// ---- PCK -------------------------------------------------------------------

enum class PckNormalization { kBoundingBox, kImage };

struct PckConfig {
  double alpha = 0.1;  // alpha_pck
  PckNormalization normalization = PckNormalization::kBoundingBox;
};

inline constexpr std::array<double, 5> kPckThresholds = {0.01, 0.03, 0.05, 0.1, 0.15};

struct PckCount {
  std::size_t correct = 0;
  std::size_t total = 0;
  double ratio() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

// A prediction is correct when its distance to the ground-truth target is at
// most alpha * max(H, W) of the bounding box or the target image.
PckCount pck_count(std::span<const Point2> predicted, const PairAnnotation& annotation, const PckConfig& config);
double pck(std::span<const Point2> predicted, const PairAnnotation& annotation, const PckConfig& config);

// ---- field slices ----------------------------------------------------------

struct FieldSlice {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Point2> positions;  // target pixel of each grid node
  std::vector<double> scores;
  double smoothing_radius = 0.0;
};

// M([source, .]) over the target lattice of `geometry`, optionally blurred by
// a Gaussian with sigma = smoothing_radius grid cells.
FieldSlice export_field_slice(const MatchingField& field, const InferenceGeometry& geometry, Point2 source,
                              std::size_t batch_size, double smoothing_radius = 0.0,
                              std::size_t guard = kExhaustiveGuard);

void write_field_slice_csv(const std::filesystem::path& path, const FieldSlice& slice);

}  // namespace nemf
