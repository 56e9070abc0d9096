#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nemf/cost_embed.hpp"
#include "nemf/field_model.hpp"
#include "nemf/geometry.hpp"
#include "nemf/tensor.hpp"

namespace nemf {

// Anything that scores 4D matches. score_tensor maps pixel-space [B, 4]
// points to [B, 1] scores in (0, 1) and must be differentiable in the points,
// row-independent and safe to call concurrently.
class MatchingField {
 public:
  virtual ~MatchingField() = default;
  virtual Tensor score_tensor(const Tensor& points) const = 0;

  // Gradient-free scoring in chunks of `batch_size`.
  std::vector<double> score(std::span<const QueryPoint> points, std::size_t batch_size) const;
};

class NeuralField final : public MatchingField {
 public:
  NeuralField(const FieldModel& model, const CostFeatureVolume& volume);
  Tensor score_tensor(const Tensor& points) const override;
  const CostFeatureVolume& volume() const { return volume_; }

 private:
  FieldModel model_;
  CostFeatureVolume volume_;
};

// Query lattice over the source image and candidate lattice over the target
// image, both align-corners. Full resolution puts one node on every pixel.
struct InferenceGeometry {
  Extent source_extent;
  Extent target_extent;
  std::size_t source_rows = 0, source_cols = 0;
  std::size_t target_rows = 0, target_cols = 0;

  static InferenceGeometry full_resolution(Extent source, Extent target);
  static InferenceGeometry lattice(Extent source, Extent target, std::size_t rows, std::size_t cols);

  std::size_t source_count() const { return source_rows * source_cols; }
  std::size_t target_count() const { return target_rows * target_cols; }
  Point2 source_point(std::size_t index) const;
  Point2 target_point(std::size_t index) const;
  // Lattice node of the source lattice closest to a pixel position.
  std::size_t nearest_source(Point2 pixel) const;
};

// Continuous target position (and its score) for every source lattice node.
struct FlowField {
  InferenceGeometry geometry;
  std::vector<Point2> targets;  // row-major over the source lattice
  std::vector<double> scores;   // empty until scored
  std::string provenance;

  Point2 displacement(std::size_t index) const;
};

enum class Neighborhood { kFour, kEight };

struct InferenceConfig {
  std::size_t rounds = 10;           // N
  double step_size = 3e-4;           // alpha_step, applied in normalized [-1, 1] target coordinates
  std::size_t coordinate_steps = 10;  // inner descent steps per round
  std::size_t random_candidates = 4;  // R
  Neighborhood neighborhood = Neighborhood::kEight;
  std::size_t batch_size = 4096;  // B
  bool coordinate_optimization = true;
  bool keypoints_only = false;
  std::uint64_t seed = 1;
};

void validate(const InferenceConfig& config);

inline constexpr std::size_t kExhaustiveGuard = 10'000'000;

// Hard argmax of each nearest coarse source cell's slice of the pooled volume,
// mapped to target pixel coordinates. Ties go to the lowest row-major index.
FlowField initialize_flow(const Tensor& pooled, const InferenceGeometry& geometry);

// Candidates per node: its own match, each neighbor's displacement applied to
// the node, then R uniform target lattice nodes. All nodes read `flow` and
// write the result, so the update order does not matter. The incumbent is
// only replaced by a strictly better candidate.
FlowField patchmatch_round(const MatchingField& field, const FlowField& flow, const InferenceConfig& config,
                           std::size_t round);

// Descent on -log M over the target coordinate, clamped to the image. The
// result is kept only where its score is at least the incoming score.
// `mask` selects nodes to optimize; empty means all.
FlowField coordinate_optimize(const MatchingField& field, const FlowField& flow, const InferenceConfig& config,
                              std::span<const std::size_t> mask = {});

struct InferenceTrace {
  std::vector<std::string> stages;          // "init", "patchmatch 1", "coordinate 1", ...
  std::vector<std::vector<double>> scores;  // per stage, per node
  double patchmatch_seconds = 0.0;
  double coordinate_seconds = 0.0;
};

// With config.keypoints_only, coordinate descent touches only the lattice
// nodes nearest to `keypoints`.
FlowField infer_dense(const MatchingField& field, const Tensor& pooled, const InferenceGeometry& geometry,
                      const InferenceConfig& config, std::span<const Point2> keypoints = {},
                      InferenceTrace* trace = nullptr);

// Argmax over every target lattice node. `subset` restricts the source nodes;
// nodes outside it keep score NaN and target (0, 0).
FlowField infer_exhaustive(const MatchingField& field, const InferenceGeometry& geometry, std::size_t batch_size,
                           std::span<const std::size_t> subset = {}, std::size_t guard = kExhaustiveGuard);

// Source pixel plus the displacement of its nearest lattice node, clamped to the target image.
std::vector<Point2> transfer_keypoints(const FlowField& flow, std::span<const Point2> sources);

// Text header then float32 little-endian (dy, dx) pairs, row-major.
void write_flow(const std::filesystem::path& path, const FlowField& flow);
FlowField read_flow(const std::filesystem::path& path);

// Color-wheel rendering: hue encodes direction, saturation the magnitude
// relative to `max_magnitude` (or the largest displacement when unset).
void write_flow_png(const std::filesystem::path& path, const FlowField& flow,
                    std::optional<double> max_magnitude = std::nullopt);

}  // namespace nemf
