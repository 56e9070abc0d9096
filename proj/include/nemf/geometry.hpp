#pragma once

#include <cstddef>
#include <span>

#include "nemf/tensor.hpp"

namespace nemf {

// Continuous pixel position; row first.
struct Point2 {
  double row = 0.0;
  double col = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

// Image size in pixels.
struct Extent {
  std::size_t rows = 0;
  std::size_t cols = 0;

  friend bool operator==(const Extent&, const Extent&) = default;
};

// A point of the 4D matching space: source pixel x and target pixel y.
struct QueryPoint {
  Point2 source;
  Point2 target;
};

// Packs query points into a [B, 4] tensor laid out (x_row, x_col, y_row, y_col).
Tensor query_tensor(std::span<const QueryPoint> points, bool requires_grad = false);

// Align-corners map between pixel coordinates and a lattice of `count` nodes
// spanning [0, extent - 1].
inline double lattice_to_pixel(double index, std::size_t count, std::size_t extent) {
  if (count <= 1 || extent <= 1) return 0.0;
  return index * static_cast<double>(extent - 1) / static_cast<double>(count - 1);
}
inline double pixel_to_lattice(double pixel, std::size_t count, std::size_t extent) {
  if (count <= 1 || extent <= 1) return 0.0;
  return pixel * static_cast<double>(count - 1) / static_cast<double>(extent - 1);
}

// Maps a pixel coordinate to [-1, 1].
inline double normalize_coordinate(double pixel, std::size_t extent) {
  if (extent <= 1) return 0.0;
  return 2.0 * pixel / static_cast<double>(extent - 1) - 1.0;
}

}  // namespace nemf
