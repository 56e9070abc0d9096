#pragma once

#include <string>
#include <vector>

#include "nemf/geometry.hpp"

namespace nemf {

struct KeypointPair {
  Point2 source;
  Point2 target;
};

// Axis-aligned box in pixel coordinates: x is the column axis, y the row axis.
struct BoundingBox {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
};

struct PairAnnotation {
  std::string source;  // image path or "synthetic:<id>"
  std::string target;
  std::vector<KeypointPair> keypoints;
  BoundingBox bbox;  // in the target image
  std::string category;
  Extent source_extent;
  Extent target_extent;
};

}  // namespace nemf
