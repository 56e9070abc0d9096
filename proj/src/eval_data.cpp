#include "nemf/eval_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "nemf/error.hpp"
#include "nemf/random.hpp"

namespace nemf {

namespace {

using nlohmann::json;

constexpr std::string_view kSyntheticPrefix = "synthetic:";

bool is_synthetic(const std::string& ref) { return ref.rfind(kSyntheticPrefix, 0) == 0; }

Extent size_field(const json& j, const char* key) {
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw std::invalid_argument(std::string(key) + " must be [W, H]");
  const auto w = v[0].get<std::int64_t>();
  const auto h = v[1].get<std::int64_t>();
  if (w <= 0 || h <= 0) throw std::invalid_argument(std::string(key) + " must be positive");
  return {static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
}

Extent resolve_extent(const json& j, const char* size_key, const std::string& ref,
                      const std::filesystem::path& base) {
  if (j.contains(size_key)) return size_field(j, size_key);
  if (is_synthetic(ref)) throw std::invalid_argument(std::string("synthetic reference needs ") + size_key);
  const std::filesystem::path p = std::filesystem::path(ref).is_absolute() ? std::filesystem::path(ref) : base / ref;
  if (!std::filesystem::exists(p)) throw std::invalid_argument("missing image " + p.string());
  const auto [rows, cols] = probe_image_size(p);
  return {rows, cols};
}

PairAnnotation parse_record(const std::string& line, const std::filesystem::path& base) {
  const json j = json::parse(line);
  if (!j.is_object()) throw std::invalid_argument("record is not a JSON object");
  PairAnnotation a;
  a.source = j.at("src").get<std::string>();
  a.target = j.at("tgt").get<std::string>();
  a.category = j.value("category", std::string{});
  for (const auto& kp : j.at("kps")) {
    if (!kp.is_array() || kp.size() != 4) throw std::invalid_argument("keypoint must be [xs, ys, xt, yt]");
    a.keypoints.push_back({{kp[1].get<double>(), kp[0].get<double>()}, {kp[3].get<double>(), kp[2].get<double>()}});
  }
  a.source_extent = resolve_extent(j, "src_size", a.source, base);
  a.target_extent = resolve_extent(j, "tgt_size", a.target, base);
  if (j.contains("bbox")) {
    const auto& b = j.at("bbox");
    if (!b.is_array() || b.size() != 4) throw std::invalid_argument("bbox must be [x0, y0, x1, y1]");
    a.bbox = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
  } else {
    a.bbox = {0.0, 0.0, static_cast<double>(a.target_extent.cols), static_cast<double>(a.target_extent.rows)};
  }
  validate_annotation(a);
  return a;
}

bool inside(Point2 p, Extent e) {
  return p.row >= 0.0 && p.col >= 0.0 && p.row <= static_cast<double>(e.rows) - 1.0 &&
         p.col <= static_cast<double>(e.cols) - 1.0;
}

// Continuous color texture: sinusoids at several scales plus soft-edged disks.
class Texture {
 public:
  Texture(std::size_t channels, double extent, Rng& rng) : channels_(channels) {
    constexpr int kWaves = 12;
    for (int k = 0; k < kWaves; ++k) {
      const double period = extent * std::pow(2.0, -rng.uniform(0.5, 3.5));
      const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
      Wave w{std::cos(theta) / period, std::sin(theta) / period, rng.uniform(0.0, 2.0 * std::numbers::pi), {}};
      for (std::size_t c = 0; c < channels; ++c) w.amplitude.push_back(rng.uniform(-0.12, 0.12));
      waves_.push_back(std::move(w));
    }
    constexpr int kDisks = 6;
    for (int k = 0; k < kDisks; ++k) {
      Disk d{rng.uniform(0.0, extent), rng.uniform(0.0, extent), rng.uniform(0.06, 0.2) * extent, {}};
      for (std::size_t c = 0; c < channels; ++c) d.tone.push_back(rng.uniform(-0.3, 0.3));
      disks_.push_back(std::move(d));
    }
  }

  float at(Point2 p, std::size_t channel) const {
    double v = 0.5;
    for (const auto& w : waves_) {
      v += w.amplitude[channel] * std::sin(2.0 * std::numbers::pi * (w.fr * p.row + w.fc * p.col) + w.phase);
    }
    for (const auto& d : disks_) {
      const double r = std::hypot(p.row - d.row, p.col - d.col);
      const double inside_weight = 1.0 / (1.0 + std::exp((r - d.radius) / 0.75));
      v += d.tone[channel] * inside_weight;
    }
    return static_cast<float>(std::clamp(v, 0.0, 1.0));
  }

 private:
  struct Wave {
    double fr, fc, phase;
    std::vector<double> amplitude;
  };
  struct Disk {
    double row, col, radius;
    std::vector<double> tone;
  };
  std::size_t channels_;
  std::vector<Wave> waves_;
  std::vector<Disk> disks_;
};

Image blank(std::size_t rows, std::size_t cols, std::size_t channels) {
  Image img;
  img.rows = rows;
  img.cols = cols;
  img.channels = channels;
  img.data.resize(rows * cols * channels);
  return img;
}

std::vector<double> gaussian_kernel(double sigma) {
  const auto half = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * half + 1));
  for (std::ptrdiff_t i = -half; i <= half; ++i) {
    k[static_cast<std::size_t>(i + half)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
  }
  const double total = std::accumulate(k.begin(), k.end(), 0.0);
  for (auto& v : k) v /= total;
  return k;
}

// Separable blur with clamp-to-edge.
std::vector<double> blur(const std::vector<double>& in, std::size_t rows, std::size_t cols, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const auto half = static_cast<std::ptrdiff_t>(k.size() / 2);
  auto pass = [&](const std::vector<double>& src, bool along_rows) {
    std::vector<double> out(src.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t i = -half; i <= half; ++i) {
          auto rr = static_cast<std::ptrdiff_t>(r);
          auto cc = static_cast<std::ptrdiff_t>(c);
          if (along_rows) {
            rr = std::clamp<std::ptrdiff_t>(rr + i, 0, static_cast<std::ptrdiff_t>(rows) - 1);
          } else {
            cc = std::clamp<std::ptrdiff_t>(cc + i, 0, static_cast<std::ptrdiff_t>(cols) - 1);
          }
          acc += k[static_cast<std::size_t>(i + half)] *
                 src[static_cast<std::size_t>(rr) * cols + static_cast<std::size_t>(cc)];
        }
        out[r * cols + c] = acc;
      }
    }
    return out;
  };
  return pass(pass(in, true), false);
}

}  // namespace

void validate_annotation(const PairAnnotation& a) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kInvalidArgument, msg); };
  for (std::size_t i = 0; i < a.keypoints.size(); ++i) {
    const auto& kp = a.keypoints[i];
    if (!inside(kp.source, a.source_extent)) fail("keypoint " + std::to_string(i) + " lies outside the source image");
    if (!inside(kp.target, a.target_extent)) fail("keypoint " + std::to_string(i) + " lies outside the target image");
  }
  const auto& b = a.bbox;
  if (!(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 > b.x0 && b.y1 > b.y0 &&
        b.x1 <= static_cast<double>(a.target_extent.cols) && b.y1 <= static_cast<double>(a.target_extent.rows))) {
    fail("bounding box is empty or exceeds the target image");
  }
}

DatasetLoad load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open annotation file " + path.string());
  const std::filesystem::path base = path.parent_path();
  DatasetLoad out;
  std::string line;
  while (std::getline(in, line)) {
    ++out.lines;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.annotations.push_back(parse_record(line, base));
    } catch (const std::exception& e) {
      out.errors.push_back("line " + std::to_string(out.lines) + ": " + e.what());
    }
  }
  return out;
}

void save_dataset(const std::filesystem::path& path, std::span<const PairAnnotation> annotations) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& a : annotations) {
    json kps = json::array();
    for (const auto& kp : a.keypoints) kps.push_back({kp.source.col, kp.source.row, kp.target.col, kp.target.row});
    json j = {{"src", a.source},
              {"tgt", a.target},
              {"kps", kps},
              {"bbox", {a.bbox.x0, a.bbox.y0, a.bbox.x1, a.bbox.y1}},
              {"category", a.category},
              {"src_size", {a.source_extent.cols, a.source_extent.rows}},
              {"tgt_size", {a.target_extent.cols, a.target_extent.rows}}};
    out << j.dump() << "\n";
  }
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path.string());
}

WarpFamily parse_warp_family(const std::string& name) {
  if (name == "translation") return WarpFamily::kTranslation;
  if (name == "affine") return WarpFamily::kAffine;
  if (name == "smooth") return WarpFamily::kSmooth;
  throw Error(ErrorCode::kConfig, "unknown warp family '" + name + "' (translation, affine, smooth)");
}

std::string warp_family_name(WarpFamily family) {
  switch (family) {
    case WarpFamily::kTranslation: return "translation";
    case WarpFamily::kAffine: return "affine";
    case WarpFamily::kSmooth: return "smooth";
  }
  return "unknown";
}

Point2 SyntheticWarp::forward(Point2 x) const {
  if (family != WarpFamily::kSmooth) {
    const double r = x.row - center.row;
    const double c = x.col - center.col;
    return {linear[0] * r + linear[1] * c + center.row + shift.row,
            linear[2] * r + linear[3] * c + center.col + shift.col};
  }
  Point2 y = x;
  for (int it = 0; it < 200; ++it) {
    const Point2 g = inverse(y);
    const Point2 next{y.row + (x.row - g.row), y.col + (x.col - g.col)};
    const bool done = std::abs(next.row - y.row) < 1e-14 && std::abs(next.col - y.col) < 1e-14;
    y = next;
    if (done) break;
  }
  return y;
}

Point2 SyntheticWarp::inverse(Point2 y) const {
  if (family != WarpFamily::kSmooth) {
    const double det = linear[0] * linear[3] - linear[1] * linear[2];
    const double r = y.row - center.row - shift.row;
    const double c = y.col - center.col - shift.col;
    return {(linear[3] * r - linear[1] * c) / det + center.row, (-linear[2] * r + linear[0] * c) / det + center.col};
  }
  Point2 x = {y.row - shift.row, y.col - shift.col};
  for (const auto& w : waves) {
    const double s = std::sin(2.0 * std::numbers::pi * (w[2] * y.row + w[3] * y.col));
    x.row += w[0] * s;
    x.col += w[1] * s;
  }
  return x;
}

SyntheticWarp random_warp(WarpFamily family, const SyntheticConfig& config, Rng& rng) {
  SyntheticWarp w;
  w.family = family;
  w.center = {0.5 * static_cast<double>(config.rows - 1), 0.5 * static_cast<double>(config.cols - 1)};
  w.shift = {rng.uniform(-config.max_shift, config.max_shift), rng.uniform(-config.max_shift, config.max_shift)};
  if (family == WarpFamily::kAffine) {
    const double theta = rng.uniform(-config.max_rotation, config.max_rotation);
    const double s = 1.0 + rng.uniform(-config.max_scale, config.max_scale);
    w.linear = {s * std::cos(theta), -s * std::sin(theta), s * std::sin(theta), s * std::cos(theta)};
  } else if (family == WarpFamily::kSmooth) {
    const double extent = static_cast<double>(std::max(config.rows, config.cols));
    for (int k = 0; k < 2; ++k) {
      w.waves.push_back({rng.uniform(-config.smooth_amplitude, config.smooth_amplitude),
                         rng.uniform(-config.smooth_amplitude, config.smooth_amplitude),
                         rng.uniform(-1.0, 1.0) / extent, rng.uniform(-1.0, 1.0) / extent});
    }
  }
  return w;
}

SyntheticPair render_synthetic(const SyntheticWarp& warp, const SyntheticConfig& config, std::uint64_t seed,
                               const std::string& id) {
  if (config.rows < kMinImageExtent || config.cols < kMinImageExtent) {
    throw Error(ErrorCode::kInvalidArgument, "synthetic images must be at least 16 pixels on a side");
  }
  Rng rng(derive_seed(seed, 0x7e47));
  const Texture texture(config.channels, static_cast<double>(std::max(config.rows, config.cols)), rng);
  const Extent extent{config.rows, config.cols};

  SyntheticPair out;
  out.warp = warp;
  out.images.source = blank(config.rows, config.cols, config.channels);
  out.images.target = blank(config.rows, config.cols, config.channels);
  out.images.source_id = "synthetic:" + id + "/src";
  out.images.target_id = "synthetic:" + id + "/tgt";
  for (std::size_t r = 0; r < config.rows; ++r) {
    for (std::size_t c = 0; c < config.cols; ++c) {
      const Point2 p{static_cast<double>(r), static_cast<double>(c)};
      const Point2 q = warp.inverse(p);
      for (std::size_t ch = 0; ch < config.channels; ++ch) {
        out.images.source.at(r, c, ch) = texture.at(p, ch);
        out.images.target.at(r, c, ch) = texture.at(q, ch);
      }
    }
  }

  out.flow.geometry = InferenceGeometry::full_resolution(extent, extent);
  out.flow.provenance = "synthetic " + warp_family_name(warp.family);
  out.flow.targets.resize(config.rows * config.cols);
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < out.flow.targets.size(); ++i) {
    out.flow.targets[i] = warp.forward(out.flow.geometry.source_point(i));
    if (inside(out.flow.targets[i], extent)) valid.push_back(i);
  }
  std::shuffle(valid.begin(), valid.end(), rng.engine());
  valid.resize(std::min(valid.size(), config.keypoints));
  std::sort(valid.begin(), valid.end());

  auto& a = out.annotation;
  a.source = out.images.source_id;
  a.target = out.images.target_id;
  a.category = "synthetic-" + warp_family_name(warp.family);
  a.source_extent = extent;
  a.target_extent = extent;
  a.bbox = {0.0, 0.0, static_cast<double>(config.cols), static_cast<double>(config.rows)};
  for (std::size_t i : valid) a.keypoints.push_back({out.flow.geometry.source_point(i), out.flow.targets[i]});
  return out;
}

std::vector<SyntheticPair> generate_synthetic(std::size_t count, WarpFamily family, std::uint64_t seed,
                                              const SyntheticConfig& config) {
  if (count == 0) throw Error(ErrorCode::kInvalidArgument, "generate_synthetic: count must be at least 1");
  std::vector<SyntheticPair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t pair_seed = derive_seed(seed, i);
    Rng rng(derive_seed(pair_seed, 0x3a4f));
    const SyntheticWarp warp = random_warp(family, config, rng);
    out.push_back(render_synthetic(warp, config, pair_seed, std::to_string(i)));
  }
  return out;
}

PckCount pck_count(std::span<const Point2> predicted, const PairAnnotation& annotation, const PckConfig& config) {
  if (predicted.size() != annotation.keypoints.size()) {
    throw Error(ErrorCode::kShape, "pck: " + std::to_string(predicted.size()) + " predictions for " +
                                       std::to_string(annotation.keypoints.size()) + " keypoints");
  }
  if (!(config.alpha > 0.0)) throw Error(ErrorCode::kInvalidArgument, "pck: alpha must be positive");
  const double size = config.normalization == PckNormalization::kBoundingBox
                          ? std::max(annotation.bbox.width(), annotation.bbox.height())
                          : static_cast<double>(std::max(annotation.target_extent.rows, annotation.target_extent.cols));
  const double threshold = config.alpha * size;
  PckCount out;
  out.total = predicted.size();
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const Point2 gt = annotation.keypoints[i].target;
    if (std::hypot(predicted[i].row - gt.row, predicted[i].col - gt.col) <= threshold) ++out.correct;
  }
  return out;
}

double pck(std::span<const Point2> predicted, const PairAnnotation& annotation, const PckConfig& config) {
  return pck_count(predicted, annotation, config).ratio();
}

FieldSlice export_field_slice(const MatchingField& field, const InferenceGeometry& geometry, Point2 source,
                              std::size_t batch_size, double smoothing_radius, std::size_t guard) {
  const std::size_t T = geometry.target_count();
  if (T > guard) {
    throw Error(ErrorCode::kGuard, "field slice needs " + std::to_string(T) + " evaluations, above the limit of " +
                                       std::to_string(guard));
  }
  if (!(smoothing_radius >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "smoothing radius must be non-negative");
  FieldSlice slice;
  slice.rows = geometry.target_rows;
  slice.cols = geometry.target_cols;
  slice.smoothing_radius = smoothing_radius;
  std::vector<QueryPoint> queries(T);
  slice.positions.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    slice.positions[t] = geometry.target_point(t);
    queries[t] = {source, slice.positions[t]};
  }
  slice.scores = field.score(queries, batch_size);
  if (smoothing_radius > 0.0) slice.scores = blur(slice.scores, slice.rows, slice.cols, smoothing_radius);
  return slice;
}

void write_field_slice_csv(const std::filesystem::path& path, const FieldSlice& slice) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.precision(12);
  out << "# smoothing_radius=" << slice.smoothing_radius << "\n";
  out << "row,col,score\n";
  for (std::size_t i = 0; i < slice.scores.size(); ++i) {
    out << slice.positions[i].row << "," << slice.positions[i].col << "," << slice.scores[i] << "\n";
  }
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path.string());
}

}  // namespace nemf
