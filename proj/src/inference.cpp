#include "nemf/inference.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"
#include "nemf/error.hpp"
#include "nemf/features.hpp"
#include "nemf/parallel.hpp"
#include "nemf/random.hpp"

namespace nemf {

namespace {

constexpr char kFlowMagic[] = "NMFF";
constexpr int kFlowVersion = 1;

Point2 clamp_point(Point2 p, Extent e) {
  return {std::clamp(p.row, 0.0, static_cast<double>(e.rows) - 1.0),
          std::clamp(p.col, 0.0, static_cast<double>(e.cols) - 1.0)};
}

std::size_t nearest_node(double pixel, std::size_t count, std::size_t extent) {
  const double clamped = std::clamp(pixel, 0.0, static_cast<double>(extent) - 1.0);
  const double g = std::round(pixel_to_lattice(clamped, count, extent));
  return std::min(static_cast<std::size_t>(std::max(g, 0.0)), count - 1);
}

std::vector<QueryPoint> flow_queries(const FlowField& flow) {
  std::vector<QueryPoint> out(flow.targets.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {flow.geometry.source_point(i), flow.targets[i]};
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::vector<double> MatchingField::score(std::span<const QueryPoint> points, std::size_t batch_size) const {
  if (batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "score: batch size must be positive");
  std::vector<double> scores(points.size());
  const std::size_t chunks = (points.size() + batch_size - 1) / batch_size;
#pragma omp parallel for schedule(static) num_threads(num_threads())
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(chunks); ++ci) {
    const std::size_t begin = static_cast<std::size_t>(ci) * batch_size;
    const std::size_t end = std::min(points.size(), begin + batch_size);
    const Tensor out = score_tensor(query_tensor(points.subspan(begin, end - begin)));
    const auto v = out.values();
    std::copy(v.begin(), v.end(), scores.begin() + static_cast<std::ptrdiff_t>(begin));
  }
  return scores;
}

NeuralField::NeuralField(const FieldModel& model, const CostFeatureVolume& volume)
    : model_(model.frozen()), volume_(volume.detached()) {}

Tensor NeuralField::score_tensor(const Tensor& points) const { return evaluate(model_, volume_, points).scores; }

InferenceGeometry InferenceGeometry::full_resolution(Extent source, Extent target) {
  return {source, target, source.rows, source.cols, target.rows, target.cols};
}

InferenceGeometry InferenceGeometry::lattice(Extent source, Extent target, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw Error(ErrorCode::kInvalidArgument, "inference lattice must be non-empty");
  return {source, target, rows, cols, rows, cols};
}

Point2 InferenceGeometry::source_point(std::size_t index) const {
  const double r = static_cast<double>(index / source_cols);
  const double c = static_cast<double>(index % source_cols);
  return {lattice_to_pixel(r, source_rows, source_extent.rows), lattice_to_pixel(c, source_cols, source_extent.cols)};
}

Point2 InferenceGeometry::target_point(std::size_t index) const {
  const double r = static_cast<double>(index / target_cols);
  const double c = static_cast<double>(index % target_cols);
  return {lattice_to_pixel(r, target_rows, target_extent.rows), lattice_to_pixel(c, target_cols, target_extent.cols)};
}

std::size_t InferenceGeometry::nearest_source(Point2 pixel) const {
  return nearest_node(pixel.row, source_rows, source_extent.rows) * source_cols +
         nearest_node(pixel.col, source_cols, source_extent.cols);
}

Point2 FlowField::displacement(std::size_t index) const {
  const Point2 x = geometry.source_point(index);
  return {targets[index].row - x.row, targets[index].col - x.col};
}

void validate(const InferenceConfig& c) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kConfig, msg); };
  if (c.rounds == 0) fail("rounds must be at least 1");
  if (!(c.step_size >= 0.0) || !std::isfinite(c.step_size)) fail("step_size must be finite and non-negative");
  if (c.batch_size == 0) fail("batch_size must be at least 1");
}

FlowField initialize_flow(const Tensor& pooled, const InferenceGeometry& g) {
  if (pooled.rank() != 4) throw Error(ErrorCode::kShape, "initialize_flow: pooled volume must be 4D");
  const std::size_t hs = pooled.extent(0), ws = pooled.extent(1), ht = pooled.extent(2), wt = pooled.extent(3);
  const std::size_t T = ht * wt;
  const auto v = pooled.values();
  FlowField flow;
  flow.geometry = g;
  flow.provenance = "init";
  flow.targets.resize(g.source_count());
  for (std::size_t i = 0; i < g.source_count(); ++i) {
    const Point2 x = g.source_point(i);
    const std::size_t cell = nearest_node(x.row, hs, g.source_extent.rows) * ws +
                             nearest_node(x.col, ws, g.source_extent.cols);
    const double* slice = v.data() + cell * T;
    const std::size_t best = static_cast<std::size_t>(std::max_element(slice, slice + T) - slice);
    flow.targets[i] = {lattice_to_pixel(static_cast<double>(best / wt), ht, g.target_extent.rows),
                       lattice_to_pixel(static_cast<double>(best % wt), wt, g.target_extent.cols)};
  }
  return flow;
}

FlowField patchmatch_round(const MatchingField& field, const FlowField& flow, const InferenceConfig& config,
                           std::size_t round) {
  const auto& g = flow.geometry;
  const std::size_t P = g.source_count();
  static constexpr std::array<std::array<int, 2>, 8> kOffsets = {
      {{-1, 0}, {0, -1}, {0, 1}, {1, 0}, {-1, -1}, {-1, 1}, {1, -1}, {1, 1}}};
  const std::size_t n_offsets = config.neighborhood == Neighborhood::kEight ? 8 : 4;

  std::vector<QueryPoint> candidates;
  std::vector<std::size_t> offsets{0};
  candidates.reserve(P * (1 + n_offsets + config.random_candidates));
  const std::uint64_t round_seed = derive_seed(config.seed, round + 1);
  for (std::size_t i = 0; i < P; ++i) {
    const Point2 x = g.source_point(i);
    candidates.push_back({x, flow.targets[i]});
    const auto r = static_cast<std::ptrdiff_t>(i / g.source_cols);
    const auto c = static_cast<std::ptrdiff_t>(i % g.source_cols);
    for (std::size_t k = 0; k < n_offsets; ++k) {
      const std::ptrdiff_t nr = r + kOffsets[k][0];
      const std::ptrdiff_t nc = c + kOffsets[k][1];
      if (nr < 0 || nc < 0 || nr >= static_cast<std::ptrdiff_t>(g.source_rows) ||
          nc >= static_cast<std::ptrdiff_t>(g.source_cols)) {
        continue;
      }
      const Point2 d = flow.displacement(static_cast<std::size_t>(nr) * g.source_cols + static_cast<std::size_t>(nc));
      candidates.push_back({x, clamp_point({x.row + d.row, x.col + d.col}, g.target_extent)});
    }
    if (config.random_candidates > 0) {
      Rng rng(derive_seed(round_seed, i));
      for (std::size_t k = 0; k < config.random_candidates; ++k) {
        candidates.push_back({x, g.target_point(rng.index(g.target_count()))});
      }
    }
    offsets.push_back(candidates.size());
  }

  const auto scores = field.score(candidates, config.batch_size);
  FlowField next;
  next.geometry = g;
  next.provenance = flow.provenance;
  next.targets.resize(P);
  next.scores.resize(P);
  for (std::size_t i = 0; i < P; ++i) {
    std::size_t best = offsets[i];
    for (std::size_t j = offsets[i] + 1; j < offsets[i + 1]; ++j) {
      if (scores[j] > scores[best]) best = j;
    }
    next.targets[i] = candidates[best].target;
    next.scores[i] = scores[best];
  }
  return next;
}

FlowField coordinate_optimize(const MatchingField& field, const FlowField& flow, const InferenceConfig& config,
                              std::span<const std::size_t> mask) {
  const auto& g = flow.geometry;
  FlowField next = flow;
  if (next.scores.size() != next.targets.size()) next.scores = field.score(flow_queries(flow), config.batch_size);
  if (config.step_size == 0.0 || config.coordinate_steps == 0) return next;

  std::vector<std::size_t> nodes;
  if (mask.empty()) {
    nodes.resize(g.source_count());
    for (std::size_t i = 0; i < nodes.size(); ++i) nodes[i] = i;
  } else {
    nodes.assign(mask.begin(), mask.end());
  }
  // Pixel-space gradients rescaled to steps in [-1, 1] coordinates.
  const double half_r = 0.5 * static_cast<double>(g.target_extent.rows - 1);
  const double half_c = 0.5 * static_cast<double>(g.target_extent.cols - 1);
  const double gain_r = config.step_size * half_r * half_r;
  const double gain_c = config.step_size * half_c * half_c;
  const double max_r = static_cast<double>(g.target_extent.rows) - 1.0;
  const double max_c = static_cast<double>(g.target_extent.cols) - 1.0;

  const std::size_t B = config.batch_size;
  const std::size_t chunks = (nodes.size() + B - 1) / B;
#pragma omp parallel for schedule(static) num_threads(num_threads())
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(chunks); ++ci) {
    const std::size_t begin = static_cast<std::size_t>(ci) * B;
    const std::size_t n = std::min(nodes.size(), begin + B) - begin;
    std::vector<double> pts(n * 4);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t i = nodes[begin + j];
      const Point2 x = g.source_point(i);
      pts[j * 4 + 0] = x.row;
      pts[j * 4 + 1] = x.col;
      pts[j * 4 + 2] = flow.targets[i].row;
      pts[j * 4 + 3] = flow.targets[i].col;
    }
    for (std::size_t s = 0; s < config.coordinate_steps; ++s) {
      const Tensor p = Tensor::from_values({n, 4}, pts, true);
      backward(scale(sum(log(field.score_tensor(p))), -1.0));
      const auto grad = p.grad();
      for (std::size_t j = 0; j < n; ++j) {
        pts[j * 4 + 2] = std::clamp(pts[j * 4 + 2] - gain_r * grad[j * 4 + 2], 0.0, max_r);
        pts[j * 4 + 3] = std::clamp(pts[j * 4 + 3] - gain_c * grad[j * 4 + 3], 0.0, max_c);
      }
    }
    const auto final_scores = field.score_tensor(Tensor::from_values({n, 4}, pts)).to_vector();
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t i = nodes[begin + j];
      if (final_scores[j] >= next.scores[i]) {
        next.targets[i] = {pts[j * 4 + 2], pts[j * 4 + 3]};
        next.scores[i] = final_scores[j];
      }
    }
  }
  return next;
}

FlowField infer_dense(const MatchingField& field, const Tensor& pooled, const InferenceGeometry& geometry,
                      const InferenceConfig& config, std::span<const Point2> keypoints, InferenceTrace* trace) {
  validate(config);
  std::vector<std::size_t> mask;
  if (config.keypoints_only) {
    if (keypoints.empty()) throw Error(ErrorCode::kInvalidArgument, "keypoints-only inference needs keypoints");
    for (const auto& k : keypoints) mask.push_back(geometry.nearest_source(k));
    std::sort(mask.begin(), mask.end());
    mask.erase(std::unique(mask.begin(), mask.end()), mask.end());
  }
  auto record = [&](const std::string& stage, const FlowField& f) {
    if (trace == nullptr) return;
    trace->stages.push_back(stage);
    trace->scores.push_back(f.scores);
  };

  FlowField flow = initialize_flow(pooled, geometry);
  flow.scores = field.score(flow_queries(flow), config.batch_size);
  record("init", flow);
  for (std::size_t round = 0; round < config.rounds; ++round) {
    auto t0 = std::chrono::steady_clock::now();
    flow = patchmatch_round(field, flow, config, round);
    if (trace != nullptr) trace->patchmatch_seconds += seconds_since(t0);
    record("patchmatch " + std::to_string(round + 1), flow);
    if (!config.coordinate_optimization) continue;
    t0 = std::chrono::steady_clock::now();
    flow = coordinate_optimize(field, flow, config, mask);
    if (trace != nullptr) trace->coordinate_seconds += seconds_since(t0);
    record("coordinate " + std::to_string(round + 1), flow);
  }
  flow.provenance = config.coordinate_optimization ? "patchmatch+coordinate" : "patchmatch";
  return flow;
}

FlowField infer_exhaustive(const MatchingField& field, const InferenceGeometry& geometry, std::size_t batch_size,
                           std::span<const std::size_t> subset, std::size_t guard) {
  std::vector<std::size_t> sources;
  if (subset.empty()) {
    sources.resize(geometry.source_count());
    for (std::size_t i = 0; i < sources.size(); ++i) sources[i] = i;
  } else {
    sources.assign(subset.begin(), subset.end());
  }
  const std::size_t T = geometry.target_count();
  const double evaluations = static_cast<double>(sources.size()) * static_cast<double>(T);
  if (evaluations > static_cast<double>(guard)) {
    std::ostringstream os;
    os << "exhaustive inference needs " << static_cast<std::uint64_t>(evaluations) << " evaluations, above the limit of "
       << guard;
    throw Error(ErrorCode::kGuard, os.str());
  }

  FlowField flow;
  flow.geometry = geometry;
  flow.provenance = "exhaustive";
  flow.targets.assign(geometry.source_count(), Point2{});
  flow.scores.assign(geometry.source_count(), std::numeric_limits<double>::quiet_NaN());

  std::vector<Point2> lattice(T);
  for (std::size_t t = 0; t < T; ++t) lattice[t] = geometry.target_point(t);
  const std::size_t group = std::max<std::size_t>(1, (1u << 16) / std::max<std::size_t>(T, 1));
  std::vector<QueryPoint> queries;
  for (std::size_t begin = 0; begin < sources.size(); begin += group) {
    const std::size_t end = std::min(sources.size(), begin + group);
    queries.clear();
    for (std::size_t s = begin; s < end; ++s) {
      const Point2 x = geometry.source_point(sources[s]);
      for (const auto& y : lattice) queries.push_back({x, y});
    }
    const auto scores = field.score(queries, batch_size);
    for (std::size_t s = begin; s < end; ++s) {
      const double* row = scores.data() + (s - begin) * T;
      const std::size_t best = static_cast<std::size_t>(std::max_element(row, row + T) - row);
      flow.targets[sources[s]] = lattice[best];
      flow.scores[sources[s]] = row[best];
    }
  }
  return flow;
}

std::vector<Point2> transfer_keypoints(const FlowField& flow, std::span<const Point2> sources) {
  std::vector<Point2> out;
  out.reserve(sources.size());
  for (const auto& p : sources) {
    const Point2 d = flow.displacement(flow.geometry.nearest_source(p));
    out.push_back(clamp_point({p.row + d.row, p.col + d.col}, flow.geometry.target_extent));
  }
  return out;
}

void write_flow(const std::filesystem::path& path, const FlowField& flow) {
  const auto& g = flow.geometry;
  if (flow.targets.size() != g.source_count()) throw Error(ErrorCode::kShape, "write_flow: flow size mismatch");
  std::string provenance = flow.provenance;
  std::replace(provenance.begin(), provenance.end(), '\n', ' ');
  std::ostringstream header;
  header << kFlowMagic << " " << kFlowVersion << "\n"
         << "source_lattice " << g.source_rows << " " << g.source_cols << "\n"
         << "target_lattice " << g.target_rows << " " << g.target_cols << "\n"
         << "source_extent " << g.source_extent.rows << " " << g.source_extent.cols << "\n"
         << "target_extent " << g.target_extent.rows << " " << g.target_extent.cols << "\n"
         << "provenance " << provenance << "\n"
         << "data float32_le dy dx\n";
  io::ByteWriter w;
  w.bytes(header.str());
  for (std::size_t i = 0; i < flow.targets.size(); ++i) {
    const Point2 d = flow.displacement(i);
    if (!std::isfinite(d.row) || !std::isfinite(d.col)) {
      throw Error(ErrorCode::kNonFinite, "write_flow: non-finite displacement at node " + std::to_string(i));
    }
    w.f32(static_cast<float>(d.row));
    w.f32(static_cast<float>(d.col));
  }
  io::write_file(path, w.buffer());
}

FlowField read_flow(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  const std::string name = path.string();
  std::size_t pos = 0;
  auto next_line = [&]() {
    const auto* begin = reinterpret_cast<const char*>(bytes.data()) + pos;
    const auto* end = reinterpret_cast<const char*>(bytes.data()) + bytes.size();
    const auto* nl = std::find(begin, end, '\n');
    if (nl == end) throw Error(ErrorCode::kTruncated, name + ": flow header truncated");
    pos += static_cast<std::size_t>(nl - begin) + 1;
    return std::string(begin, nl);
  };
  std::istringstream first(next_line());
  std::string magic;
  int version = 0;
  first >> magic >> version;
  if (magic != kFlowMagic) throw Error(ErrorCode::kBadMagic, name + ": not a flow file");
  if (version != kFlowVersion) {
    throw Error(ErrorCode::kUnsupportedVersion, name + ": unsupported flow version " + std::to_string(version));
  }
  FlowField flow;
  auto& g = flow.geometry;
  for (;;) {
    const std::string line = next_line();
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "source_lattice") {
      is >> g.source_rows >> g.source_cols;
    } else if (key == "target_lattice") {
      is >> g.target_rows >> g.target_cols;
    } else if (key == "source_extent") {
      is >> g.source_extent.rows >> g.source_extent.cols;
    } else if (key == "target_extent") {
      is >> g.target_extent.rows >> g.target_extent.cols;
    } else if (key == "provenance") {
      flow.provenance = line.size() > key.size() + 1 ? line.substr(key.size() + 1) : "";
    } else if (key == "data") {
      break;
    } else {
      throw Error(ErrorCode::kCorrupt, name + ": unknown header line '" + line + "'");
    }
    if (is.fail()) throw Error(ErrorCode::kCorrupt, name + ": malformed header line '" + line + "'");
  }
  const std::size_t P = g.source_count();
  if (P == 0) throw Error(ErrorCode::kCorrupt, name + ": empty source lattice");
  io::ByteReader r(bytes.data() + pos, bytes.size() - pos, name);
  flow.targets.resize(P);
  for (std::size_t i = 0; i < P; ++i) {
    const double dy = r.f32();
    const double dx = r.f32();
    const Point2 x = g.source_point(i);
    flow.targets[i] = {x.row + dy, x.col + dx};
  }
  if (r.remaining() != 0) throw Error(ErrorCode::kCorrupt, name + ": trailing bytes after flow data");
  return flow;
}

void write_flow_png(const std::filesystem::path& path, const FlowField& flow, std::optional<double> max_magnitude) {
  // Color wheel segments: red-yellow, yellow-green, green-cyan, cyan-blue, blue-magenta, magenta-red.
  constexpr std::array<int, 6> kSegments = {15, 6, 4, 11, 13, 6};
  std::vector<std::array<double, 3>> wheel;
  for (std::size_t s = 0; s < kSegments.size(); ++s) {
    for (int i = 0; i < kSegments[s]; ++i) {
      const double t = static_cast<double>(i) / kSegments[s];
      switch (s) {
        case 0: wheel.push_back({1.0, t, 0.0}); break;
        case 1: wheel.push_back({1.0 - t, 1.0, 0.0}); break;
        case 2: wheel.push_back({0.0, 1.0, t}); break;
        case 3: wheel.push_back({0.0, 1.0 - t, 1.0}); break;
        case 4: wheel.push_back({t, 0.0, 1.0}); break;
        default: wheel.push_back({1.0, 0.0, 1.0 - t}); break;
      }
    }
  }
  const auto& g = flow.geometry;
  double radius = max_magnitude.value_or(0.0);
  if (!max_magnitude) {
    for (std::size_t i = 0; i < flow.targets.size(); ++i) {
      const Point2 d = flow.displacement(i);
      radius = std::max(radius, std::hypot(d.row, d.col));
    }
  }
  if (radius <= 0.0) radius = 1.0;

  Image img;
  img.rows = g.source_rows;
  img.cols = g.source_cols;
  img.channels = 3;
  img.data.resize(img.rows * img.cols * 3);
  const double n = static_cast<double>(wheel.size());
  for (std::size_t i = 0; i < flow.targets.size(); ++i) {
    const Point2 d = flow.displacement(i);
    const double u = d.col / radius;
    const double v = d.row / radius;
    const double rad = std::hypot(u, v);
    const double angle = std::atan2(-v, -u) / std::numbers::pi;
    const double fk = (angle + 1.0) / 2.0 * (n - 1.0);
    const auto k0 = static_cast<std::size_t>(std::floor(fk));
    const std::size_t k1 = (k0 + 1) % wheel.size();
    const double f = fk - std::floor(fk);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      double col = (1.0 - f) * wheel[k0][ch] + f * wheel[k1][ch];
      col = rad <= 1.0 ? 1.0 - rad * (1.0 - col) : col * 0.75;
      img.data[i * 3 + ch] = static_cast<float>(col);
    }
  }
  write_png(path, img);
}

}  // namespace nemf
