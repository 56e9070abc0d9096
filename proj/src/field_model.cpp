#include "nemf/field_model.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "nemf/error.hpp"
#include "nemf/parallel.hpp"
#include "nemf/random.hpp"

namespace nemf {

namespace {

void uniform_fill(Tensor& t, double bound, Rng& rng) {
  for (auto& v : t.mutable_values()) v = static_cast<double>(static_cast<float>(rng.uniform(-bound, bound)));
}

std::vector<Tensor*> member_pointers(FieldModel& m) {
  std::vector<Tensor*> out{&m.in_w, &m.in_b};
  for (auto& b : m.blocks) {
    for (Tensor* t : {&b.cond_w, &b.cond_b, &b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b}) out.push_back(t);
  }
  out.push_back(&m.head_w);
  out.push_back(&m.head_b);
  return out;
}

}  // namespace

std::vector<std::pair<std::string, Shape>> FieldModel::layout(const FieldConfig& c) {
  std::vector<std::pair<std::string, Shape>> out{{"field.in.weight", {c.input_dims(), c.hidden}},
                                                 {"field.in.bias", {c.hidden}}};
  for (std::size_t b = 0; b < c.blocks; ++b) {
    const std::string p = "field.block" + std::to_string(b) + ".";
    out.push_back({p + "cond.weight", {c.channels, c.hidden}});
    out.push_back({p + "cond.bias", {c.hidden}});
    out.push_back({p + "fc1.weight", {c.hidden, c.hidden}});
    out.push_back({p + "fc1.bias", {c.hidden}});
    out.push_back({p + "fc2.weight", {c.hidden, c.hidden}});
    out.push_back({p + "fc2.bias", {c.hidden}});
  }
  out.push_back({"field.head.weight", {c.hidden, 1}});
  out.push_back({"field.head.bias", {1}});
  return out;
}

FieldModel FieldModel::initialize(const FieldConfig& config, std::uint64_t seed) {
  if (config.hidden == 0 || config.channels == 0) {
    throw Error(ErrorCode::kInvalidArgument, "field model: hidden width and channels must be positive");
  }
  FieldModel m;
  m.config = config;
  m.blocks.resize(config.blocks);
  const auto shapes = layout(config);
  auto members = member_pointers(m);
  for (std::size_t i = 0; i < members.size(); ++i) *members[i] = Tensor::zeros(shapes[i].second, true);

  Rng rng(derive_seed(seed, 0xf1e1d));
  auto he = [](std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); };
  uniform_fill(m.in_w, he(config.input_dims()), rng);
  for (auto& b : m.blocks) {
    uniform_fill(b.cond_w, std::sqrt(3.0 / static_cast<double>(config.channels)), rng);
    uniform_fill(b.fc1_w, he(config.hidden), rng);
    uniform_fill(b.fc2_w, he(config.hidden), rng);
  }
  uniform_fill(m.head_w, std::sqrt(1.0 / static_cast<double>(config.hidden)), rng);
  return m;
}

std::vector<NamedTensor> FieldModel::parameters() const {
  auto& self = const_cast<FieldModel&>(*this);
  const auto members = member_pointers(self);
  const auto names = layout(config);
  std::vector<NamedTensor> out;
  out.reserve(members.size());
  for (std::size_t i = 0; i < members.size(); ++i) out.push_back({names[i].first, *members[i]});
  return out;
}

std::size_t FieldModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

FieldModel FieldModel::frozen() const {
  FieldModel copy = *this;
  for (Tensor* t : member_pointers(copy)) *t = t->detach();
  return copy;
}

Tensor positional_encoding(const Tensor& normalized, const EncoderConfig& config) {
  if (normalized.rank() != 2) {
    throw Error(ErrorCode::kShape, "positional_encoding: expected [B, n], got " + shape_str(normalized.shape()));
  }
  const std::size_t B = normalized.extent(0);
  const std::size_t n = normalized.extent(1);
  const std::size_t per = config.dims_per_scalar();
  const std::size_t octaves = config.octaves + 1;
  std::vector<double> freq(octaves);
  for (std::size_t l = 0; l < octaves; ++l) freq[l] = std::ldexp(std::numbers::pi, static_cast<int>(l));

  const auto in = normalized.values();
  std::vector<double> out(B * n * per);
  for (std::size_t i = 0; i < B * n; ++i) {
    double* o = out.data() + i * per;
    for (std::size_t l = 0; l < octaves; ++l) {
      const double arg = freq[l] * in[i];
      o[2 * l] = std::sin(arg);
      o[2 * l + 1] = std::cos(arg);
    }
  }
  return record_op("positional_encoding", {B, n * per}, std::move(out), {normalized},
                   [normalized, freq, per, octaves](std::span<const double> y, std::span<const double> g) {
                     auto gi = grad_sink(normalized);
                     if (gi.empty()) return;
                     for (std::size_t i = 0; i < gi.size(); ++i) {
                       const double* yo = y.data() + i * per;
                       const double* go = g.data() + i * per;
                       double acc = 0.0;
                       for (std::size_t l = 0; l < octaves; ++l) {
                         // d sin = w cos, d cos = -w sin
                         acc += freq[l] * (go[2 * l] * yo[2 * l + 1] - go[2 * l + 1] * yo[2 * l]);
                       }
                       gi[i] += acc;
                     }
                   });
}

Tensor normalize_points(const Tensor& points, Extent source_extent, Extent target_extent) {
  std::vector<double> scales;
  std::vector<double> offsets;
  for (std::size_t extent : {source_extent.rows, source_extent.cols, target_extent.rows, target_extent.cols}) {
    if (extent <= 1) {
      scales.push_back(0.0);
      offsets.push_back(0.0);
    } else {
      scales.push_back(2.0 / static_cast<double>(extent - 1));
      offsets.push_back(-1.0);
    }
  }
  return add(mul(points, Tensor::from_values({4}, scales)), Tensor::from_values({4}, offsets));
}

FieldOutput evaluate(const FieldModel& model, const CostFeatureVolume& volume, const Tensor& points) {
  const auto& c = model.config;
  if (volume.values.rank() != 5 || volume.channels() != c.channels) {
    std::ostringstream os;
    os << "evaluate: volume " << shape_str(volume.values.shape()) << " does not provide " << c.channels
       << " channels expected by the field model";
    throw Error(ErrorCode::kShape, os.str());
  }
  if (points.rank() != 2 || points.extent(1) != 4) {
    throw Error(ErrorCode::kShape, "evaluate: points must be [B,4], got " + shape_str(points.shape()));
  }
  const Tensor encoded =
      positional_encoding(normalize_points(points, volume.source_extent, volume.target_extent), c.encoder);
  const Tensor phi = interpolate(volume, points);
  Tensor h = add(matmul(encoded, model.in_w), model.in_b);
  for (const auto& b : model.blocks) {
    const Tensor input = add(h, add(matmul(phi, b.cond_w), b.cond_b));
    Tensor t = relu(add(matmul(input, b.fc1_w), b.fc1_b));
    t = relu(add(matmul(t, b.fc2_w), b.fc2_b));
    h = add(input, t);
  }
  Tensor logits = add(matmul(h, model.head_w), model.head_b);
  Tensor scores = sigmoid(logits);
  return {std::move(logits), std::move(scores)};
}

std::vector<double> score_points(const FieldModel& frozen_model, const CostFeatureVolume& frozen_volume,
                                 std::span<const QueryPoint> points, std::size_t batch_size) {
  if (batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "score_points: batch size must be positive");
  std::vector<double> scores(points.size());
  const std::size_t chunks = (points.size() + batch_size - 1) / batch_size;
#pragma omp parallel for schedule(static) num_threads(num_threads())
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(chunks); ++ci) {
    const std::size_t begin = static_cast<std::size_t>(ci) * batch_size;
    const std::size_t end = std::min(points.size(), begin + batch_size);
    const auto out = evaluate(frozen_model, frozen_volume, query_tensor(points.subspan(begin, end - begin)));
    const auto v = out.scores.values();
    std::copy(v.begin(), v.end(), scores.begin() + static_cast<std::ptrdiff_t>(begin));
  }
  return scores;
}

}  // namespace nemf
