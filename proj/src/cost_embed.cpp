#include "nemf/cost_embed.hpp"

#include <array>
#include <cmath>
#include <sstream>

#include "nemf/error.hpp"
#include "nemf/parallel.hpp"
#include "nemf/random.hpp"

namespace nemf {

namespace {

// Cell addressing for one 2D factor of a [S1,S2,T1,T2,C] volume: the plane
// axes (p1, p2) and the remaining flattened axis q, all in units of cells.
struct PlaneLayout {
  std::size_t n1, n2, nq;
  std::size_t s1, s2, sq;

  std::size_t cell(std::size_t p1, std::size_t p2, std::size_t q) const { return p1 * s1 + p2 * s2 + q * sq; }
};

PlaneLayout plane_layout(const Shape& shape, ConvPlane plane) {
  const std::size_t S1 = shape[0], S2 = shape[1], T1 = shape[2], T2 = shape[3];
  if (plane == ConvPlane::kSource) return {S1, S2, T1 * T2, S2 * T1 * T2, T1 * T2, 1};
  return {T1, T2, S1 * S2, T2, 1, T1 * T2};
}

void xavier_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.mutable_values()) v = rng.uniform(-bound, bound);
}

void he_uniform(Tensor& t, std::size_t fan_in, Rng& rng, double gain = 1.0) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.mutable_values()) v = rng.uniform(-bound, bound);
}

void snap_to_float(Tensor& t) {
  for (auto& v : t.mutable_values()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace

namespace {

std::array<Tensor*, 23> member_pointers(EmbedderParams& p) {
  return {&p.conv1_src_w, &p.conv1_src_b, &p.conv1_tgt_w, &p.conv1_tgt_b, &p.conv2_src_w, &p.conv2_src_b,
          &p.conv2_tgt_w, &p.conv2_tgt_b, &p.token_w,     &p.token_b,     &p.ln1_gain,    &p.ln1_bias,
          &p.query_w,     &p.key_w,       &p.value_w,     &p.out_w,       &p.out_b,       &p.ln2_gain,
          &p.ln2_bias,    &p.ffn1_w,      &p.ffn1_b,      &p.ffn2_w,      &p.ffn2_b};
}

}  // namespace

std::vector<std::pair<std::string, Shape>> EmbedderParams::layout(const EmbedderConfig& c) {
  const std::size_t K = c.channels;
  const std::size_t M = c.conv_channels;
  const std::size_t T = c.tgt_rows * c.tgt_cols;
  return {
      {"embed.conv1_src.weight", {3, 3, 1, M}}, {"embed.conv1_src.bias", {M}},
      {"embed.conv1_tgt.weight", {3, 3, M, M}}, {"embed.conv1_tgt.bias", {M}},
      {"embed.conv2_src.weight", {3, 3, M, M}}, {"embed.conv2_src.bias", {M}},
      {"embed.conv2_tgt.weight", {3, 3, M, K}}, {"embed.conv2_tgt.bias", {K}},
      {"embed.token.weight", {T, K}},           {"embed.token.bias", {K}},
      {"embed.ln1.gain", {K}},                  {"embed.ln1.bias", {K}},
      {"embed.attn.query", {K, K}},             {"embed.attn.key", {K, K}},
      {"embed.attn.value", {K, K}},             {"embed.attn.out.weight", {K, K}},
      {"embed.attn.out.bias", {K}},             {"embed.ln2.gain", {K}},
      {"embed.ln2.bias", {K}},                  {"embed.ffn1.weight", {K, c.ffn_hidden}},
      {"embed.ffn1.bias", {c.ffn_hidden}},      {"embed.ffn2.weight", {c.ffn_hidden, K}},
      {"embed.ffn2.bias", {K}},
  };
}

std::vector<NamedTensor> EmbedderParams::parameters() const {
  const auto members = member_pointers(const_cast<EmbedderParams&>(*this));
  const auto names = layout(config);
  std::vector<NamedTensor> out;
  out.reserve(members.size());
  for (std::size_t i = 0; i < members.size(); ++i) out.push_back({names[i].first, *members[i]});
  return out;
}

EmbedderParams EmbedderParams::frozen() const {
  EmbedderParams copy = *this;
  for (Tensor* t : member_pointers(copy)) *t = t->detach();
  return copy;
}

std::size_t EmbedderParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

EmbedderParams EmbedderParams::initialize(const EmbedderConfig& config, std::uint64_t seed) {
  if (config.channels == 0 || config.conv_channels == 0 || config.heads == 0 ||
      config.channels % config.heads != 0 || config.ffn_hidden == 0) {
    throw Error(ErrorCode::kInvalidArgument, "embedder: channels must be a positive multiple of heads");
  }
  EmbedderParams p;
  p.config = config;
  const auto shapes = layout(config);
  const auto members = member_pointers(p);
  for (std::size_t i = 0; i < members.size(); ++i) *members[i] = Tensor::zeros(shapes[i].second, true);

  Rng rng(derive_seed(seed, 0xe4bed));
  const std::size_t K = config.channels;
  const std::size_t M = config.conv_channels;
  he_uniform(p.conv1_src_w, 9, rng);
  he_uniform(p.conv1_tgt_w, 9 * M, rng);
  he_uniform(p.conv2_src_w, 9 * M, rng);
  // residual branch on top of the raw cost starts small
  he_uniform(p.conv2_tgt_w, 9 * M, rng, 0.1);
  xavier_uniform(p.token_w, config.tgt_rows * config.tgt_cols, K, rng);
  for (auto& v : p.ln1_gain.mutable_values()) v = 1.0;
  for (auto& v : p.ln2_gain.mutable_values()) v = 1.0;
  xavier_uniform(p.query_w, K, K, rng);
  xavier_uniform(p.key_w, K, K, rng);
  xavier_uniform(p.value_w, K, K, rng);
  xavier_uniform(p.out_w, K, K, rng);
  he_uniform(p.ffn1_w, K, rng);
  xavier_uniform(p.ffn2_w, config.ffn_hidden, K, rng);
  for (auto* m : members) snap_to_float(*m);
  return p;
}

Tensor conv_plane(const Tensor& input, const Tensor& weight, const Tensor& bias, ConvPlane plane) {
  if (input.rank() != 5 || weight.rank() != 4 || weight.extent(0) != 3 || weight.extent(1) != 3 ||
      weight.extent(2) != input.extent(4) || bias.rank() != 1 || bias.extent(0) != weight.extent(3)) {
    std::ostringstream os;
    os << "conv_plane: incompatible shapes input " << shape_str(input.shape()) << ", weight "
       << shape_str(weight.shape()) << ", bias " << shape_str(bias.shape());
    throw Error(ErrorCode::kShape, os.str());
  }
  const std::size_t cin = input.extent(4);
  const std::size_t cout = weight.extent(3);
  const PlaneLayout L = plane_layout(input.shape(), plane);
  Shape out_shape = input.shape();
  out_shape[4] = cout;
  const std::size_t cells = L.n1 * L.n2 * L.nq;

  std::vector<double> out(cells * cout);
  const double* in = input.values().data();
  const double* w = weight.values().data();
  const double* b = bias.values().data();
  const int threads = num_threads();

#pragma omp parallel for schedule(static) num_threads(threads)
  for (std::ptrdiff_t p1s = 0; p1s < static_cast<std::ptrdiff_t>(L.n1); ++p1s) {
    const auto p1 = static_cast<std::size_t>(p1s);
    for (std::size_t p2 = 0; p2 < L.n2; ++p2) {
      for (std::size_t q = 0; q < L.nq; ++q) {
        double* o = out.data() + L.cell(p1, p2, q) * cout;
        for (std::size_t co = 0; co < cout; ++co) o[co] = b[co];
      }
      for (std::size_t d1 = 0; d1 < 3; ++d1) {
        const std::ptrdiff_t i1 = static_cast<std::ptrdiff_t>(p1 + d1) - 1;
        if (i1 < 0 || i1 >= static_cast<std::ptrdiff_t>(L.n1)) continue;
        for (std::size_t d2 = 0; d2 < 3; ++d2) {
          const std::ptrdiff_t i2 = static_cast<std::ptrdiff_t>(p2 + d2) - 1;
          if (i2 < 0 || i2 >= static_cast<std::ptrdiff_t>(L.n2)) continue;
          const double* tap = w + (d1 * 3 + d2) * cin * cout;
          for (std::size_t q = 0; q < L.nq; ++q) {
            const double* x = in + L.cell(static_cast<std::size_t>(i1), static_cast<std::size_t>(i2), q) * cin;
            double* o = out.data() + L.cell(p1, p2, q) * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double xv = x[ci];
              const double* wr = tap + ci * cout;
              for (std::size_t co = 0; co < cout; ++co) o[co] += xv * wr[co];
            }
          }
        }
      }
    }
  }

  return record_op(
      "conv_plane", std::move(out_shape), std::move(out), {input, weight, bias},
      [input, weight, bias, L, cin, cout, threads](std::span<const double>, std::span<const double> g) {
        const double* in = input.values().data();
        const double* w = weight.values().data();
        if (auto gb = grad_sink(bias); !gb.empty()) {
          const std::size_t cells = L.n1 * L.n2 * L.nq;
          for (std::size_t c = 0; c < cells; ++c)
            for (std::size_t co = 0; co < cout; ++co) gb[co] += g[c * cout + co];
        }
        if (auto gw = grad_sink(weight); !gw.empty()) {
#pragma omp parallel for schedule(static) num_threads(threads)
          for (std::ptrdiff_t tap_s = 0; tap_s < 9; ++tap_s) {
            const auto tap = static_cast<std::size_t>(tap_s);
            const std::size_t d1 = tap / 3, d2 = tap % 3;
            double* gt = gw.data() + tap * cin * cout;
            for (std::size_t p1 = 0; p1 < L.n1; ++p1) {
              const std::ptrdiff_t i1 = static_cast<std::ptrdiff_t>(p1 + d1) - 1;
              if (i1 < 0 || i1 >= static_cast<std::ptrdiff_t>(L.n1)) continue;
              for (std::size_t p2 = 0; p2 < L.n2; ++p2) {
                const std::ptrdiff_t i2 = static_cast<std::ptrdiff_t>(p2 + d2) - 1;
                if (i2 < 0 || i2 >= static_cast<std::ptrdiff_t>(L.n2)) continue;
                for (std::size_t q = 0; q < L.nq; ++q) {
                  const double* x =
                      in + L.cell(static_cast<std::size_t>(i1), static_cast<std::size_t>(i2), q) * cin;
                  const double* go = g.data() + L.cell(p1, p2, q) * cout;
                  for (std::size_t ci = 0; ci < cin; ++ci) {
                    const double xv = x[ci];
                    double* row = gt + ci * cout;
                    for (std::size_t co = 0; co < cout; ++co) row[co] += xv * go[co];
                  }
                }
              }
            }
          }
        }
        if (auto gi = grad_sink(input); !gi.empty()) {
          // gather form: each input cell collects from the outputs that read it
#pragma omp parallel for schedule(static) num_threads(threads)
          for (std::ptrdiff_t i1s = 0; i1s < static_cast<std::ptrdiff_t>(L.n1); ++i1s) {
            const auto i1 = static_cast<std::size_t>(i1s);
            for (std::size_t i2 = 0; i2 < L.n2; ++i2) {
              for (std::size_t d1 = 0; d1 < 3; ++d1) {
                const std::ptrdiff_t p1 = static_cast<std::ptrdiff_t>(i1) + 1 - static_cast<std::ptrdiff_t>(d1);
                if (p1 < 0 || p1 >= static_cast<std::ptrdiff_t>(L.n1)) continue;
                for (std::size_t d2 = 0; d2 < 3; ++d2) {
                  const std::ptrdiff_t p2 = static_cast<std::ptrdiff_t>(i2) + 1 - static_cast<std::ptrdiff_t>(d2);
                  if (p2 < 0 || p2 >= static_cast<std::ptrdiff_t>(L.n2)) continue;
                  const double* tap = w + (d1 * 3 + d2) * cin * cout;
                  for (std::size_t q = 0; q < L.nq; ++q) {
                    const double* go =
                        g.data() + L.cell(static_cast<std::size_t>(p1), static_cast<std::size_t>(p2), q) * cout;
                    double* gx = gi.data() + L.cell(i1, i2, q) * cin;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                      const double* wr = tap + ci * cout;
                      double acc = 0.0;
                      for (std::size_t co = 0; co < cout; ++co) acc += wr[co] * go[co];
                      gx[ci] += acc;
                    }
                  }
                }
              }
            }
          }
        }
      });
}

Tensor attention_block(const Tensor& tokens, const EmbedderParams& p) {
  const std::size_t K = p.config.channels;
  const std::size_t heads = p.config.heads;
  const std::size_t dh = K / heads;
  if (tokens.rank() != 2 || tokens.extent(1) != K) {
    throw Error(ErrorCode::kShape, "attention_block: expected [tokens, " + std::to_string(K) + "], got " +
                                       shape_str(tokens.shape()));
  }
  const Tensor n1 = add(mul(layer_norm(tokens), p.ln1_gain), p.ln1_bias);
  const Tensor q = matmul(n1, p.query_w);
  const Tensor k = matmul(n1, p.key_w);
  const Tensor v = matmul(n1, p.value_w);
  std::vector<Tensor> head_out;
  head_out.reserve(heads);
  const double temperature = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice(q, 1, h * dh, dh);
    const Tensor kh = slice(k, 1, h * dh, dh);
    const Tensor vh = slice(v, 1, h * dh, dh);
    const Tensor weights = softmax(scale(matmul(qh, transpose(kh)), temperature));
    head_out.push_back(matmul(weights, vh));
  }
  const Tensor attended = add(tokens, add(matmul(concat(head_out, 1), p.out_w), p.out_b));
  const Tensor n2 = add(mul(layer_norm(attended), p.ln2_gain), p.ln2_bias);
  const Tensor hidden = relu(add(matmul(n2, p.ffn1_w), p.ffn1_b));
  return add(attended, add(matmul(hidden, p.ffn2_w), p.ffn2_b));
}

CostFeatureVolume embed(const CostVolume& cost, const EmbedderParams& params, Extent source_extent,
                        Extent target_extent) {
  const auto& c = params.config;
  if (cost.src_rows != c.src_rows || cost.src_cols != c.src_cols || cost.tgt_rows != c.tgt_rows ||
      cost.tgt_cols != c.tgt_cols) {
    std::ostringstream os;
    os << "embed: cost volume " << cost.src_rows << "x" << cost.src_cols << "x" << cost.tgt_rows << "x"
       << cost.tgt_cols << " does not match the embedder resolution " << c.src_rows << "x" << c.src_cols << "x"
       << c.tgt_rows << "x" << c.tgt_cols;
    throw Error(ErrorCode::kShape, os.str());
  }
  const std::size_t S = c.src_rows * c.src_cols;
  const std::size_t T = c.tgt_rows * c.tgt_cols;
  const std::size_t K = c.channels;

  const Tensor raw = Tensor::from_values({c.src_rows, c.src_cols, c.tgt_rows, c.tgt_cols, 1}, cost.values);
  Tensor h = relu(conv_plane(raw, params.conv1_src_w, params.conv1_src_b, ConvPlane::kSource));
  h = relu(conv_plane(h, params.conv1_tgt_w, params.conv1_tgt_b, ConvPlane::kTarget));
  h = relu(conv_plane(h, params.conv2_src_w, params.conv2_src_b, ConvPlane::kSource));
  h = conv_plane(h, params.conv2_tgt_w, params.conv2_tgt_b, ConvPlane::kTarget);
  const Tensor local = add(h, reshape(repeat_axis(reshape(raw, {S * T}), 1, K), h.shape()));

  const Tensor slices = reshape(mean_last(local), {S, T});
  const Tensor tokens = add(matmul(slices, params.token_w), params.token_b);
  const Tensor context = attention_block(tokens, params);
  const Tensor broadcast = reshape(repeat_axis(context, 1, T), local.shape());
  return {add(local, broadcast), source_extent, target_extent};
}

Tensor interpolate(const CostFeatureVolume& volume, const Tensor& points) {
  const Tensor& vol = volume.values;
  if (vol.rank() != 5) throw Error(ErrorCode::kShape, "interpolate: volume must be 5D, got " + shape_str(vol.shape()));
  if (points.rank() != 2 || points.extent(1) != 4) {
    throw Error(ErrorCode::kShape, "interpolate: points must be [B,4], got " + shape_str(points.shape()));
  }
  const std::size_t B = points.extent(0);
  const std::size_t K = vol.extent(4);
  const std::array<std::size_t, 4> counts = {vol.extent(0), vol.extent(1), vol.extent(2), vol.extent(3)};
  const std::array<std::size_t, 4> extents = {volume.source_extent.rows, volume.source_extent.cols,
                                              volume.target_extent.rows, volume.target_extent.cols};
  std::array<std::size_t, 4> strides{};
  strides[3] = K;
  for (int a = 2; a >= 0; --a) strides[a] = strides[a + 1] * counts[a + 1];

  struct AxisSample {
    std::size_t i0, i1;
    double frac;
    double slope;  // d(lattice coord)/d(pixel coord); 0 when clamped
  };
  auto sample_axis = [counts, extents](double pixel, std::size_t a) {
    const std::size_t n = counts[a];
    const std::size_t extent = extents[a];
    AxisSample s{0, 0, 0.0, 0.0};
    if (n <= 1 || extent <= 1) return s;
    const double scale = static_cast<double>(n - 1) / static_cast<double>(extent - 1);
    double g = pixel * scale;
    const double hi = static_cast<double>(n - 1);
    if (g < 0.0 || g > hi) {
      g = std::clamp(g, 0.0, hi);
    } else {
      s.slope = scale;
    }
    s.i0 = std::min(static_cast<std::size_t>(std::floor(g)), n - 2);
    s.i1 = s.i0 + 1;
    s.frac = g - static_cast<double>(s.i0);
    return s;
  };

  const double* pv = vol.values().data();
  const double* pp = points.values().data();
  std::vector<double> out(B * K, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    std::array<AxisSample, 4> ax;
    for (std::size_t a = 0; a < 4; ++a) ax[a] = sample_axis(pp[b * 4 + a], a);
    double* o = out.data() + b * K;
    for (unsigned corner = 0; corner < 16; ++corner) {
      double w = 1.0;
      std::size_t offset = 0;
      for (std::size_t a = 0; a < 4; ++a) {
        const bool upper = (corner >> a) & 1u;
        w *= upper ? ax[a].frac : 1.0 - ax[a].frac;
        offset += (upper ? ax[a].i1 : ax[a].i0) * strides[a];
      }
      if (w == 0.0) continue;
      const double* cellv = pv + offset;
      for (std::size_t k = 0; k < K; ++k) o[k] += w * cellv[k];
    }
  }

  return record_op(
      "interpolate", {B, K}, std::move(out), {vol, points},
      [vol, points, sample_axis, strides, B, K](std::span<const double>, std::span<const double> g) {
        auto gv = grad_sink(vol);
        auto gp = grad_sink(points);
        const double* pv = vol.values().data();
        const double* pp = points.values().data();
        for (std::size_t b = 0; b < B; ++b) {
          std::array<AxisSample, 4> ax;
          for (std::size_t a = 0; a < 4; ++a) ax[a] = sample_axis(pp[b * 4 + a], a);
          const double* go = g.data() + b * K;
          std::array<double, 4> dpoint{};
          for (unsigned corner = 0; corner < 16; ++corner) {
            std::array<double, 4> factor{};
            std::size_t offset = 0;
            for (std::size_t a = 0; a < 4; ++a) {
              const bool upper = (corner >> a) & 1u;
              factor[a] = upper ? ax[a].frac : 1.0 - ax[a].frac;
              offset += (upper ? ax[a].i1 : ax[a].i0) * strides[a];
            }
            const double w = factor[0] * factor[1] * factor[2] * factor[3];
            if (!gv.empty() && w != 0.0) {
              for (std::size_t k = 0; k < K; ++k) gv[offset + k] += w * go[k];
            }
            if (!gp.empty()) {
              double dot = 0.0;
              for (std::size_t k = 0; k < K; ++k) dot += go[k] * pv[offset + k];
              for (std::size_t a = 0; a < 4; ++a) {
                if (ax[a].slope == 0.0) continue;
                double partial = ((corner >> a) & 1u) ? 1.0 : -1.0;
                for (std::size_t o = 0; o < 4; ++o) {
                  if (o != a) partial *= factor[o];
                }
                dpoint[a] += partial * dot;
              }
            }
          }
          if (!gp.empty()) {
            for (std::size_t a = 0; a < 4; ++a) gp[b * 4 + a] += dpoint[a] * ax[a].slope;
          }
        }
      });
}

Tensor pool(const CostFeatureVolume& volume) { return mean_last(volume.values); }

Tensor query_tensor(std::span<const QueryPoint> points, bool requires_grad) {
  std::vector<double> v;
  v.reserve(points.size() * 4);
  for (const auto& p : points) {
    v.push_back(p.source.row);
    v.push_back(p.source.col);
    v.push_back(p.target.row);
    v.push_back(p.target.col);
  }
  return Tensor::from_values({points.size(), 4}, std::move(v), requires_grad);
}

}  // namespace nemf
