#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nemf/cost_embed.hpp"
#include "nemf/error.hpp"
#include "test_support.hpp"

namespace nemf {
namespace {

using testing::gradient_error;
using testing::probe;
using testing::random_values;

// [3, 4, 5, 3, 2] over a 9x7 source and 13x5 target: every lattice node lands on an integer pixel.
CostFeatureVolume random_volume(std::uint64_t seed, bool requires_grad = false) {
  Rng rng(seed);
  const Shape shape{3, 4, 5, 3, 2};
  return {Tensor::from_values(shape, random_values(shape_numel(shape), rng), requires_grad), {9, 7}, {13, 5}};
}

std::array<double, 4> node_pixel(const CostFeatureVolume& v, std::array<double, 4> idx) {
  return {lattice_to_pixel(idx[0], v.src_rows(), v.source_extent.rows),
          lattice_to_pixel(idx[1], v.src_cols(), v.source_extent.cols),
          lattice_to_pixel(idx[2], v.tgt_rows(), v.target_extent.rows),
          lattice_to_pixel(idx[3], v.tgt_cols(), v.target_extent.cols)};
}

std::vector<double> lookup(const CostFeatureVolume& v, const std::array<double, 4>& p) {
  return interpolate(v, Tensor::from_values({1, 4}, {p[0], p[1], p[2], p[3]})).to_vector();
}

std::vector<double> stored(const CostFeatureVolume& v, std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
  const auto vals = v.values.values();
  const std::size_t K = v.channels();
  const std::size_t off = (((a * v.src_cols() + b) * v.tgt_rows() + c) * v.tgt_cols() + d) * K;
  return {vals.begin() + static_cast<std::ptrdiff_t>(off), vals.begin() + static_cast<std::ptrdiff_t>(off + K)};
}

TEST(Interpolate, ExactAtEveryGridPoint) {
  const auto v = random_volume(1);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t c = 0; c < 5; ++c)
        for (std::size_t d = 0; d < 3; ++d) {
          const auto got = lookup(v, node_pixel(v, {double(a), double(b), double(c), double(d)}));
          const auto want = stored(v, a, b, c, d);
          for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(got[k], want[k], 1e-6);
        }
}

TEST(Interpolate, MidpointAveragesNeighborsOnEachAxis) {
  const auto v = random_volume(2);
  for (std::size_t axis = 0; axis < 4; ++axis) {
    std::array<double, 4> idx = {1, 2, 3, 1};
    idx[axis] = 0.5;
    std::array<std::size_t, 4> lo = {1, 2, 3, 1}, hi = lo;
    lo[axis] = 0;
    hi[axis] = 1;
    const auto got = lookup(v, node_pixel(v, idx));
    const auto a = stored(v, lo[0], lo[1], lo[2], lo[3]);
    const auto b = stored(v, hi[0], hi[1], hi[2], hi[3]);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(got[k], 0.5 * (a[k] + b[k]), 1e-6) << "axis " << axis;
  }
}

TEST(Interpolate, AffineAlongOneAxisWithinACell) {
  const auto v = random_volume(3);
  const std::array<double, 4> base = {2.3, 3.1, 5.5, 1.2};
  auto at = [&](double t) {
    auto p = base;
    p[2] += t;
    return lookup(v, p);
  };
  // pixels 5.5 .. 5.9 stay inside target-row cell [3, 6]
  const auto f0 = at(0.0), f1 = at(0.2), f2 = at(0.4);
  for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(f1[k], 0.5 * (f0[k] + f2[k]), 1e-12);
}

TEST(Interpolate, ClampsOutOfRangeAndZeroesThatGradient) {
  const auto v = random_volume(4);
  const auto inside = lookup(v, {8.0, 6.0, 12.0, 4.0});
  const auto outside = lookup(v, {20.0, 6.0, 12.0, 4.0});
  EXPECT_EQ(inside, outside);

  const Tensor p = Tensor::from_values({1, 4}, {-3.0, 2.5, 7.0, 30.0}, true);
  backward(probe(interpolate(v, p)));
  const auto g = p.grad();
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[3], 0.0);
  EXPECT_NE(g[1], 0.0);
  EXPECT_NE(g[2], 0.0);
}

TEST(Interpolate, PointGradientMatchesFiniteDifferences) {
  const auto v = random_volume(5);
  Rng rng(6);
  std::vector<double> pts;
  for (int i = 0; i < 100; ++i) {
    pts.push_back(rng.uniform(0.1, 7.9));
    pts.push_back(rng.uniform(0.1, 5.9));
    pts.push_back(rng.uniform(0.1, 11.9));
    pts.push_back(rng.uniform(0.1, 3.9));
  }
  const double err = gradient_error([&](const Tensor& x) { return probe(interpolate(v, x)); }, {100, 4}, pts, 1e-5);
  EXPECT_LT(err, 1e-4);
}

TEST(Interpolate, VolumeGradientMatchesFiniteDifferences) {
  const auto v0 = random_volume(7);
  const Tensor pts = Tensor::from_values({5, 4}, {0.5, 1.0, 2.0, 3.5, 7.7, 5.2, 11.0, 0.3, 4.0, 2.0, 6.0, 2.0,
                                                  1.1, 3.3, 9.9, 1.7, 8.0, 6.0, 12.0, 4.0});
  const double err = gradient_error(
      [&](const Tensor& x) { return probe(interpolate({x, v0.source_extent, v0.target_extent}, pts)); },
      v0.values.shape(), v0.values.to_vector());
  EXPECT_LT(err, 1e-6);
}

TEST(Interpolate, RejectsBadShapes) {
  const auto v = random_volume(9);
  EXPECT_THROW(interpolate(v, Tensor::zeros({2, 3})), Error);
  CostFeatureVolume flat{Tensor::zeros({2, 2, 2, 2}), {4, 4}, {4, 4}};
  EXPECT_THROW(interpolate(flat, Tensor::zeros({1, 4})), Error);
}

TEST(Pool, IdenticalChannelsReturnThatChannel) {
  std::vector<double> vals;
  Rng rng(10);
  for (int i = 0; i < 16; ++i) {
    const double x = rng.uniform(-1, 1);
    for (int k = 0; k < 3; ++k) vals.push_back(x);
  }
  const CostFeatureVolume v{Tensor::from_values({2, 2, 2, 2, 3}, vals), {4, 4}, {4, 4}};
  const auto p = pool(v).to_vector();
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(p[i], vals[3 * i], 1e-15);
}

TEST(Pool, ZeroAndTwoAverageToOne) {
  std::vector<double> vals;
  for (int i = 0; i < 16; ++i) {
    vals.push_back(0.0);
    vals.push_back(2.0);
  }
  const CostFeatureVolume v{Tensor::from_values({2, 2, 2, 2, 2}, vals), {4, 4}, {4, 4}};
  for (double x : pool(v).to_vector()) EXPECT_EQ(x, 1.0);
}

TEST(Pool, MatchesScalarLoopOracle) {
  const auto v = random_volume(11);
  const Tensor p = pool(v);
  EXPECT_EQ(p.shape(), Shape({3, 4, 5, 3}));
  const auto vals = v.values.values();
  for (std::size_t i = 0; i < p.numel(); ++i) {
    EXPECT_NEAR(p.values()[i], (vals[2 * i] + vals[2 * i + 1]) / 2.0, 1e-6);
  }
}

// Direct 3x3 zero-padded convolution over the chosen plane.
std::vector<double> naive_conv(const Tensor& in, const Tensor& w, const Tensor& b, ConvPlane plane) {
  const auto& s = in.shape();
  const std::size_t S1 = s[0], S2 = s[1], T1 = s[2], T2 = s[3], cin = s[4], cout = w.extent(3);
  const auto x = in.values();
  const auto wv = w.values();
  auto at = [&](std::ptrdiff_t a, std::ptrdiff_t bb, std::ptrdiff_t c, std::ptrdiff_t d, std::size_t ch) {
    if (a < 0 || bb < 0 || c < 0 || d < 0 || a >= std::ptrdiff_t(S1) || bb >= std::ptrdiff_t(S2) ||
        c >= std::ptrdiff_t(T1) || d >= std::ptrdiff_t(T2))
      return 0.0;
    return x[(((std::size_t(a) * S2 + std::size_t(bb)) * T1 + std::size_t(c)) * T2 + std::size_t(d)) * cin + ch];
  };
  std::vector<double> out(S1 * S2 * T1 * T2 * cout);
  for (std::size_t a = 0; a < S1; ++a)
    for (std::size_t bb = 0; bb < S2; ++bb)
      for (std::size_t c = 0; c < T1; ++c)
        for (std::size_t d = 0; d < T2; ++d)
          for (std::size_t co = 0; co < cout; ++co) {
            double acc = b.values()[co];
            for (int d1 = -1; d1 <= 1; ++d1)
              for (int d2 = -1; d2 <= 1; ++d2)
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  const double wt = wv[((std::size_t(d1 + 1) * 3 + std::size_t(d2 + 1)) * cin + ci) * cout + co];
                  acc += wt * (plane == ConvPlane::kSource ? at(std::ptrdiff_t(a) + d1, std::ptrdiff_t(bb) + d2,
                                                               std::ptrdiff_t(c), std::ptrdiff_t(d), ci)
                                                           : at(std::ptrdiff_t(a), std::ptrdiff_t(bb),
                                                               std::ptrdiff_t(c) + d1, std::ptrdiff_t(d) + d2, ci));
                }
            out[(((a * S2 + bb) * T1 + c) * T2 + d) * cout + co] = acc;
          }
  return out;
}

TEST(ConvPlane, MatchesNaiveOracleOnBothPlanes) {
  Rng rng(12);
  const Tensor in = Tensor::from_values({3, 4, 4, 2, 2}, random_values(3 * 4 * 4 * 2 * 2, rng));
  const Tensor w = Tensor::from_values({3, 3, 2, 3}, random_values(54, rng));
  const Tensor b = Tensor::from_values({3}, random_values(3, rng));
  for (ConvPlane plane : {ConvPlane::kSource, ConvPlane::kTarget}) {
    const auto got = conv_plane(in, w, b, plane).to_vector();
    const auto want = naive_conv(in, w, b, plane);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
  EXPECT_THROW(conv_plane(in, Tensor::zeros({3, 3, 1, 3}), b, ConvPlane::kSource), Error);
}

TEST(ConvPlane, GradientsMatchFiniteDifferences) {
  Rng rng(13);
  const Shape in_shape{3, 3, 2, 3, 2};
  const auto in0 = random_values(shape_numel(in_shape), rng);
  const auto w0 = random_values(3 * 3 * 2 * 2, rng);
  const Tensor b = Tensor::from_values({2}, {0.1, -0.2});
  // Linear in each argument, so a wide step is exact and avoids roundoff.
  const double h = 1e-3;
  for (ConvPlane plane : {ConvPlane::kSource, ConvPlane::kTarget}) {
    const Tensor in = Tensor::from_values(in_shape, in0);
    const Tensor w = Tensor::from_values({3, 3, 2, 2}, w0);
    EXPECT_LT(gradient_error([&](const Tensor& x) { return probe(conv_plane(x, w, b, plane)); }, in_shape, in0, h), 1e-6);
    EXPECT_LT(gradient_error([&](const Tensor& x) { return probe(conv_plane(in, x, b, plane)); }, {3, 3, 2, 2}, w0, h),
              1e-6);
    EXPECT_LT(gradient_error([&](const Tensor& x) { return probe(conv_plane(in, w, x, plane)); }, {2}, {0.1, -0.2}, h),
              1e-6);
  }
}

EmbedderConfig small_config() {
  EmbedderConfig c;
  c.src_rows = 3;
  c.src_cols = 3;
  c.tgt_rows = 3;
  c.tgt_cols = 4;
  c.channels = 4;
  c.conv_channels = 3;
  c.heads = 2;
  c.ffn_hidden = 5;
  return c;
}

CostVolume random_cost(const EmbedderConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  CostVolume cv{c.src_rows, c.src_cols, c.tgt_rows, c.tgt_cols, {}};
  cv.values = random_values(c.src_rows * c.src_cols * c.tgt_rows * c.tgt_cols, rng);
  return cv;
}

TEST(Embedder, ParameterLayoutIsConsistent) {
  const auto cfg = small_config();
  const auto p = EmbedderParams::initialize(cfg, 1);
  const auto params = p.parameters();
  const auto layout = EmbedderParams::layout(cfg);
  ASSERT_EQ(params.size(), layout.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_EQ(params[i].name, layout[i].first);
    EXPECT_EQ(params[i].tensor.shape(), layout[i].second) << params[i].name;
    EXPECT_TRUE(params[i].tensor.requires_grad());
    total += shape_numel(layout[i].second);
  }
  EXPECT_EQ(p.parameter_count(), total);
  EXPECT_EQ(EmbedderParams::initialize(cfg, 1).parameter_count(), total);
  auto bad = cfg;
  bad.heads = 3;
  EXPECT_THROW(EmbedderParams::initialize(bad, 1), Error);
}

TEST(Embedder, DeterministicAndFinite) {
  const auto cfg = small_config();
  const auto p = EmbedderParams::initialize(cfg, 2);
  const auto cost = random_cost(cfg, 3);
  const auto a = embed(cost, p, {16, 16}, {16, 20});
  const auto b = embed(cost, p, {16, 16}, {16, 20});
  EXPECT_EQ(a.values.shape(), Shape({3, 3, 3, 4, 4}));
  EXPECT_EQ(a.values.to_vector(), b.values.to_vector());
  EXPECT_EQ(a.target_extent, (Extent{16, 20}));

  CostVolume zero = cost;
  std::fill(zero.values.begin(), zero.values.end(), 0.0);
  auto zero_bias = p;
  for (Tensor* t : {&zero_bias.conv1_src_b, &zero_bias.conv1_tgt_b, &zero_bias.conv2_src_b, &zero_bias.conv2_tgt_b,
                    &zero_bias.token_b, &zero_bias.out_b, &zero_bias.ffn1_b, &zero_bias.ffn2_b}) {
    *t = Tensor::zeros(t->shape());
  }
  const auto z1 = embed(zero, zero_bias, {16, 16}, {16, 16}).values.to_vector();
  const auto z2 = embed(zero, zero_bias, {16, 16}, {16, 16}).values.to_vector();
  EXPECT_EQ(z1, z2);
  for (double x : z1) EXPECT_TRUE(std::isfinite(x));
}

TEST(Embedder, RejectsResolutionMismatch) {
  const auto cfg = small_config();
  const auto p = EmbedderParams::initialize(cfg, 2);
  CostVolume cv = random_cost(cfg, 3);
  cv.tgt_cols = 3;
  cv.values.resize(3 * 3 * 3 * 3);
  EXPECT_THROW(embed(cv, p, {16, 16}, {16, 16}), Error);
}

TEST(Embedder, KernelGradientsMatchFiniteDifferences) {
  const auto cfg = small_config();
  const auto base = EmbedderParams::initialize(cfg, 4);
  const auto cost = random_cost(cfg, 5);
  // Every parameter, each through mean(embed(C)).
  const auto names = base.parameters();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Tensor& t0 = names[i].tensor;
    auto f = [&](const Tensor& x) {
      EmbedderParams p = base.frozen();
      // parameters() hands out shared handles, so swap the member itself
      std::array<Tensor*, 23> slots = {&p.conv1_src_w, &p.conv1_src_b, &p.conv1_tgt_w, &p.conv1_tgt_b,
                                       &p.conv2_src_w, &p.conv2_src_b, &p.conv2_tgt_w, &p.conv2_tgt_b,
                                       &p.token_w,     &p.token_b,     &p.ln1_gain,    &p.ln1_bias,
                                       &p.query_w,     &p.key_w,       &p.value_w,     &p.out_w,
                                       &p.out_b,       &p.ln2_gain,    &p.ln2_bias,    &p.ffn1_w,
                                       &p.ffn1_b,      &p.ffn2_w,      &p.ffn2_b};
      *slots[i] = x;
      return probe(embed(cost, p, {16, 16}, {16, 16}).values);
    };
    EXPECT_LT(gradient_error(f, t0.shape(), t0.to_vector(), 1e-6, 1e-6), 1e-4) << names[i].name;
  }
}

TEST(Embedder, AttentionIsPermutationEquivariant) {
  const auto cfg = small_config();
  const auto p = EmbedderParams::initialize(cfg, 6);
  Rng rng(7);
  const std::size_t n = 7, K = cfg.channels;
  const auto x = random_values(n * K, rng);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  std::vector<double> xp(n * K);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(x.begin() + perm[i] * K, K, xp.begin() + i * K);
  const auto y = attention_block(Tensor::from_values({n, K}, x), p).to_vector();
  const auto yp = attention_block(Tensor::from_values({n, K}, xp), p).to_vector();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < K; ++k) EXPECT_NEAR(yp[i * K + k], y[perm[i] * K + k], 1e-12);
}

}  // namespace
}  // namespace nemf
