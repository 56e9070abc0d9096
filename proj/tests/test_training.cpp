#include <gtest/gtest.h>

#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <fstream>
#include <limits>

#include "nemf/error.hpp"
#include "nemf/eval_data.hpp"
#include "nemf/training.hpp"
#include "test_support.hpp"

namespace nemf {
namespace {

using testing::random_values;
using testing::temp_dir;

PairAnnotation simple_annotation(std::size_t keypoints = 3) {
  PairAnnotation a;
  a.source = "synthetic:a";
  a.target = "synthetic:b";
  a.source_extent = {20, 24};
  a.target_extent = {18, 30};
  for (std::size_t i = 0; i < keypoints; ++i) {
    a.keypoints.push_back({{1.0 + double(i), 2.0 + double(i)}, {3.0 + double(i), 4.0}});
  }
  a.bbox = {0, 0, 30, 18};
  return a;
}

TEST(LossConfig, ValidationRejectsBadValues) {
  LossConfig c;
  EXPECT_NO_THROW(validate(c));
  auto expect_config_error = [](LossConfig bad) {
    try {
      validate(bad);
      ADD_FAILURE() << "accepted";
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kConfig);
    }
  };
  LossConfig s = c;
  s.samples = 1;
  expect_config_error(s);
  LossConfig t = c;
  t.tau = 0.0;
  expect_config_error(t);
  LossConfig l = c;
  l.lambda_c = -1.0;
  expect_config_error(l);
}

TEST(SampleBatch, DeterministicForAFixedSeed) {
  const auto a = simple_annotation();
  LossConfig cfg;
  Rng r1(5), r2(5);
  const auto b1 = sample_batch(a, cfg, r1);
  const auto b2 = sample_batch(a, cfg, r2);
  ASSERT_EQ(b1.size(), b2.size());
  for (std::size_t i = 0; i < b1.size(); ++i) {
    for (std::size_t k = 0; k < cfg.samples; ++k) {
      EXPECT_EQ(b1[i].candidates[k].source, b2[i].candidates[k].source);
      EXPECT_EQ(b1[i].candidates[k].target, b2[i].candidates[k].target);
    }
  }
}

TEST(SampleBatch, StructureAndBounds) {
  const auto a = simple_annotation(4);
  LossConfig cfg;
  cfg.samples = 2;
  Rng rng(6);
  const auto batch = sample_batch(a, cfg, rng);
  ASSERT_EQ(batch.size(), 8u);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch[i];
    ASSERT_EQ(s.candidates.size(), 2u);
    EXPECT_EQ(s.mirrored, i % 2 == 1);
    const auto labels = s.labels();
    EXPECT_EQ(labels[s.gt_index], 1.0);
    EXPECT_EQ(std::count(labels.begin(), labels.end(), 1.0), 1);
    const auto& kp = a.keypoints[i / 2];
    EXPECT_EQ(s.candidates[s.gt_index].source, kp.source);
    EXPECT_EQ(s.candidates[s.gt_index].target, kp.target);
    const auto& neg = s.candidates[1 - s.gt_index];
    if (s.mirrored) {
      EXPECT_EQ(neg.target, kp.target);
    } else {
      EXPECT_EQ(neg.source, kp.source);
    }
  }
  cfg.bidirectional = false;
  EXPECT_EQ(sample_batch(a, cfg, rng).size(), 4u);
  EXPECT_THROW(sample_batch(simple_annotation(0), cfg, rng), Error);
}

// Pearson chi-square over equal-width bins; returns the upper-tail p-value.
double uniformity_p_value(const std::vector<double>& draws, double lo, double hi, std::size_t bins) {
  std::vector<double> counts(bins, 0.0);
  for (double v : draws) {
    EXPECT_GE(v, lo);
    EXPECT_LE(v, hi);
    const auto b = std::min(bins - 1, static_cast<std::size_t>((v - lo) / (hi - lo) * double(bins)));
    counts[b] += 1.0;
  }
  const double expected = double(draws.size()) / double(bins);
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  return boost::math::gamma_q(0.5 * double(bins - 1), 0.5 * chi2);
}

TEST(SampleBatch, NegativesAreUniformPerAxis) {
  auto a = simple_annotation(1);
  LossConfig cfg;
  cfg.samples = 100'001;
  Rng rng(7);
  const auto batch = sample_batch(a, cfg, rng);
  ASSERT_EQ(batch.size(), 2u);
  std::vector<double> tr, tc, sr, sc;
  for (std::size_t k = 1; k < cfg.samples; ++k) {
    tr.push_back(batch[0].candidates[k].target.row);
    tc.push_back(batch[0].candidates[k].target.col);
    sr.push_back(batch[1].candidates[k].source.row);
    sc.push_back(batch[1].candidates[k].source.col);
  }
  EXPECT_GT(uniformity_p_value(tr, 0.0, 17.0, 20), 0.01);
  EXPECT_GT(uniformity_p_value(tc, 0.0, 29.0, 20), 0.01);
  EXPECT_GT(uniformity_p_value(sr, 0.0, 19.0, 20), 0.01);
  EXPECT_GT(uniformity_p_value(sc, 0.0, 23.0, 20), 0.01);
}

FieldConfig small_field() {
  FieldConfig c;
  c.channels = 4;
  c.hidden = 16;
  return c;
}

CostFeatureVolume random_volume(std::uint64_t seed, Extent src, Extent tgt) {
  Rng rng(seed);
  const Shape s{4, 4, 4, 4, 4};
  return {Tensor::from_values(s, random_values(shape_numel(s), rng)), src, tgt};
}

TEST(ClassificationLoss, UniformScoresGiveLogS) {
  auto m = FieldModel::initialize(small_field(), 1);
  m.head_w = Tensor::zeros(m.head_w.shape());
  const auto a = simple_annotation(5);
  const auto v = random_volume(2, a.source_extent, a.target_extent);
  for (std::size_t S : {2u, 5u, 50u}) {
    LossConfig cfg;
    cfg.samples = S;
    Rng rng(3);
    const auto batch = sample_batch(a, cfg, rng);
    EXPECT_NEAR(classification_loss(m, v, batch, cfg).item(), std::log(double(S)), 1e-6);
  }
  LossConfig literal;
  literal.form = ClassificationForm::kLiteral;
  Rng rng(4);
  const auto batch = sample_batch(a, literal, rng);
  EXPECT_NEAR(classification_loss(m, v, batch, literal).item(), std::log(2.0), 1e-12);
}

TEST(ClassificationLoss, MatchesScalarSoftmaxOracle) {
  const auto m = FieldModel::initialize(small_field(), 5);
  const auto a = simple_annotation(3);
  const auto v = random_volume(6, a.source_extent, a.target_extent);
  LossConfig cfg;
  cfg.samples = 5;
  Rng rng(7);
  const auto batch = sample_batch(a, cfg, rng);
  double oracle = 0.0;
  for (const auto& s : batch) {
    std::vector<double> z;
    for (const auto& q : s.candidates) {
      const QueryPoint one[1] = {q};
      const Tensor score = evaluate(m, v, query_tensor(one)).scores;
      const double p = score.item();
      z.push_back(std::log(p / (1.0 - p)) / cfg.tau);
    }
    double mx = z[0];
    for (double x : z) mx = std::max(mx, x);
    double norm = 0.0;
    for (double x : z) norm += std::exp(x - mx);
    oracle += -(z[s.gt_index] - mx - std::log(norm));
  }
  oracle /= double(batch.size());
  const double got = classification_loss(m, v, batch, cfg).item();
  EXPECT_NEAR(got, oracle, 1e-6);
  EXPECT_GE(got, 0.0);
}

TEST(SoftArgmax, OneHotReturnsTheHotCoordinate) {
  for (std::size_t hot = 0; hot < 12; ++hot) {
    std::vector<double> slice(12, 0.0);
    slice[hot] = 1.0;
    const auto out = soft_argmax(Tensor::from_values({1, 12}, slice), 3, 4, 0.02).to_vector();
    EXPECT_NEAR(out[0], double(hot / 4), 1e-12);
    EXPECT_NEAR(out[1], double(hot % 4), 1e-12);
  }
}

TEST(SoftArgmax, UniformSliceReturnsCentroid) {
  const auto out = soft_argmax(Tensor::full({2, 15}, 0.37), 3, 5, 0.02).to_vector();
  EXPECT_NEAR(out[0], 1.0, 1e-12);
  EXPECT_NEAR(out[1], 2.0, 1e-12);
  EXPECT_NEAR(out[2], 1.0, 1e-12);
  EXPECT_NEAR(out[3], 2.0, 1e-12);
  EXPECT_THROW(soft_argmax(Tensor::full({1, 14}, 0.0), 3, 5, 0.02), Error);
}

// 3x3 source cells over a 9x9 image (pixels 0, 4, 8), 4x4 target cells over 13x13 (0, 4, 8, 12).
PairAnnotation epe_annotation() {
  PairAnnotation a;
  a.source_extent = {9, 9};
  a.target_extent = {13, 13};
  a.keypoints = {{{4.0, 8.0}, {8.0, 4.0}}, {{0.4, 0.0}, {12.0, 12.0}}};
  return a;
}

TEST(EpeLoss, ZeroWhenPredictionEqualsTruth) {
  const auto a = epe_annotation();
  std::vector<double> pooled(9 * 16, 0.0);
  pooled[(1 * 3 + 2) * 16 + 2 * 4 + 1] = 1.0;  // cell (1,2) -> (2,1)
  pooled[(0 * 3 + 0) * 16 + 3 * 4 + 3] = 1.0;  // cell (0,0) -> (3,3)
  const double loss = epe_loss(Tensor::from_values({3, 3, 4, 4}, pooled), a.source_extent, a.target_extent, a, 0.02)
                          .item();
  EXPECT_NEAR(loss, 0.0, 1e-12);
}

TEST(EpeLoss, MatchesScalarOracleAndIgnoresSliceShift) {
  const auto a = epe_annotation();
  Rng rng(8);
  auto pooled = random_values(9 * 16, rng);
  const double temp = 0.3;
  const double got =
      epe_loss(Tensor::from_values({3, 3, 4, 4}, pooled), a.source_extent, a.target_extent, a, temp).item();

  const std::size_t cells[2] = {1 * 3 + 2, 0};
  const double truth[2][2] = {{2.0, 1.0}, {3.0, 3.0}};
  double oracle = 0.0;
  for (int k = 0; k < 2; ++k) {
    const double* s = pooled.data() + cells[k] * 16;
    double mx = s[0];
    for (int t = 0; t < 16; ++t) mx = std::max(mx, s[t]);
    double z = 0, er = 0, ec = 0;
    for (int t = 0; t < 16; ++t) {
      const double w = std::exp((s[t] - mx) / temp);
      z += w;
      er += w * double(t / 4);
      ec += w * double(t % 4);
    }
    oracle += std::hypot(er / z - truth[k][0], ec / z - truth[k][1]);
  }
  EXPECT_NEAR(got, oracle / 2.0, 1e-12);

  for (std::size_t t = 0; t < 16; ++t) pooled[cells[0] * 16 + t] += 0.75;
  const double shifted =
      epe_loss(Tensor::from_values({3, 3, 4, 4}, pooled), a.source_extent, a.target_extent, a, temp).item();
  EXPECT_NEAR(shifted, got, 1e-12);
}

TEST(AdamW, ZeroLearningRateLeavesParametersUnchanged) {
  const Tensor x = Tensor::from_values({3}, {0.5, -1.25, 2.0}, true);
  const auto before = x.to_vector();
  AdamW::Options o;
  o.learning_rate = 0.0;
  AdamW opt({x}, o);
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    backward(sum(mul(x, x)));
    opt.step();
  }
  EXPECT_EQ(x.to_vector(), before);
}

TEST(AdamW, MatchesReferenceUpdate) {
  const Tensor x = Tensor::from_values({2}, {0.7, -0.3}, true);
  AdamW::Options o;
  o.learning_rate = 0.05;
  o.weight_decay = 0.1;
  o.round_to_float32 = false;
  AdamW opt({x}, o);
  double theta[2] = {0.7, -0.3}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 4; ++t) {
    opt.zero_grad();
    backward(sum(mul(mul(x, x), x)));  // grad 3 x^2
    opt.step();
    for (int j = 0; j < 2; ++j) {
      const double g = 3.0 * theta[j] * theta[j];
      m[j] = 0.9 * m[j] + 0.1 * g;
      v[j] = 0.999 * v[j] + 0.001 * g * g;
      const double mhat = m[j] / (1.0 - std::pow(0.9, t));
      const double vhat = v[j] / (1.0 - std::pow(0.999, t));
      theta[j] = theta[j] - 0.05 * 0.1 * theta[j] - 0.05 * mhat / (std::sqrt(vhat) + 1e-8);
    }
    EXPECT_NEAR(x.values()[0], theta[0], 1e-14);
    EXPECT_NEAR(x.values()[1], theta[1], 1e-14);
  }
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.field = small_field();
  c.field.blocks = 2;
  c.embedder.src_rows = c.embedder.src_cols = c.embedder.tgt_rows = c.embedder.tgt_cols = 4;
  c.embedder.channels = 4;
  c.embedder.conv_channels = 2;
  c.embedder.heads = 2;
  c.embedder.ffn_hidden = 6;
  c.extractor.grid_rows = c.extractor.grid_cols = 4;
  return c;
}

std::vector<TrainingPair> tiny_pairs(const ModelConfig& mc) {
  SyntheticConfig sc;
  sc.rows = sc.cols = 16;
  sc.keypoints = 4;
  std::vector<TrainingPair> out;
  for (const auto& p : generate_synthetic(2, WarpFamily::kTranslation, 9, sc)) {
    out.push_back(prepare_pair(p.images, p.annotation, mc.extractor, mc.embedder));
  }
  return out;
}

bool same_parameters(const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].tensor.to_vector() != b[i].tensor.to_vector()) return false;
  }
  return true;
}

TEST(Train, ZeroStepsReturnsInitialization) {
  const auto mc = tiny_model();
  LossConfig cfg;
  cfg.seed = 11;
  const auto r = train({}, mc, cfg);
  EXPECT_TRUE(r.trace.empty());
  EXPECT_TRUE(same_parameters(r.field.parameters(),
                              FieldModel::initialize(mc.field, derive_seed(11, 1)).parameters()));
  EXPECT_TRUE(same_parameters(r.embedder.parameters(),
                              EmbedderParams::initialize(mc.embedder, derive_seed(11, 2)).parameters()));
}

TEST(Train, FixedSeedIsBitwiseReproducible) {
  const auto mc = tiny_model();
  const auto pairs = tiny_pairs(mc);
  LossConfig cfg;
  cfg.steps = 5;
  cfg.samples = 8;
  cfg.learning_rate = 1e-3;
  const auto a = train(pairs, mc, cfg);
  const auto b = train(pairs, mc, cfg);
  ASSERT_EQ(a.trace.size(), 5u);
  EXPECT_TRUE(same_parameters(a.field.parameters(), b.field.parameters()));
  EXPECT_TRUE(same_parameters(a.embedder.parameters(), b.embedder.parameters()));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a.trace[i].total, b.trace[i].total);
  // and parameters actually moved
  EXPECT_FALSE(same_parameters(a.field.parameters(),
                               FieldModel::initialize(mc.field, derive_seed(1, 1)).parameters()));
  for (const auto& r : a.trace) {
    EXPECT_NEAR(r.total, cfg.lambda_f * r.classification + cfg.lambda_c * r.epe, 1e-12);
  }
}

TEST(Train, NonFiniteLossNamesTheTerm) {
  const auto mc = tiny_model();
  auto pairs = tiny_pairs(mc);
  pairs[0].cost.values[5] = std::numeric_limits<double>::quiet_NaN();
  pairs[1].cost.values[5] = std::numeric_limits<double>::quiet_NaN();
  LossConfig cfg;
  cfg.steps = 3;
  cfg.samples = 4;
  try {
    train(pairs, mc, cfg);
    ADD_FAILURE() << "training accepted a NaN cost volume";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNumerical);
    EXPECT_NE(std::string(e.what()).find("step 0: L_f is non-finite"), std::string::npos) << e.what();
  }

  auto clean = tiny_pairs(mc);
  LossConfig sharp = cfg;
  sharp.tau_softargmax = 1e-310;
  try {
    train(clean, mc, sharp);
    ADD_FAILURE() << "training accepted an overflowing soft-argmax";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNumerical);
    EXPECT_NE(std::string(e.what()).find("L_c"), std::string::npos) << e.what();
  }
}

TEST(Train, WritesCheckpointsAndLossCsv) {
  const auto mc = tiny_model();
  const auto pairs = tiny_pairs(mc);
  const auto dir = temp_dir("train");
  LossConfig cfg;
  cfg.steps = 4;
  cfg.samples = 4;
  cfg.checkpoint_every = 2;
  cfg.checkpoint_path = dir / "ckpt.nmfw";
  const auto r = train(pairs, mc, cfg);
  ASSERT_TRUE(std::filesystem::exists(cfg.checkpoint_path));
  const auto loaded = load_model(cfg.checkpoint_path);
  EXPECT_TRUE(same_parameters(loaded.field.parameters(), r.field.parameters()));

  write_loss_csv(dir / "loss.csv", r.trace);
  std::ifstream in(dir / "loss.csv");
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header, "step,L_f,L_c,L_total");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 4u);
}

TEST(Train, EvaluateLossesDoesNotTouchParameters) {
  const auto mc = tiny_model();
  const auto pairs = tiny_pairs(mc);
  const auto field = FieldModel::initialize(mc.field, 3);
  const auto embedder = EmbedderParams::initialize(mc.embedder, 4);
  LossConfig cfg;
  cfg.samples = 6;
  const auto a = evaluate_losses(pairs, field, embedder, cfg, 12);
  const auto b = evaluate_losses(pairs, field, embedder, cfg, 12);
  EXPECT_EQ(a.total, b.total);
  EXPECT_TRUE(std::isfinite(a.total));
  EXPECT_GE(a.classification, 0.0);
  EXPECT_GE(a.epe, 0.0);
}

}  // namespace
}  // namespace nemf
