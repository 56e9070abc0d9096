#include "nemf/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "nemf/error.hpp"

namespace nemf {

namespace {

double clamp_to_extent(double v, std::size_t extent) {
  return std::clamp(v, 0.0, static_cast<double>(extent) - 1.0);
}

Point2 uniform_point(Extent e, Rng& rng) {
  return {rng.uniform(0.0, static_cast<double>(e.rows - 1)), rng.uniform(0.0, static_cast<double>(e.cols - 1))};
}

std::size_t nearest_cell(double pixel, std::size_t count, std::size_t extent) {
  const double g = std::round(pixel_to_lattice(clamp_to_extent(pixel, extent), count, extent));
  return std::min(static_cast<std::size_t>(std::max(g, 0.0)), count - 1);
}

void require_finite(const Tensor& t, const char* term, std::size_t step) {
  if (!std::isfinite(t.item())) {
    std::ostringstream os;
    os << "training step " << step << ": " << term << " is non-finite (" << t.item() << ")";
    throw Error(ErrorCode::kNumerical, os.str());
  }
}

std::vector<Tensor> trainable(const FieldModel& field, const EmbedderParams& embedder) {
  std::vector<Tensor> out;
  for (const auto& p : field.parameters()) out.push_back(p.tensor);
  for (const auto& p : embedder.parameters()) out.push_back(p.tensor);
  return out;
}

struct StepLosses {
  Tensor classification, epe, total;
};

StepLosses pair_losses(const TrainingPair& pair, const FieldModel& field, const EmbedderParams& embedder,
                       const LossConfig& config, Rng& rng) {
  const auto& a = pair.annotation;
  const CostFeatureVolume volume = embed(pair.cost, embedder, a.source_extent, a.target_extent);
  const auto samples = sample_batch(a, config, rng);
  StepLosses out;
  out.classification = classification_loss(field, volume, samples, config);
  out.epe = epe_loss(pool(volume), a.source_extent, a.target_extent, a, config.tau_softargmax);
  out.total = add(scale(out.classification, config.lambda_f), scale(out.epe, config.lambda_c));
  return out;
}

}  // namespace

void validate(const LossConfig& c) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kConfig, msg); };
  if (c.samples < 2) fail("samples must be at least 2 (ground truth plus one negative)");
  if (!(c.tau > 0.0)) fail("tau must be positive");
  if (!(c.tau_softargmax > 0.0)) fail("tau_softargmax must be positive");
  if (!(c.learning_rate >= 0.0)) fail("learning_rate must be non-negative");
  if (!(c.weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(c.lambda_f >= 0.0) || !(c.lambda_c >= 0.0)) fail("loss weights must be non-negative");
}

std::vector<double> TrainingSample::labels() const {
  std::vector<double> out(candidates.size(), 0.0);
  out[gt_index] = 1.0;
  return out;
}

std::vector<TrainingSample> sample_batch(const PairAnnotation& annotation, const LossConfig& config, Rng& rng) {
  const Extent src = annotation.source_extent;
  const Extent tgt = annotation.target_extent;
  if (src.rows == 0 || src.cols == 0 || tgt.rows == 0 || tgt.cols == 0) {
    throw Error(ErrorCode::kInvalidArgument, "sample_batch: annotation lacks image extents");
  }
  if (annotation.keypoints.empty()) throw Error(ErrorCode::kInvalidArgument, "sample_batch: annotation has no keypoints");
  std::vector<TrainingSample> out;
  out.reserve(annotation.keypoints.size() * (config.bidirectional ? 2 : 1));
  for (const auto& kp : annotation.keypoints) {
    TrainingSample s;
    s.candidates.reserve(config.samples);
    s.candidates.push_back({kp.source, kp.target});
    for (std::size_t k = 1; k < config.samples; ++k) s.candidates.push_back({kp.source, uniform_point(tgt, rng)});
    out.push_back(std::move(s));
    if (!config.bidirectional) continue;
    TrainingSample m;
    m.mirrored = true;
    m.candidates.reserve(config.samples);
    m.candidates.push_back({kp.source, kp.target});
    for (std::size_t k = 1; k < config.samples; ++k) m.candidates.push_back({uniform_point(src, rng), kp.target});
    out.push_back(std::move(m));
  }
  return out;
}

Tensor classification_loss(const FieldModel& model, const CostFeatureVolume& volume,
                           std::span<const TrainingSample> samples, const LossConfig& config) {
  if (samples.empty()) return Tensor::scalar(0.0);
  const std::size_t S = samples.front().candidates.size();
  std::vector<QueryPoint> points;
  points.reserve(samples.size() * S);
  std::vector<std::size_t> gt;
  gt.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].candidates.size() != S) {
      throw Error(ErrorCode::kShape, "classification_loss: samples must share one candidate count");
    }
    points.insert(points.end(), samples[i].candidates.begin(), samples[i].candidates.end());
    gt.push_back(i * S + samples[i].gt_index);
  }
  const FieldOutput out = evaluate(model, volume, query_tensor(points));
  if (config.form == ClassificationForm::kLiteral) {
    return scale(mean(gather(log(out.scores), gt)), -1.0);
  }
  const Tensor logits = scale(reshape(out.logits, {samples.size(), S}), 1.0 / config.tau);
  return scale(mean(gather(log_softmax(logits), gt)), -1.0);
}

Tensor soft_argmax(const Tensor& slices, std::size_t rows, std::size_t cols, double temperature) {
  if (slices.rank() != 2 || slices.extent(1) != rows * cols) {
    throw Error(ErrorCode::kShape, "soft_argmax: expected [n, " + std::to_string(rows * cols) + "], got " +
                                       shape_str(slices.shape()));
  }
  std::vector<double> coords;
  coords.reserve(rows * cols * 2);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      coords.push_back(static_cast<double>(r));
      coords.push_back(static_cast<double>(c));
    }
  }
  const Tensor weights = softmax(scale(slices, 1.0 / temperature));
  return matmul(weights, Tensor::from_values({rows * cols, 2}, std::move(coords)));
}

Tensor epe_loss(const Tensor& pooled, Extent source_extent, Extent target_extent, const PairAnnotation& annotation,
                double temperature) {
  if (pooled.rank() != 4) throw Error(ErrorCode::kShape, "epe_loss: pooled volume must be 4D");
  if (annotation.keypoints.empty()) return Tensor::scalar(0.0);
  const std::size_t hs = pooled.extent(0), ws = pooled.extent(1), ht = pooled.extent(2), wt = pooled.extent(3);
  const std::size_t T = ht * wt;
  const std::size_t n = annotation.keypoints.size();

  std::vector<std::size_t> index;
  index.reserve(n * T);
  std::vector<double> truth;
  truth.reserve(n * 2);
  for (const auto& kp : annotation.keypoints) {
    const std::size_t r = nearest_cell(kp.source.row, hs, source_extent.rows);
    const std::size_t c = nearest_cell(kp.source.col, ws, source_extent.cols);
    const std::size_t base = (r * ws + c) * T;
    for (std::size_t t = 0; t < T; ++t) index.push_back(base + t);
    truth.push_back(pixel_to_lattice(clamp_to_extent(kp.target.row, target_extent.rows), ht, target_extent.rows));
    truth.push_back(pixel_to_lattice(clamp_to_extent(kp.target.col, target_extent.cols), wt, target_extent.cols));
  }
  const Tensor slices = reshape(gather(pooled, index), {n, T});
  const Tensor predicted = soft_argmax(slices, ht, wt, temperature);
  return mean(row_norm(sub(predicted, Tensor::from_values({n, 2}, std::move(truth)))));
}

AdamW::AdamW(std::vector<Tensor> parameters, Options options) : params_(std::move(parameters)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void AdamW::step() {
  ++t_;
  const auto& o = options_;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto theta = params_[i].mutable_values();
    const auto g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * gj;
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * gj * gj;
      double next = theta[j] * (1.0 - o.learning_rate * o.weight_decay);
      next -= o.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + o.epsilon);
      theta[j] = o.round_to_float32 ? static_cast<double>(static_cast<float>(next)) : next;
    }
  }
}

TrainingPair prepare_pair(const ImagePair& images, const PairAnnotation& annotation, const ExtractorConfig& extractor,
                          const EmbedderConfig& embedder) {
  validate_pair(images);
  ExtractorConfig src_cfg = extractor;
  src_cfg.grid_rows = embedder.src_rows;
  src_cfg.grid_cols = embedder.src_cols;
  ExtractorConfig tgt_cfg = extractor;
  tgt_cfg.grid_rows = embedder.tgt_rows;
  tgt_cfg.grid_cols = embedder.tgt_cols;
  TrainingPair out;
  out.cost = correlate(extract_handcrafted(images.source, src_cfg), extract_handcrafted(images.target, tgt_cfg));
  out.annotation = annotation;
  out.annotation.source_extent = {images.source.rows, images.source.cols};
  out.annotation.target_extent = {images.target.rows, images.target.cols};
  return out;
}

TrainingResult train(std::span<const TrainingPair> pairs, const ModelConfig& model_config, const LossConfig& config) {
  validate(config);
  if (model_config.field.channels != model_config.embedder.channels) {
    throw Error(ErrorCode::kConfig, "field and embedder channel counts differ");
  }
  TrainingResult result;
  result.field = FieldModel::initialize(model_config.field, derive_seed(config.seed, 1));
  result.embedder = EmbedderParams::initialize(model_config.embedder, derive_seed(config.seed, 2));
  if (config.steps == 0) return result;
  if (pairs.empty()) throw Error(ErrorCode::kInvalidArgument, "train: no training pairs");

  AdamW::Options opt;
  opt.learning_rate = config.learning_rate;
  opt.weight_decay = config.weight_decay;
  AdamW optimizer(trainable(result.field, result.embedder), opt);

  Rng sampler(derive_seed(config.seed, 3));
  Rng shuffler(derive_seed(config.seed, 4));
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);

  result.trace.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    const std::size_t slot = step % pairs.size();
    if (slot == 0) std::shuffle(order.begin(), order.end(), shuffler.engine());
    const StepLosses l = pair_losses(pairs[order[slot]], result.field, result.embedder, config, sampler);
    require_finite(l.classification, "L_f", step);
    require_finite(l.epe, "L_c", step);
    require_finite(l.total, "L_total", step);

    optimizer.zero_grad();
    backward(l.total);
    optimizer.step();
    result.trace.push_back({step, l.classification.item(), l.epe.item(), l.total.item()});

    if (config.checkpoint_every != 0 && !config.checkpoint_path.empty() && (step + 1) % config.checkpoint_every == 0) {
      save_model(config.checkpoint_path, result.field, result.embedder, model_config.extractor);
    }
  }
  return result;
}

LossRecord evaluate_losses(std::span<const TrainingPair> pairs, const FieldModel& field, const EmbedderParams& embedder,
                           const LossConfig& config, std::uint64_t seed) {
  const FieldModel frozen = field.frozen();
  const EmbedderParams frozen_embedder = embedder.frozen();
  Rng rng(seed);
  LossRecord sum;
  for (const auto& pair : pairs) {
    const StepLosses l = pair_losses(pair, frozen, frozen_embedder, config, rng);
    sum.classification += l.classification.item();
    sum.epe += l.epe.item();
    sum.total += l.total.item();
  }
  if (!pairs.empty()) {
    const double n = static_cast<double>(pairs.size());
    sum.classification /= n;
    sum.epe /= n;
    sum.total /= n;
  }
  return sum;
}

void write_loss_csv(const std::filesystem::path& path, std::span<const LossRecord> trace) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.precision(9);
  out << "step,L_f,L_c,L_total\n";
  for (const auto& r : trace) out << r.step << "," << r.classification << "," << r.epe << "," << r.total << "\n";
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path.string());
}

}  // namespace nemf
