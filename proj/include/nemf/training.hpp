#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "nemf/annotation.hpp"
#include "nemf/cost_embed.hpp"
#include "nemf/features.hpp"
#include "nemf/field_model.hpp"
#include "nemf/random.hpp"

namespace nemf {

enum class ClassificationForm {
  kSoftmax,  // -log softmax(logit(M)/tau)[gt] over the candidate set
  kLiteral,  // -sum_k M*_k log M(p_k): positives only, kept for ablation
};

struct LossConfig {
  double lambda_f = 1.0;
  double lambda_c = 1.0;
  double tau = 0.07;
  std::size_t samples = 50;  // S_samples: ground truth + S-1 negatives
  double learning_rate = 3e-5;
  double weight_decay = 0.01;
  std::size_t steps = 0;
  std::uint64_t seed = 1;
  bool bidirectional = true;
  double tau_softargmax = 0.02;
  ClassificationForm form = ClassificationForm::kSoftmax;
  std::size_t checkpoint_every = 0;  // 0 disables intermediate checkpoints
  std::filesystem::path checkpoint_path;
};

void validate(const LossConfig& config);

// One query with its candidate set; candidates[gt_index] is the ground truth.
// A mirrored sample fixes the target point and varies the source point.
struct TrainingSample {
  std::vector<QueryPoint> candidates;
  std::size_t gt_index = 0;
  bool mirrored = false;

  std::vector<double> labels() const;
};

std::vector<TrainingSample> sample_batch(const PairAnnotation& annotation, const LossConfig& config, Rng& rng);

// Mean over samples; scalar tensor.
Tensor classification_loss(const FieldModel& model, const CostFeatureVolume& volume,
                           std::span<const TrainingSample> samples, const LossConfig& config);

// Expected lattice coordinates (row, col) under softmax(slices / temperature);
// slices is [n, rows * cols], the result [n, 2].
Tensor soft_argmax(const Tensor& slices, std::size_t rows, std::size_t cols, double temperature);

// Mean Euclidean distance, in target lattice units, between the soft-argmax of
// the pooled volume at each annotated source cell and the annotated target.
Tensor epe_loss(const Tensor& pooled, Extent source_extent, Extent target_extent, const PairAnnotation& annotation,
                double temperature);

class AdamW {
 public:
  struct Options {
    double learning_rate = 3e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
    bool round_to_float32 = true;  // parameters stay exactly representable in the weight file
  };

  AdamW(std::vector<Tensor> parameters, Options options);
  void zero_grad();
  void step();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  Options options_;
  std::size_t t_ = 0;
};

struct TrainingPair {
  CostVolume cost;
  PairAnnotation annotation;
};

TrainingPair prepare_pair(const ImagePair& images, const PairAnnotation& annotation, const ExtractorConfig& extractor,
                          const EmbedderConfig& embedder);

struct LossRecord {
  std::size_t step = 0;
  double classification = 0.0;  // L_f
  double epe = 0.0;             // L_c
  double total = 0.0;
};

struct TrainingResult {
  FieldModel field;
  EmbedderParams embedder;
  std::vector<LossRecord> trace;
};

TrainingResult train(std::span<const TrainingPair> pairs, const ModelConfig& model_config, const LossConfig& config);

// Losses averaged over every pair with a fixed sampling seed, without updating anything.
LossRecord evaluate_losses(std::span<const TrainingPair> pairs, const FieldModel& field, const EmbedderParams& embedder,
                           const LossConfig& config, std::uint64_t seed);

void write_loss_csv(const std::filesystem::path& path, std::span<const LossRecord> trace);

}  // namespace nemf
