#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "mednc/core/optimizer.hpp"
#include "mednc/eval/metrics.hpp"
#include "mednc/nn/model.hpp"

namespace mednc::eval {

/// Frozen-extractor features for every record of a dataset, keyed by
/// extractor id; rows follow record order.
using FeatureCache = std::map<std::string, Tensord>;

/// Adds the features of each extractor not yet present in `cache`.
void cache_features(FeatureCache& cache, std::span<const nn::ExtractorSpec> extractors, const data::Dataset& dataset);

/// Model inputs for a set of samples: one tensor per extractor node of the
/// model (in model order), one-hot targets and integer labels.
struct FeatureSet {
  std::vector<Tensord> inputs;
  Tensord targets;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

FeatureSet gather(const nn::Model& model, const FeatureCache& cache, const data::Dataset& dataset,
                  std::span<const std::size_t> indices);

/// Like gather(), followed by the augmented copies of the listed records.
/// Augmented features are recomputed through the toy extractors; table
/// extractors cannot be augmented (ConfigError).
FeatureSet gather_augmented(const nn::Model& model, const FeatureCache& cache, const data::Dataset& dataset,
                            std::span<const std::size_t> indices, const data::AugmentSpec& augment);

/// Rows `rows` of every tensor in the set.
FeatureSet select(const FeatureSet& set, const std::vector<Index>& rows);

/// Per-column mean and scale of every model input, fitted on one set
/// (normally the training partition) and applied to all others. Columns
/// with near-zero spread are only centred.
struct Standardizer {
  std::vector<Vector<double>> mean;
  std::vector<Vector<double>> scale;

  bool empty() const noexcept { return mean.empty(); }
  void apply(FeatureSet& set) const;
};

Standardizer fit_standardizer(const FeatureSet& set);

/// joint: the final loss trains every trainable parameter. staged: the
/// branch heads first train on their auxiliary losses, then only the final
/// combiner trains on the final loss. Models without branch outputs train
/// jointly in either mode.
enum class TrainMode { joint, staged };
std::string_view to_string(TrainMode m);
TrainMode train_mode_from_string(std::string_view name);

struct TrainConfig {
  int epochs = 30;
  Index batch_size = 32;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::joint;
  bool standardize = true;
};

void validate(const TrainConfig& config);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double seconds = 0.0;  // monotonic wall clock
};

struct LearningCurve {
  std::vector<EpochRecord> epochs;

  std::size_t size() const noexcept { return epochs.size(); }
  double mean_seconds() const;
};

/// Mini-batch training on `train`; after every epoch both sets are scored in
/// eval mode (val columns are NaN when `val` is empty). Throws NumericError
/// naming the epoch when the loss stops being finite.
LearningCurve train(nn::Model& model, const FeatureSet& train, const FeatureSet& val, const TrainConfig& config);

struct Evaluation {
  ConfusionMatrix confusion;
  MetricsReport metrics;
  double loss = 0.0;
};

/// Eval-mode forward in chunks; argmax predictions of `output` (defaults to
/// the model output) scored against the labels.
Evaluation evaluate(nn::Model& model, const FeatureSet& set, int positive = 1, std::optional<NodeId> output = {});

/// Output distribution rows for the whole set, eval mode.
Tensord predict(nn::Model& model, const FeatureSet& set, std::optional<NodeId> output = {});

}  // namespace mednc::eval
