#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mednc/eval/trainer.hpp"

namespace mednc::eval {

/// A model to be retrained from scratch in every repetition.
struct Candidate {
  std::string name;
  bool member = false;  // a single-model member of the ensemble under study
  std::function<nn::Model(std::uint64_t seed)> factory;
};

struct MccvConfig {
  int repetitions = 10;
  std::uint64_t base_seed = 0;
  std::array<double, 4> ratios{0.6, 0.2, 0.1, 0.1};
  TrainConfig train;  // seed replaced per repetition and candidate
  data::AugmentSpec augment;
  int positive = 1;
  int threads = 0;  // 0: MEDNC_THREADS, else 1
};

void validate(const MccvConfig& config);

/// Worker count for a request of `requested` threads (0 defers to the
/// MEDNC_THREADS environment variable), capped by the number of tasks.
int worker_count(int requested, int tasks);

struct RunResult {
  int repetition = 0;
  std::uint64_t split_seed = 0;
  std::uint64_t model_seed = 0;
  std::uint64_t train_seed = 0;
  std::map<data::Part, Evaluation> partitions;
  LearningCurve curve;
  Index trainable_params = 0;
  nn::Topology topology = nn::Topology::single;
};

struct Stat {
  std::optional<double> mean;  // over repetitions where the metric is defined
  std::optional<double> std;   // sample standard deviation; needs two values
  int defined = 0;
  double compat_mean = 0.0;  // undefined counted as 0
};

Stat summarize(const std::vector<Metric>& values);

struct MCCVResult {
  std::string name;
  nn::Topology topology = nn::Topology::single;
  bool member = false;
  Index trainable_params = 0;
  std::vector<RunResult> repetitions;

  Stat stat(data::Part part, std::string_view metric) const;
  double seconds_per_epoch() const;
};

/// Partitions scored for a candidate: train and val always; in staged mode
/// members are scored on testA and ensembles on testB, otherwise both.
std::vector<data::Part> scored_parts(const Candidate& candidate, TrainMode mode);

struct TrainedCandidate {
  RunResult run;
  nn::Model model;
  Standardizer standardizer;  // empty when training.standardize is off
};

/// Builds, trains and scores one candidate on one split (repetition r).
/// Model seed derive_seed(split seed, "model:<name>"), training seed
/// derive_seed(split seed, "train:<name>"). Inputs are standardized with
/// statistics of the (augmented) training partition when configured.
TrainedCandidate run_candidate(const Candidate& candidate, const data::Dataset& dataset,
                               const data::DatasetSplit& split, const FeatureCache& cache, const MccvConfig& config,
                               int r, const std::vector<data::Part>& parts);

/// Every repetition r draws a fresh stratified split seeded base_seed + r and
/// fresh heads for each candidate; cached extractor features are reused.
/// Repetitions may run in parallel; results are folded in repetition order.
/// A failing repetition aborts the run with its index in the message.
std::vector<MCCVResult> run_mccv(const std::vector<Candidate>& candidates, const data::Dataset& dataset,
                                 const FeatureCache& cache, const MccvConfig& config);

}  // namespace mednc::eval
