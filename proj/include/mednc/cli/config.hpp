#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mednc/eval/mccv.hpp"

namespace mednc::cli {

enum class SourceKind { synthetic, directory, tables };
std::string_view to_string(SourceKind k);

struct DatasetConfig {
  SourceKind source = SourceKind::synthetic;
  data::SyntheticConfig synthetic;
  std::filesystem::path directory;
  Index channels = 1;
  std::vector<std::filesystem::path> tables;
  std::vector<std::string> class_names;  // tables only; default class<i>
  bool balance = true;
  int positive_class = 1;
};

struct PreprocessConfig {
  Index height = 32;
  Index width = 32;
  data::AugmentSpec augment;
};

struct ToyExtractorConfig {
  int count = 8;
  std::vector<Index> channels{8, 16};
  Index kernel = 3;
  Index pool = 2;
  bool pretext = false;
  nn::PretextConfig pretext_config;
};

struct ModelConfig {
  nn::Topology topology = nn::Topology::ffco;
  std::vector<std::string> members;  // empty: every extractor
  std::optional<nn::Grouping> grouping;
  std::size_t group_size = 2;
  std::size_t fc_group_size = 2;
  nn::HeadSpec head;
  nn::CombineSignal combine_signal = nn::CombineSignal::probabilities;
  bool evaluate_members = true;
};

struct RunConfig {
  std::string run_id = "run";
  std::filesystem::path output_dir = "results";
  std::uint64_t seed = 0;
  DatasetConfig dataset;
  PreprocessConfig preprocessing;
  ToyExtractorConfig extractors;
  ModelConfig model;
  eval::TrainConfig training;
  eval::MccvConfig mccv;  // train/augment/positive mirror the sections above
};

/// Parses and fully validates a run config; errors name the offending JSON
/// path (e.g. "training.epochs"). Missing keys take their defaults.
RunConfig parse_config(const nlohmann::json& doc);
RunConfig load_config(const std::filesystem::path& path);

/// Every key with its default value.
nlohmann::json default_config_json();
nlohmann::json to_json(const RunConfig& config);

/// Resize 224, dropout 0.5, 10 repetitions, ratios 0.6/0.2/0.1/0.1.
void apply_paper_mode(RunConfig& config);

/// Extractor ids the config provides: toy<i> for image sources, the file
/// stems of the feature tables otherwise.
std::vector<std::string> extractor_ids(const RunConfig& config);

/// Members of the model under study, in config order.
std::vector<std::string> model_members(const RunConfig& config);

/// Re-runs the cross-field checks after command-line overrides.
void validate(const RunConfig& config);

}  // namespace mednc::cli
