#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mednc/eval/mccv.hpp"

namespace mednc::eval {

/// Bytes per parameter used for the reported model size.
inline constexpr double kBytesPerParam = 4.0;

/// Flat "<partition>_<metric>" keys (null when undefined), the same keys
/// with undefined collapsed to 0 under "_compat", seeds, parameter counts
/// and confusion matrices. Holds no timing, so reruns are byte-identical.
nlohmann::json metrics_document(const MCCVResult& result, const RunResult& run);
nlohmann::json timing_document(const RunResult& run);
std::string curve_csv(const LearningCurve& curve);
std::string confusion_csv(const ConfusionMatrix& cm);

/// rep<r>/ holds the non-member model, rep<r>/members/<name>/ each member:
/// metrics.json, timing.json, curve.csv and confusion_<partition>.csv.
void write_repetitions(const std::filesystem::path& run_dir, const std::vector<MCCVResult>& results);
void write_run_files(const std::filesystem::path& dir, const MCCVResult& result, const RunResult& run);

struct StoredRun {
  std::filesystem::path dir;
  nlohmann::json metrics;
  std::optional<nlohmann::json> timing;
};

/// Every metrics.json under `root` (shallowest first, then path order), with its timing.json when
/// present. When `root` holds rep<r>/ directories only those are read.
/// Throws DataError when there is none.
std::vector<StoredRun> load_runs(const std::filesystem::path& root);

struct SummaryRow {
  std::string model;
  std::string topology;
  std::string role;
  std::string partition;  // testB when scored, else testA
  int repetitions = 0;
  std::map<std::string, Stat> metrics;
  Index trainable_params = 0;
  double params_mb = 0.0;
  std::optional<double> seconds_per_epoch;
  bool best = false;  // highest mean accuracy (first on ties)
};

/// One row per model, in order of first appearance.
std::vector<SummaryRow> summarize_runs(const std::vector<StoredRun>& runs);

std::string summary_csv(const std::vector<SummaryRow>& rows);
std::vector<SummaryRow> parse_summary_csv(const std::string& text);
std::string summary_markdown(const std::vector<SummaryRow>& rows);

/// summary.csv and summary.md in `dir`.
void write_summary(const std::filesystem::path& dir, const std::vector<SummaryRow>& rows);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace mednc::eval
