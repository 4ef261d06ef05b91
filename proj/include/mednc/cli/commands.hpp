#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mednc/cli/config.hpp"
#include "mednc/nn/serialize.hpp"

namespace mednc::cli {

/// Stable process exit codes.
enum ExitCode : int { kOk = 0, kInternal = 1, kConfigOrData = 2, kNumeric = 3, kVerification = 4 };

inline constexpr const char* kArtifactVersion = "1.0.0";

struct Prepared {
  data::Dataset raw;      // as loaded, before balancing
  data::Dataset dataset;  // balanced when configured
  nn::TableMap tables;
  std::vector<nn::ExtractorSpec> extractors;
};

/// Loads or generates the dataset, balances it and builds the extractors
/// (toy backbones seeded by derive_seed(seed, id), or the feature tables).
Prepared prepare(const RunConfig& config);

/// The model under study followed, when configured, by each of its members
/// as a single model.
std::vector<eval::Candidate> candidates(const RunConfig& config, const Prepared& prepared);

int cmd_prepare(const RunConfig& config, std::ostream& out);
int cmd_train(const RunConfig& config, std::ostream& out);
int cmd_mccv(const RunConfig& config, std::ostream& out);
int cmd_report(const std::filesystem::path& dir, std::ostream& out);
int cmd_gradcheck(bool single_precision, std::ostream& out);

/// Parses the command line and dispatches; errors are reported on `err`
/// and mapped to exit codes.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace mednc::cli
