#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mednc/core/graph.hpp"
#include "mednc/nn/extractor.hpp"

namespace mednc::nn {

struct HeadSpec {
  Index fc_width = 128;
  double dropout_rate = 0.5;
  Index num_classes = 2;
  int hidden_layers = 1;
};

void validate(const HeadSpec& head);

enum class Topology { single, ffc, fco, fo, ffco };
std::string_view to_string(Topology t);
Topology topology_from_string(std::string_view name);

/// What an output-level ensemble concatenates from each branch: its class
/// probabilities, or its pre-softmax logits.
enum class CombineSignal { probabilities, hidden_activations };
std::string_view to_string(CombineSignal s);
CombineSignal combine_signal_from_string(std::string_view name);

/// Partition of member ids into groups. For FFC/FO/FFCO a feature group is
/// concatenated at the feature level; for FCO it is the set of members whose
/// FC activations are concatenated. `fc_groups` (FFCO only) partitions the
/// feature groups by index.
struct Grouping {
  std::vector<std::vector<std::string>> feature_groups;
  std::vector<std::vector<std::size_t>> fc_groups;

  friend bool operator==(const Grouping&, const Grouping&) = default;
};

/// Members sorted by id and grouped consecutively; FFCO additionally groups
/// consecutive feature groups by `fc_group_size`.
Grouping default_grouping(Topology topology, std::vector<std::string> member_ids, std::size_t group_size = 2,
                          std::size_t fc_group_size = 2);

/// Throws ConfigError unless `grouping` is a valid partition for the topology.
void validate_grouping(Topology topology, const Grouping& grouping, const std::vector<std::string>& member_ids);

struct EnsembleSpec {
  Topology topology = Topology::ffco;
  Grouping grouping;  // empty -> default_grouping
  HeadSpec head;
  CombineSignal combine_signal = CombineSignal::probabilities;
};

/// A built classifier: one graph and parameter store holding frozen
/// extractors, trainable heads and, for ensembles, the combiners.
struct Model {
  std::string name;
  Topology topology = Topology::single;
  HeadSpec head;
  Grouping grouping;
  CombineSignal combine_signal = CombineSignal::probabilities;
  std::vector<ExtractorSpec> extractors;

  Graph graph;
  ParameterStore<double> params;
  std::optional<NodeId> image;
  std::vector<NodeId> extractor_nodes;  // parallel to `extractors`
  NodeId target = 0;
  NodeId output = 0;
  NodeId loss = 0;
  std::vector<NodeId> group_outputs;
  std::vector<NodeId> auxiliary_losses;  // one per group output
  std::vector<ParamId> combiner_params;  // final output layer

  /// Named graph nodes for each ensemble symbol: "F_x" (flattened member
  /// features), "F_e" (feature concatenations), "FC_x" (branch FC activations),
  /// "FC_e" (FC concatenations), "O_x" (branch outputs), "O_e" (output
  /// concatenation).
  std::map<std::string, std::vector<NodeId>> symbols;

  Index trainable_params() const { return params.trainable_count(); }
  std::vector<ParamId> extractor_params() const;
  const ExtractorSpec& extractor(const std::string& id) const;
};

Model build_single_model(const ExtractorSpec& extractor, const HeadSpec& head, std::uint64_t seed);

Model build_ensemble(const std::vector<ExtractorSpec>& members, const EnsembleSpec& spec, std::uint64_t seed);

Model build_ffc(const std::vector<ExtractorSpec>& members, const Grouping& grouping, const HeadSpec& head,
                std::uint64_t seed);
Model build_fco(const std::vector<ExtractorSpec>& members, const Grouping& grouping, const HeadSpec& head,
                std::uint64_t seed, CombineSignal signal = CombineSignal::probabilities);
Model build_fo(const std::vector<ExtractorSpec>& members, const Grouping& grouping, const HeadSpec& head,
               std::uint64_t seed, CombineSignal signal = CombineSignal::probabilities);
Model build_ffco(const std::vector<ExtractorSpec>& members, const Grouping& grouping, const HeadSpec& head,
                 std::uint64_t seed, CombineSignal signal = CombineSignal::probabilities);

inline Index trainable_params(const Model& model) { return model.trainable_params(); }

struct ConcatCensus {
  std::size_t feature = 0;
  std::size_t fc = 0;
  std::size_t output = 0;

  friend bool operator==(const ConcatCensus&, const ConcatCensus&) = default;
};

/// Counts concatenation nodes by ensemble level.
ConcatCensus concat_census(const Graph& graph);

}  // namespace mednc::nn
