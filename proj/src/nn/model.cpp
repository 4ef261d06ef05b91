#include "mednc/nn/model.hpp"

#include <algorithm>
#include <set>

#include "mednc/core/errors.hpp"

namespace mednc::nn {

void validate(const HeadSpec& head) {
  if (head.fc_width < 1) throw ConfigError("head fc_width must be at least 1");
  if (head.num_classes < 2) throw ConfigError("head num_classes must be at least 2");
  if (head.hidden_layers < 1) throw ConfigError("head hidden_layers must be at least 1");
  if (!(head.dropout_rate >= 0.0 && head.dropout_rate < 1.0)) throw ConfigError("head dropout_rate must lie in [0, 1)");
}

std::string_view to_string(Topology t) {
  switch (t) {
    case Topology::single:
      return "single";
    case Topology::ffc:
      return "ffc";
    case Topology::fco:
      return "fco";
    case Topology::fo:
      return "fo";
    case Topology::ffco:
      return "ffco";
  }
  return "?";
}

Topology topology_from_string(std::string_view name) {
  for (auto t : {Topology::single, Topology::ffc, Topology::fco, Topology::fo, Topology::ffco}) {
    if (name == to_string(t)) return t;
  }
  throw ConfigError("unknown topology '" + std::string(name) + "' (expected single, ffc, fco, fo or ffco)");
}

std::string_view to_string(CombineSignal s) {
  return s == CombineSignal::probabilities ? "probabilities" : "hidden_activations";
}

CombineSignal combine_signal_from_string(std::string_view name) {
  if (name == "probabilities") return CombineSignal::probabilities;
  if (name == "hidden_activations") return CombineSignal::hidden_activations;
  throw ConfigError("unknown combine_signal '" + std::string(name) + "'");
}

Grouping default_grouping(Topology topology, std::vector<std::string> ids, std::size_t group_size,
                          std::size_t fc_group_size) {
  Grouping g;
  if (topology == Topology::single) {
    if (ids.size() != 1) throw ConfigError("a single model takes exactly one member");
    g.feature_groups.push_back(ids);
    return g;
  }
  if (group_size < 2) throw ConfigError("group size must be at least 2");
  if (ids.size() < group_size || ids.size() % group_size != 0) {
    throw ConfigError(std::string(to_string(topology)) + " with group size " + std::to_string(group_size) +
                      " needs a positive multiple of " + std::to_string(group_size) + " members, got " +
                      std::to_string(ids.size()));
  }
  std::sort(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); i += group_size) {
    g.feature_groups.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(i),
                                  ids.begin() + static_cast<std::ptrdiff_t>(i + group_size));
  }
  if (topology == Topology::ffco) {
    const std::size_t n = g.feature_groups.size();
    if (fc_group_size < 2) throw ConfigError("fc group size must be at least 2");
    if (n % fc_group_size != 0) {
      throw ConfigError("ffco needs a multiple of " + std::to_string(group_size * fc_group_size) + " members (" +
                        std::to_string(fc_group_size) + " groups of " + std::to_string(group_size) +
                        " per FC group), got " + std::to_string(ids.size()));
    }
    for (std::size_t i = 0; i < n; i += fc_group_size) {
      std::vector<std::size_t> grp;
      for (std::size_t j = i; j < i + fc_group_size; ++j) grp.push_back(j);
      g.fc_groups.push_back(std::move(grp));
    }
  }
  return g;
}

void validate_grouping(Topology topology, const Grouping& g, const std::vector<std::string>& member_ids) {
  const std::set<std::string> known(member_ids.begin(), member_ids.end());
  std::set<std::string> seen;
  if (g.feature_groups.empty()) throw ConfigError("grouping has no groups");
  for (std::size_t i = 0; i < g.feature_groups.size(); ++i) {
    const auto& grp = g.feature_groups[i];
    if (topology != Topology::single && grp.size() < 2) {
      throw ConfigError("group " + std::to_string(i) + " has " + std::to_string(grp.size()) +
                        " member(s); concatenating groups need at least 2");
    }
    for (const auto& id : grp) {
      if (!known.count(id)) throw ConfigError("group " + std::to_string(i) + " names unknown member '" + id + "'");
      if (!seen.insert(id).second) throw ConfigError("member '" + id + "' appears in more than one group");
    }
  }
  if (seen.size() != known.size()) {
    for (const auto& id : known) {
      if (!seen.count(id)) throw ConfigError("member '" + id + "' is not assigned to any group");
    }
  }
  if (topology == Topology::single && (g.feature_groups.size() != 1 || g.feature_groups[0].size() != 1)) {
    throw ConfigError("a single model takes exactly one member");
  }
  if (topology != Topology::ffco) {
    if (!g.fc_groups.empty()) throw ConfigError("fc_groups are only used by ffco");
    return;
  }
  if (g.fc_groups.empty()) throw ConfigError("ffco needs at least one fc group");
  std::vector<int> used(g.feature_groups.size(), 0);
  for (std::size_t j = 0; j < g.fc_groups.size(); ++j) {
    if (g.fc_groups[j].size() < 2) {
      throw ConfigError("fc group " + std::to_string(j) + " has " + std::to_string(g.fc_groups[j].size()) +
                        " feature group(s); need at least 2");
    }
    for (auto f : g.fc_groups[j]) {
      if (f >= used.size()) throw ConfigError("fc group " + std::to_string(j) + " references missing feature group");
      if (used[f]++) throw ConfigError("feature group " + std::to_string(f) + " appears in more than one fc group");
    }
  }
  for (std::size_t f = 0; f < used.size(); ++f) {
    if (!used[f]) throw ConfigError("feature group " + std::to_string(f) + " is not assigned to any fc group");
  }
}

std::vector<ParamId> Model::extractor_params() const {
  std::vector<ParamId> out;
  std::set<std::string> ids;
  for (const auto& e : extractors) ids.insert(e.id);
  for (const auto& n : graph.nodes()) {
    const auto slash = n.name.find('/');
    if (n.kind == OpKind::conv2d && slash != std::string::npos && ids.count(n.name.substr(0, slash))) {
      out.insert(out.end(), n.params.begin(), n.params.end());
    }
  }
  return out;
}

const ExtractorSpec& Model::extractor(const std::string& id) const {
  for (const auto& e : extractors) {
    if (e.id == id) return e;
  }
  throw LookupError("model has no extractor '" + id + "'");
}

namespace {

class Builder {
 public:
  Builder(Model& m, std::uint64_t seed) : m_(m), rng_(seed), b_(m.graph, m.params, rng_) {}

  void members(const std::vector<ExtractorSpec>& extractors) {
    std::set<std::string> ids;
    const ExtractorSpec* first_toy = nullptr;
    for (const auto& e : extractors) {
      validate(e);
      if (!ids.insert(e.id).second) throw ConfigError("duplicate extractor id '" + e.id + "'");
      if (e.source != ExtractorSource::toy_conv) continue;
      if (!first_toy) {
        first_toy = &e;
      } else if (e.toy.in_channels != first_toy->toy.in_channels || e.toy.height != first_toy->toy.height ||
                 e.toy.width != first_toy->toy.width) {
        throw ConfigError("toy extractors '" + first_toy->id + "' and '" + e.id + "' expect different image shapes");
      }
    }
    m_.extractors = extractors;
    if (first_toy) {
      m_.image = b_.input("image", {first_toy->toy.in_channels, first_toy->toy.height, first_toy->toy.width});
    }
    m_.target = b_.input("target", {m_.head.num_classes}, NodeRole::target);
    for (const auto& e : m_.extractors) {
      const NodeId x = attach_extractor(b_, e, m_.image);
      m_.extractor_nodes.push_back(x);
      const NodeId flat = b_.flatten(x, e.id + "/flat");
      flat_[e.id] = flat;
      m_.symbols["F_x"].push_back(flat);
    }
  }

  NodeId features(const std::string& id) const { return flat_.at(id); }

  NodeId concat(std::vector<NodeId> parts, const std::string& name, NodeRole role, const char* symbol) {
    const NodeId id = b_.concatenate(std::move(parts), name, role);
    m_.symbols[symbol].push_back(id);
    return id;
  }

  /// hidden_layers x (dense -> relu -> dropout)
  NodeId hidden(NodeId x, const std::string& prefix) {
    for (int l = 1; l <= m_.head.hidden_layers; ++l) {
      const std::string n = std::to_string(l);
      x = b_.dense(x, m_.head.fc_width, true, prefix + "/fc" + n);
      x = b_.relu(x, prefix + "/relu" + n);
      x = b_.dropout(x, m_.head.dropout_rate, prefix + "/drop" + n);
    }
    m_.symbols["FC_x"].push_back(x);
    return x;
  }

  /// Branch output layer; returns the node concatenated downstream.
  NodeId group_output(NodeId x, const std::string& prefix) {
    const NodeId logits = b_.dense(x, m_.head.num_classes, false, prefix + "/logits");
    const NodeId probs = b_.softmax(logits, prefix + "/output");
    m_.graph.node(probs).role = NodeRole::group_output;
    m_.group_outputs.push_back(probs);
    m_.symbols["O_x"].push_back(probs);
    m_.auxiliary_losses.push_back(b_.cross_entropy(probs, m_.target, prefix + "/loss", NodeRole::auxiliary_loss));
    return m_.combine_signal == CombineSignal::probabilities ? probs : logits;
  }

  void final_output(NodeId x) {
    const NodeId logits = b_.dense(x, m_.head.num_classes, false, "output/logits");
    m_.combiner_params = m_.graph.node(logits).params;
    m_.output = b_.softmax(logits, "output");
    m_.graph.node(m_.output).role = NodeRole::output;
    m_.loss = b_.cross_entropy(m_.output, m_.target, "loss");
  }

 private:
  Model& m_;
  Rng rng_;
  GraphBuilder<double> b_;
  std::map<std::string, NodeId> flat_;
};

std::vector<std::string> ids_of(const std::vector<ExtractorSpec>& members) {
  std::vector<std::string> ids;
  for (const auto& e : members) ids.push_back(e.id);
  return ids;
}

}  // namespace

Model build_single_model(const ExtractorSpec& extractor, const HeadSpec& head, std::uint64_t seed) {
  validate(head);
  Model m;
  m.name = extractor.id;
  m.topology = Topology::single;
  m.head = head;
  m.grouping.feature_groups = {{extractor.id}};
  Builder b(m, seed);
  b.members({extractor});
  b.final_output(b.hidden(b.features(extractor.id), "head"));
  return m;
}

Model build_ensemble(const std::vector<ExtractorSpec>& members, const EnsembleSpec& spec, std::uint64_t seed) {
  if (spec.topology == Topology::single) {
    if (members.size() != 1) throw ConfigError("a single model takes exactly one member");
    return build_single_model(members[0], spec.head, seed);
  }
  validate(spec.head);
  const auto ids = ids_of(members);
  Model m;
  m.name = std::string(to_string(spec.topology));
  m.topology = spec.topology;
  m.head = spec.head;
  m.combine_signal = spec.combine_signal;
  m.grouping = spec.grouping.feature_groups.empty() ? default_grouping(spec.topology, ids) : spec.grouping;
  validate_grouping(spec.topology, m.grouping, ids);

  Builder b(m, seed);
  b.members(members);
  const auto& groups = m.grouping.feature_groups;
  auto member_features = [&](const std::vector<std::string>& grp) {
    std::vector<NodeId> parts;
    for (const auto& id : grp) parts.push_back(b.features(id));
    return parts;
  };

  switch (spec.topology) {
    case Topology::ffc: {
      std::vector<NodeId> branches;
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const std::string p = "g" + std::to_string(g);
        const NodeId fe = b.concat(member_features(groups[g]), p + "/features", NodeRole::feature_ensemble, "F_e");
        branches.push_back(b.hidden(fe, p));
      }
      b.final_output(b.concat(branches, "fc_ensemble", NodeRole::fc_ensemble, "FC_e"));
      break;
    }
    case Topology::fco: {
      std::vector<NodeId> outs;
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const std::string p = "g" + std::to_string(g);
        std::vector<NodeId> fcs;
        for (const auto& id : groups[g]) fcs.push_back(b.hidden(b.features(id), id + "/head"));
        const NodeId fce = b.concat(fcs, p + "/fc_ensemble", NodeRole::fc_ensemble, "FC_e");
        outs.push_back(b.group_output(fce, p));
      }
      b.final_output(b.concat(outs, "output_ensemble", NodeRole::output_ensemble, "O_e"));
      break;
    }
    case Topology::fo: {
      std::vector<NodeId> outs;
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const std::string p = "g" + std::to_string(g);
        const NodeId fe = b.concat(member_features(groups[g]), p + "/features", NodeRole::feature_ensemble, "F_e");
        outs.push_back(b.group_output(b.hidden(fe, p), p));
      }
      b.final_output(b.concat(outs, "output_ensemble", NodeRole::output_ensemble, "O_e"));
      break;
    }
    case Topology::ffco: {
      std::vector<NodeId> branch_fc;
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const std::string p = "p" + std::to_string(g);
        const NodeId fe = b.concat(member_features(groups[g]), p + "/features", NodeRole::feature_ensemble, "F_e");
        branch_fc.push_back(b.hidden(fe, p));
      }
      std::vector<NodeId> outs;
      for (std::size_t j = 0; j < m.grouping.fc_groups.size(); ++j) {
        const std::string p = "g" + std::to_string(j);
        std::vector<NodeId> parts;
        for (auto f : m.grouping.fc_groups[j]) parts.push_back(branch_fc[f]);
        const NodeId fce = b.concat(parts, p + "/fc_ensemble", NodeRole::fc_ensemble, "FC_e");
        outs.push_back(b.group_output(fce, p));
      }
      b.final_output(b.concat(outs, "output_ensemble", NodeRole::output_ensemble, "O_e"));
      break;
    }
    case Topology::single:
      break;
  }
  return m;
}

Model build_ffc(const std::vector<ExtractorSpec>& members, const Grouping& grouping, const HeadSpec& head,
                std::uint64_t seed) {
  return build_ensemble(members, {Topology::ffc, grouping, head, CombineSignal::probabilities}, seed);
}

Model build_fco(const std::vector<ExtractorSpec>& members, const Grouping& grouping, const HeadSpec& head,
                std::uint64_t seed, CombineSignal signal) {
  return build_ensemble(members, {Topology::fco, grouping, head, signal}, seed);
}

Model build_fo(const std::vector<ExtractorSpec>& members, const Grouping& grouping, const HeadSpec& head,
               std::uint64_t seed, CombineSignal signal) {
  return build_ensemble(members, {Topology::fo, grouping, head, signal}, seed);
}

Model build_ffco(const std::vector<ExtractorSpec>& members, const Grouping& grouping, const HeadSpec& head,
                 std::uint64_t seed, CombineSignal signal) {
  return build_ensemble(members, {Topology::ffco, grouping, head, signal}, seed);
}

ConcatCensus concat_census(const Graph& graph) {
  return {graph.count(OpKind::concatenate, NodeRole::feature_ensemble),
          graph.count(OpKind::concatenate, NodeRole::fc_ensemble),
          graph.count(OpKind::concatenate, NodeRole::output_ensemble)};
}

}  // namespace mednc::nn
