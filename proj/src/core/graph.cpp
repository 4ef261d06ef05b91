#include "mednc/core/graph.hpp"

#include <array>
#include <utility>

namespace mednc {

namespace {

constexpr std::array<std::pair<OpKind, std::string_view>, 10> kKindNames{{
    {OpKind::input, "input"},
    {OpKind::dense, "dense"},
    {OpKind::conv2d, "conv2d"},
    {OpKind::maxpool2d, "maxpool2d"},
    {OpKind::flatten, "flatten"},
    {OpKind::relu, "relu"},
    {OpKind::dropout, "dropout"},
    {OpKind::softmax, "softmax"},
    {OpKind::concatenate, "concatenate"},
    {OpKind::cross_entropy, "cross_entropy"},
}};

constexpr std::array<std::pair<NodeRole, std::string_view>, 10> kRoleNames{{
    {NodeRole::none, "none"},
    {NodeRole::target, "target"},
    {NodeRole::extractor, "extractor"},
    {NodeRole::feature_ensemble, "feature_ensemble"},
    {NodeRole::fc_ensemble, "fc_ensemble"},
    {NodeRole::output_ensemble, "output_ensemble"},
    {NodeRole::group_output, "group_output"},
    {NodeRole::output, "output"},
    {NodeRole::loss, "loss"},
    {NodeRole::auxiliary_loss, "auxiliary_loss"},
}};

constexpr std::array<std::pair<InitScheme, std::string_view>, 4> kInitNames{{
    {InitScheme::he_uniform, "he_uniform"},
    {InitScheme::glorot_uniform, "glorot_uniform"},
    {InitScheme::zeros, "zeros"},
    {InitScheme::external, "external"},
}};

template <typename E, std::size_t N>
std::string_view name_of(const std::array<std::pair<E, std::string_view>, N>& table, E value) {
  for (const auto& [v, n] : table) {
    if (v == value) return n;
  }
  return "?";
}

template <typename E, std::size_t N>
E value_of(const std::array<std::pair<E, std::string_view>, N>& table, std::string_view name, const char* what) {
  for (const auto& [v, n] : table) {
    if (n == name) return v;
  }
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(name) + "'");
}

Shape with_batch(const Shape& sample) {
  Shape s{1};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

Shape without_batch(const Shape& full) { return Shape(full.begin() + 1, full.end()); }

void expect_inputs(const OpNode& n, std::size_t count) {
  if (n.inputs.size() != count) {
    throw ConfigError(std::string(to_string(n.kind)) + " node '" + n.name + "' needs " + std::to_string(count) +
                      " input(s), got " + std::to_string(n.inputs.size()));
  }
}

void expect_params(const OpNode& n, std::span<const Shape> shapes, std::size_t count) {
  if (n.params.size() != count || shapes.size() != count) {
    throw ConfigError(std::string(to_string(n.kind)) + " node '" + n.name + "' needs " + std::to_string(count) +
                      " parameter(s)");
  }
}

}  // namespace

std::string_view to_string(OpKind kind) { return name_of(kKindNames, kind); }
std::string_view to_string(NodeRole role) { return name_of(kRoleNames, role); }
std::string_view to_string(InitScheme scheme) { return name_of(kInitNames, scheme); }
OpKind op_kind_from_string(std::string_view name) { return value_of(kKindNames, name, "op kind"); }
NodeRole node_role_from_string(std::string_view name) { return value_of(kRoleNames, name, "node role"); }
InitScheme init_scheme_from_string(std::string_view name) { return value_of(kInitNames, name, "init scheme"); }

NodeId Graph::add(OpNode node, std::span<const Shape> param_shapes) {
  for (NodeId in : node.inputs) {
    if (in >= nodes_.size()) {
      throw ConfigError("node '" + node.name + "' consumes node " + std::to_string(in) + " which does not exist yet");
    }
    if (nodes_[in].kind == OpKind::cross_entropy) {
      throw ConfigError("node '" + node.name + "' cannot consume loss node '" + nodes_[in].name + "'");
    }
  }
  auto in_shape = [&](std::size_t i) { return nodes_[node.inputs[i]].sample_shape; };

  switch (node.kind) {
    case OpKind::input:
      expect_inputs(node, 0);
      break;
    case OpKind::dense: {
      expect_inputs(node, 1);
      expect_params(node, param_shapes, 2);
      ops::check_dense_shapes(with_batch(in_shape(0)), param_shapes[0], param_shapes[1]);
      node.sample_shape = {param_shapes[0][1]};
      break;
    }
    case OpKind::conv2d: {
      expect_inputs(node, 1);
      expect_params(node, param_shapes, 1);
      const auto g = ops::conv_geometry(with_batch(in_shape(0)), param_shapes[0], node.attrs.stride,
                                        node.attrs.padding);
      node.sample_shape = {g.out_channels, g.out_h, g.out_w};
      break;
    }
    case OpKind::maxpool2d:
      expect_inputs(node, 1);
      node.sample_shape = without_batch(ops::pool_output_shape(with_batch(in_shape(0)), node.attrs.window,
                                                               node.attrs.stride));
      break;
    case OpKind::flatten:
      expect_inputs(node, 1);
      node.sample_shape = without_batch(ops::flatten_shape(with_batch(in_shape(0))));
      break;
    case OpKind::relu:
      expect_inputs(node, 1);
      node.sample_shape = in_shape(0);
      break;
    case OpKind::dropout:
      expect_inputs(node, 1);
      ops::check_dropout_rate(node.attrs.rate);
      node.sample_shape = in_shape(0);
      break;
    case OpKind::softmax:
      expect_inputs(node, 1);
      ops::normalize_axis(node.attrs.axis, static_cast<Index>(in_shape(0).size()) + 1);
      node.sample_shape = in_shape(0);
      break;
    case OpKind::concatenate: {
      if (node.inputs.empty()) throw ConfigError("concatenate node '" + node.name + "' has no inputs");
      if (node.attrs.axis == 0) throw ConfigError("concatenate node '" + node.name + "' cannot join the batch axis");
      std::vector<Shape> shapes;
      for (std::size_t i = 0; i < node.inputs.size(); ++i) shapes.push_back(with_batch(in_shape(i)));
      node.sample_shape = without_batch(ops::concat_shape(shapes, node.attrs.axis));
      break;
    }
    case OpKind::cross_entropy:
      expect_inputs(node, 2);
      if (in_shape(0) != in_shape(1) || in_shape(0).size() != 1) {
        throw DimensionError("cross_entropy '" + node.name + "': predicted " + shape_string(in_shape(0)) +
                             " and target " + shape_string(in_shape(1)) + " must be equal flat shapes");
      }
      node.sample_shape = {};
      break;
  }
  if (!node.name.empty() && find(node.name)) {
    throw ConfigError("duplicate node name '" + node.name + "'");
  }
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

std::optional<NodeId> Graph::find(std::string_view name) const {
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].name == name) return i;
  }
  return std::nullopt;
}

std::vector<NodeId> Graph::with_role(NodeRole role) const {
  std::vector<NodeId> out;
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].role == role) out.push_back(i);
  }
  return out;
}

std::size_t Graph::count(OpKind kind, NodeRole role) const {
  std::size_t n = 0;
  for (const auto& node : nodes_) n += node.kind == kind && node.role == role;
  return n;
}

std::vector<bool> Graph::ancestors(std::span<const NodeId> targets) const {
  std::vector<bool> seen(nodes_.size(), false);
  std::vector<NodeId> stack(targets.begin(), targets.end());
  while (!stack.empty()) {
    const NodeId id = stack.back();
    stack.pop_back();
    if (seen.at(id)) continue;
    seen[id] = true;
    for (NodeId in : nodes_[id].inputs) stack.push_back(in);
  }
  return seen;
}

}  // namespace mednc
