#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mednc/core/errors.hpp"
#include "mednc/core/ops.hpp"
#include "mednc/core/rng.hpp"
#include "mednc/core/tensor.hpp"

namespace mednc {

using NodeId = std::size_t;
using ParamId = std::size_t;

enum class OpKind {
  input,
  dense,
  conv2d,
  maxpool2d,
  flatten,
  relu,
  dropout,
  softmax,
  concatenate,
  cross_entropy,
};

/// Structural tag a builder attaches to a node; used for inspection
/// (concatenation census, extractor lookup) and serialization.
enum class NodeRole {
  none,
  target,
  extractor,         // output of a frozen feature extractor
  feature_ensemble,  // concatenation of raw extractor features
  fc_ensemble,       // concatenation of hidden fully connected activations
  output_ensemble,   // concatenation of per-branch outputs
  group_output,      // per-branch classifier output feeding an output ensemble
  output,            // final class distribution
  loss,
  auxiliary_loss,
};

std::string_view to_string(OpKind kind);
std::string_view to_string(NodeRole role);
OpKind op_kind_from_string(std::string_view name);
NodeRole node_role_from_string(std::string_view name);

struct OpAttrs {
  Index stride = 1;
  Index padding = 0;
  Index window = 0;
  double rate = 0.0;
  Index axis = 1;
};

struct OpNode {
  OpKind kind = OpKind::input;
  std::vector<NodeId> inputs;
  std::vector<ParamId> params;
  OpAttrs attrs;
  std::string name;
  NodeRole role = NodeRole::none;
  std::string tag;     // e.g. extractor id or group name
  Shape sample_shape;  // shape without the leading batch extent; empty for scalar losses
};

/// A DAG of layer nodes. Nodes may only consume earlier nodes, so insertion
/// order is a topological order and cycles are unrepresentable.
class Graph {
 public:
  /// Validates inputs and attributes, infers the per-sample output shape.
  /// `param_shapes` are the full shapes of `node.params`, in order.
  NodeId add(OpNode node, std::span<const Shape> param_shapes = {});

  const OpNode& node(NodeId id) const { return nodes_.at(id); }
  OpNode& node(NodeId id) { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<OpNode>& nodes() const noexcept { return nodes_; }

  std::optional<NodeId> find(std::string_view name) const;
  std::vector<NodeId> with_role(NodeRole role) const;
  std::size_t count(OpKind kind, NodeRole role) const;

  /// Marks every node reachable backwards from `targets`.
  std::vector<bool> ancestors(std::span<const NodeId> targets) const;

 private:
  std::vector<OpNode> nodes_;
};

enum class InitScheme { he_uniform, glorot_uniform, zeros, external };

std::string_view to_string(InitScheme scheme);
InitScheme init_scheme_from_string(std::string_view name);

template <typename Scalar>
struct ParameterEntry {
  std::string name;
  Tensor<Scalar> tensor;
  bool frozen = false;
  InitScheme init = InitScheme::external;
};

template <typename Scalar>
class ParameterStore {
 public:
  ParamId add(std::string name, Tensor<Scalar> tensor, InitScheme init, bool frozen = false) {
    entries_.push_back({std::move(name), std::move(tensor), frozen, init});
    return entries_.size() - 1;
  }

  /// Creates a parameter initialized by `init`. Fan-in/fan-out follow the
  /// usual conventions for dense (in, out) and conv (out, in, kh, kw) shapes.
  ParamId create(std::string name, Shape shape, InitScheme init, Rng& rng) {
    Tensor<Scalar> t(shape);
    if (init == InitScheme::he_uniform || init == InitScheme::glorot_uniform) {
      Index fan_in = 1, fan_out = 1;
      if (shape.size() == 2) {
        fan_in = shape[0];
        fan_out = shape[1];
      } else if (shape.size() == 4) {
        const Index receptive = shape[2] * shape[3];
        fan_in = shape[1] * receptive;
        fan_out = shape[0] * receptive;
      } else if (shape.size() == 1) {
        fan_in = fan_out = shape[0];
      }
      const double limit = init == InitScheme::he_uniform
                               ? std::sqrt(6.0 / static_cast<double>(fan_in))
                               : std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.uniform(-limit, limit));
    }
    return add(std::move(name), std::move(t), init);
  }

  ParameterEntry<Scalar>& entry(ParamId id) { return entries_.at(id); }
  const ParameterEntry<Scalar>& entry(ParamId id) const { return entries_.at(id); }
  Tensor<Scalar>& tensor(ParamId id) { return entries_.at(id).tensor; }
  const Tensor<Scalar>& tensor(ParamId id) const { return entries_.at(id).tensor; }

  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void freeze(ParamId id) {
    entries_.at(id).frozen = true;
    entries_.at(id).tensor.clear_grad();
  }
  void unfreeze(ParamId id) { entries_.at(id).frozen = false; }
  void freeze_all() {
    for (ParamId i = 0; i < entries_.size(); ++i) freeze(i);
  }

  /// Number of scalar parameters that an optimizer may change.
  Index trainable_count() const {
    Index n = 0;
    for (const auto& e : entries_) n += e.frozen ? 0 : e.tensor.size();
    return n;
  }
  Index total_count() const {
    Index n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

 private:
  std::vector<ParameterEntry<Scalar>> entries_;
};

/// Parameter shapes used by `node`, in node.params order.
template <typename Scalar>
std::vector<Shape> param_shapes(const ParameterStore<Scalar>& store, const OpNode& node) {
  std::vector<Shape> shapes;
  for (ParamId p : node.params) shapes.push_back(store.tensor(p).shape());
  return shapes;
}

namespace debug {
/// Test hook: perturbs the analytic dense weight gradient so the gradient
/// checker can demonstrate that it catches a broken backward pass.
inline std::atomic<bool> corrupt_dense_backward{false};
}  // namespace debug

/// Evaluates a graph against a parameter store and back-propagates.
///
/// Values may be bound to any node, not only inputs; a bound node acts as a
/// leaf and its ancestors are skipped. Trainers use this to inject cached
/// frozen-extractor features.
template <typename Scalar>
class Session {
 public:
  Session(const Graph& graph, ParameterStore<Scalar>& store)
      : graph_(&graph), store_(&store), values_(graph.size()), bound_(graph.size(), false) {}

  void bind(NodeId id, Tensor<Scalar> value) {
    const OpNode& n = graph_->node(id);
    if (value.rank() != static_cast<Index>(n.sample_shape.size()) + 1 ||
        !std::equal(n.sample_shape.begin(), n.sample_shape.end(), value.shape().begin() + 1)) {
      throw DimensionError("binding for node '" + n.name + "' has shape " + shape_string(value.shape()) +
                           ", expected (batch, ...) with per-sample shape " + shape_string(n.sample_shape));
    }
    values_[id] = std::move(value);
    bound_[id] = true;
    evaluated_ = false;
  }

  void unbind_all() {
    std::fill(bound_.begin(), bound_.end(), false);
    for (auto& v : values_) v.reset();
    evaluated_ = false;
  }

  /// Requests the gradient with respect to a node's value (e.g. an input)
  /// to be kept after backward().
  void keep_grad(NodeId id) { keep_.push_back(id); }

  void forward(NodeId target, ops::Mode mode, Rng* rng = nullptr) {
    const NodeId t[] = {target};
    forward(std::span<const NodeId>(t), mode, rng);
  }

  void forward(std::span<const NodeId> targets, ops::Mode mode, Rng* rng = nullptr) {
    needed_ = needed_nodes(targets);
    masks_.assign(graph_->size(), {});
    argmax_.assign(graph_->size(), {});
    for (NodeId id = 0; id < graph_->size(); ++id) {
      if (!bound_[id]) values_[id].reset();
    }
    for (NodeId id = 0; id < graph_->size(); ++id) {
      if (!needed_[id] || bound_[id]) continue;
      evaluate_node(id, mode, rng);
    }
    evaluated_ = true;
  }

  bool has_value(NodeId id) const { return values_.at(id).has_value(); }

  const Tensor<Scalar>& value(NodeId id) const {
    if (!values_.at(id)) {
      throw StateError("node '" + graph_->node(id).name + "' has not been evaluated");
    }
    return *values_[id];
  }

  /// Back-propagates from a scalar loss node.
  void backward(NodeId loss) {
    const NodeId l[] = {loss};
    backward(std::span<const NodeId>(l));
  }

  /// Back-propagates the sum of several scalar losses.
  void backward(std::span<const NodeId> losses) {
    std::vector<std::pair<NodeId, Tensor<Scalar>>> seeds;
    for (NodeId l : losses) {
      const auto& v = value(l);
      if (v.size() != 1) throw ContractError("backward: node '" + graph_->node(l).name + "' is not scalar");
      seeds.emplace_back(l, Tensor<Scalar>::constant(v.shape(), Scalar(1)));
    }
    run_backward(seeds);
  }

  /// Back-propagates an explicit output cotangent, for non-scalar nodes.
  void backward(NodeId node, const Tensor<Scalar>& seed) {
    if (seed.shape() != value(node).shape()) {
      throw DimensionError("backward seed shape " + shape_string(seed.shape()) + " differs from node value " +
                           shape_string(value(node).shape()));
    }
    run_backward({{node, seed}});
  }

  /// Gradient retained for a node registered with keep_grad().
  const Tensor<Scalar>& grad(NodeId id) const {
    if (!grads_.at(id)) throw StateError("no gradient retained for node '" + graph_->node(id).name + "'");
    return *grads_[id];
  }

 private:
  std::vector<bool> needed_nodes(std::span<const NodeId> targets) const {
    std::vector<bool> need(graph_->size(), false);
    std::vector<NodeId> stack(targets.begin(), targets.end());
    while (!stack.empty()) {
      const NodeId id = stack.back();
      stack.pop_back();
      if (need.at(id)) continue;
      need[id] = true;
      if (bound_[id]) continue;
      for (NodeId in : graph_->node(id).inputs) stack.push_back(in);
    }
    return need;
  }

  const Tensor<Scalar>& in(const OpNode& n, std::size_t i) const { return *values_[n.inputs[i]]; }
  const Tensor<Scalar>& param(const OpNode& n, std::size_t i) const { return store_->tensor(n.params[i]); }

  void evaluate_node(NodeId id, ops::Mode mode, Rng* rng) {
    const OpNode& n = graph_->node(id);
    switch (n.kind) {
      case OpKind::input:
        throw StateError("input node '" + n.name + "' is not bound");
      case OpKind::dense:
        values_[id] = ops::dense(in(n, 0), param(n, 0), param(n, 1));
        break;
      case OpKind::conv2d:
        values_[id] = ops::conv2d(in(n, 0), param(n, 0), n.attrs.stride, n.attrs.padding);
        break;
      case OpKind::maxpool2d: {
        auto r = ops::maxpool2d(in(n, 0), n.attrs.window, n.attrs.stride);
        values_[id] = std::move(r.output);
        argmax_[id] = std::move(r.argmax);
        break;
      }
      case OpKind::flatten:
        values_[id] = ops::flatten(in(n, 0));
        break;
      case OpKind::relu:
        values_[id] = ops::relu(in(n, 0));
        break;
      case OpKind::dropout: {
        auto r = ops::dropout(in(n, 0), n.attrs.rate, mode, rng);
        values_[id] = std::move(r.output);
        masks_[id] = std::move(r.mask);
        break;
      }
      case OpKind::softmax:
        values_[id] = ops::softmax(in(n, 0), n.attrs.axis);
        break;
      case OpKind::concatenate: {
        std::vector<const Tensor<Scalar>*> parts;
        for (std::size_t i = 0; i < n.inputs.size(); ++i) parts.push_back(&in(n, i));
        values_[id] = ops::concatenate<Scalar>(parts, n.attrs.axis);
        break;
      }
      case OpKind::cross_entropy: {
        const Scalar loss = ops::cross_entropy(in(n, 0), in(n, 1));
        values_[id] = Tensor<Scalar>(Shape{}, {loss});
        break;
      }
    }
  }

  void accumulate(NodeId id, Tensor<Scalar> g) {
    if (grads_[id]) {
      grads_[id]->values() += g.values();
    } else {
      grads_[id] = std::move(g);
    }
  }

  void accumulate_param(ParamId id, const Tensor<Scalar>& g) {
    auto& e = store_->entry(id);
    if (!e.frozen) e.tensor.grad() += g.values();
  }

  void run_backward(const std::vector<std::pair<NodeId, Tensor<Scalar>>>& seeds) {
    if (!evaluated_) throw StateError("backward called before forward");
    for (const auto& [node, seed] : seeds) {
      if (!values_[node]) throw StateError("backward from unevaluated node '" + graph_->node(node).name + "'");
    }

    // Fresh gradient every call; frozen entries carry none.
    for (auto& e : *store_) {
      if (e.frozen) {
        e.tensor.clear_grad();
      } else {
        e.tensor.zero_grad();
      }
    }

    const std::size_t n_nodes = graph_->size();
    std::vector<bool> wants(n_nodes, false);
    for (NodeId k : keep_) wants[k] = true;
    for (NodeId id = 0; id < n_nodes; ++id) {
      if (!values_[id]) continue;
      const OpNode& n = graph_->node(id);
      if (bound_[id]) continue;
      for (ParamId p : n.params) wants[id] = wants[id] || !store_->entry(p).frozen;
      for (NodeId i : n.inputs) wants[id] = wants[id] || wants[i];
    }

    grads_.assign(n_nodes, std::nullopt);
    for (const auto& [node, seed] : seeds) {
      if (wants[node]) accumulate(node, seed);
    }

    for (NodeId id = n_nodes; id-- > 0;) {
      if (!grads_[id] || bound_[id]) continue;
      const OpNode& n = graph_->node(id);
      const Tensor<Scalar>& g = *grads_[id];
      auto want_input = [&](std::size_t i) { return wants[n.inputs[i]]; };
      auto want_param = [&](std::size_t i) { return !store_->entry(n.params[i]).frozen; };

      switch (n.kind) {
        case OpKind::input:
          break;
        case OpKind::dense: {
          auto dg = ops::dense_backward(in(n, 0), param(n, 0), g);
          if (debug::corrupt_dense_backward.load()) dg.w.values() *= Scalar(1.1);
          if (want_param(0)) accumulate_param(n.params[0], dg.w);
          if (want_param(1)) accumulate_param(n.params[1], dg.b);
          if (want_input(0)) accumulate(n.inputs[0], std::move(dg.x));
          break;
        }
        case OpKind::conv2d: {
          if (!want_param(0) && !want_input(0)) break;
          auto cg = ops::conv2d_backward(in(n, 0), param(n, 0), g, n.attrs.stride, n.attrs.padding, want_input(0));
          if (want_param(0)) accumulate_param(n.params[0], cg.kernel);
          if (want_input(0)) accumulate(n.inputs[0], std::move(cg.x));
          break;
        }
        case OpKind::maxpool2d:
          if (want_input(0)) accumulate(n.inputs[0], ops::maxpool2d_backward(in(n, 0).shape(), argmax_[id], g));
          break;
        case OpKind::flatten:
          if (want_input(0)) accumulate(n.inputs[0], g.reshaped(in(n, 0).shape()));
          break;
        case OpKind::relu:
          if (want_input(0)) accumulate(n.inputs[0], ops::relu_backward(in(n, 0), g));
          break;
        case OpKind::dropout:
          if (want_input(0)) accumulate(n.inputs[0], ops::dropout_backward(masks_[id], g));
          break;
        case OpKind::softmax:
          if (want_input(0)) accumulate(n.inputs[0], ops::softmax_backward(*values_[id], g, n.attrs.axis));
          break;
        case OpKind::concatenate: {
          std::vector<Shape> shapes;
          for (NodeId i : n.inputs) shapes.push_back(values_[i]->shape());
          auto parts = ops::split(g, std::span<const Shape>(shapes), n.attrs.axis);
          for (std::size_t i = 0; i < parts.size(); ++i) {
            if (want_input(i)) accumulate(n.inputs[i], std::move(parts[i]));
          }
          break;
        }
        case OpKind::cross_entropy:
          if (want_input(0)) accumulate(n.inputs[0], ops::cross_entropy_backward(in(n, 0), in(n, 1), g[0]));
          break;
      }
    }

    // Intermediate gradients are dropped except the ones explicitly kept.
    std::vector<bool> keep(n_nodes, false);
    for (NodeId k : keep_) keep[k] = true;
    for (NodeId id = 0; id < n_nodes; ++id) {
      if (!keep[id]) grads_[id].reset();
    }
  }

  const Graph* graph_;
  ParameterStore<Scalar>* store_;
  std::vector<std::optional<Tensor<Scalar>>> values_;
  std::vector<std::optional<Tensor<Scalar>>> grads_;
  std::vector<bool> bound_;
  std::vector<bool> needed_;
  std::vector<Vector<Scalar>> masks_;
  std::vector<std::vector<Index>> argmax_;
  std::vector<NodeId> keep_;
  bool evaluated_ = false;
};

/// Convenience layer over Graph + ParameterStore that creates parameters
/// with the right shapes and init schemes while adding nodes.
template <typename Scalar>
class GraphBuilder {
 public:
  GraphBuilder(Graph& graph, ParameterStore<Scalar>& store, Rng& rng) : graph_(graph), store_(store), rng_(rng) {}

  NodeId input(std::string name, Shape sample_shape, NodeRole role = NodeRole::none, std::string tag = {}) {
    OpNode n;
    n.kind = OpKind::input;
    n.name = std::move(name);
    n.sample_shape = std::move(sample_shape);
    n.role = role;
    n.tag = std::move(tag);
    return graph_.add(std::move(n));
  }

  /// Adds dense(units); He-uniform weights when a ReLU follows, Glorot otherwise.
  NodeId dense(NodeId x, Index units, bool relu_follows, std::string name) {
    const Shape& in = graph_.node(x).sample_shape;
    if (in.size() != 1) {
      throw DimensionError("dense '" + name + "' expects flat input, got per-sample shape " + shape_string(in));
    }
    if (units < 1) throw ConfigError("dense '" + name + "' needs at least one unit");
    const auto init = relu_follows ? InitScheme::he_uniform : InitScheme::glorot_uniform;
    const ParamId w = store_.create(name + ".W", {in[0], units}, init, rng_);
    const ParamId b = store_.create(name + ".b", {units}, InitScheme::zeros, rng_);
    return add(OpKind::dense, {x}, {w, b}, {}, std::move(name));
  }

  NodeId conv2d(NodeId x, Tensor<Scalar> kernel, Index stride, Index padding, std::string name, bool frozen) {
    const ParamId k = store_.add(name + ".K", std::move(kernel), InitScheme::external, frozen);
    OpAttrs a;
    a.stride = stride;
    a.padding = padding;
    return add(OpKind::conv2d, {x}, {k}, a, std::move(name));
  }

  NodeId maxpool2d(NodeId x, Index window, Index stride, std::string name) {
    OpAttrs a;
    a.window = window;
    a.stride = stride;
    return add(OpKind::maxpool2d, {x}, {}, a, std::move(name));
  }

  NodeId flatten(NodeId x, std::string name) { return add(OpKind::flatten, {x}, {}, {}, std::move(name)); }
  NodeId relu(NodeId x, std::string name) { return add(OpKind::relu, {x}, {}, {}, std::move(name)); }

  NodeId dropout(NodeId x, double rate, std::string name) {
    OpAttrs a;
    a.rate = rate;
    return add(OpKind::dropout, {x}, {}, a, std::move(name));
  }

  NodeId softmax(NodeId x, std::string name) {
    OpAttrs a;
    a.axis = 1;
    return add(OpKind::softmax, {x}, {}, a, std::move(name));
  }

  NodeId concatenate(std::vector<NodeId> parts, std::string name, NodeRole role) {
    OpAttrs a;
    a.axis = 1;
    const NodeId id = add(OpKind::concatenate, std::move(parts), {}, a, std::move(name));
    graph_.node(id).role = role;
    return id;
  }

  NodeId cross_entropy(NodeId predicted, NodeId target, std::string name, NodeRole role = NodeRole::loss) {
    const NodeId id = add(OpKind::cross_entropy, {predicted, target}, {}, {}, std::move(name));
    graph_.node(id).role = role;
    return id;
  }

  NodeId add(OpKind kind, std::vector<NodeId> inputs, std::vector<ParamId> params, OpAttrs attrs, std::string name) {
    OpNode n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.params = std::move(params);
    n.attrs = attrs;
    n.name = std::move(name);
    const auto shapes = param_shapes(store_, n);
    return graph_.add(std::move(n), shapes);
  }

  Graph& graph() { return graph_; }
  ParameterStore<Scalar>& store() { return store_; }
  Rng& rng() { return rng_; }

 private:
  Graph& graph_;
  ParameterStore<Scalar>& store_;
  Rng& rng_;
};

}  // namespace mednc
