#pragma once

// Central finite-difference verification of the analytic backward pass.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mednc/core/graph.hpp"
#include "mednc/core/rng.hpp"

namespace mednc::gradcheck {

/// ||a - n||_inf / max(||a||_inf, ||n||_inf); 0 when both vanish.
template <typename Scalar>
double relative_error(const Vector<Scalar>& analytic, const Vector<Scalar>& numeric) {
  if (analytic.size() != numeric.size()) throw DimensionError("relative_error: size mismatch");
  if (analytic.size() == 0) return 0.0;
  const double diff = (analytic - numeric).template lpNorm<Eigen::Infinity>();
  const double scale = std::max(analytic.template lpNorm<Eigen::Infinity>(), numeric.template lpNorm<Eigen::Infinity>());
  return scale == 0.0 ? 0.0 : diff / scale;
}

template <typename Scalar>
constexpr Scalar default_step() {
  return std::is_same_v<Scalar, float> ? Scalar(5e-3) : Scalar(1e-5);
}

/// One differentiable scenario: a graph, its parameters, input bindings and
/// the node whose (optionally weighted) value is the objective.
template <typename Scalar>
struct Case {
  Graph graph;
  ParameterStore<Scalar> store;
  std::vector<std::pair<NodeId, Tensor<Scalar>>> bindings;
  NodeId objective = 0;
  std::optional<Tensor<Scalar>> weights;  // objective = <weights, value> when set
  std::vector<NodeId> check_inputs;       // bound nodes whose gradient is also verified
  ops::Mode mode = ops::Mode::eval;
  std::uint64_t dropout_seed = 0;
};

template <typename Scalar>
Scalar evaluate_objective(Case<Scalar>& c) {
  Session<Scalar> s(c.graph, c.store);
  for (auto& [node, value] : c.bindings) s.bind(node, value);
  Rng rng(c.dropout_seed);
  s.forward(c.objective, c.mode, &rng);
  const auto& v = s.value(c.objective);
  return c.weights ? v.values().dot(c.weights->values()) : v.values().sum();
}

/// Compares analytic gradients for every trainable parameter and every
/// node in check_inputs against central differences; returns the largest
/// relative error over all checked tensors.
template <typename Scalar>
double check_case(Case<Scalar>& c, Scalar h = default_step<Scalar>()) {
  std::vector<Vector<Scalar>> analytic;
  {
    Session<Scalar> s(c.graph, c.store);
    for (auto& [node, value] : c.bindings) s.bind(node, value);
    for (NodeId n : c.check_inputs) s.keep_grad(n);
    Rng rng(c.dropout_seed);
    s.forward(c.objective, c.mode, &rng);
    const auto& v = s.value(c.objective);
    s.backward(c.objective, c.weights ? *c.weights : Tensor<Scalar>::constant(v.shape(), Scalar(1)));
    for (const auto& e : c.store) {
      if (!e.frozen) analytic.push_back(e.tensor.grad());
    }
    for (NodeId n : c.check_inputs) analytic.push_back(s.grad(n).values());
  }

  auto numeric_for = [&](Vector<Scalar>& x) {
    Vector<Scalar> g(x.size());
    for (Index i = 0; i < x.size(); ++i) {
      const Scalar saved = x[i];
      x[i] = saved + h;
      const Scalar up = evaluate_objective(c);
      x[i] = saved - h;
      const Scalar down = evaluate_objective(c);
      x[i] = saved;
      g[i] = (up - down) / (Scalar(2) * h);
    }
    return g;
  };

  double worst = 0.0;
  std::size_t k = 0;
  for (ParamId id = 0; id < c.store.size(); ++id) {
    auto& e = c.store.entry(id);
    if (e.frozen) continue;
    worst = std::max(worst, relative_error<Scalar>(analytic[k++], numeric_for(e.tensor.values())));
  }
  for (NodeId n : c.check_inputs) {
    auto it = std::find_if(c.bindings.begin(), c.bindings.end(), [&](const auto& b) { return b.first == n; });
    if (it == c.bindings.end()) throw StateError("gradcheck: checked input is not bound");
    worst = std::max(worst, relative_error<Scalar>(analytic[k++], numeric_for(it->second.values())));
  }
  return worst;
}

struct Row {
  std::string op;
  int instances = 0;
  double max_rel_error = 0.0;
  double threshold = 0.0;
  bool passed = false;
};

struct Options {
  int instances = 20;
  std::uint64_t seed = 20240601;
};

namespace detail {

inline Shape batched(Index batch, const Shape& sample) {
  Shape s{batch};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

template <typename Scalar>
Tensor<Scalar> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.uniform(lo, hi));
  return t;
}

/// Values bounded away from zero by `gap` (ReLU kink).
template <typename Scalar>
Tensor<Scalar> away_from_zero(Shape shape, Rng& rng, double gap) {
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) {
    const double mag = rng.uniform(gap, 1.0);
    t[i] = static_cast<Scalar>(rng.uniform() < 0.5 ? -mag : mag);
  }
  return t;
}

/// Pairwise distinct values with spacing >= 0.04 (max-pool ties).
template <typename Scalar>
Tensor<Scalar> distinct_values(Shape shape, Rng& rng) {
  Tensor<Scalar> t(std::move(shape));
  std::vector<Index> order(static_cast<std::size_t>(t.size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Index>(i);
  rng.shuffle(order.begin(), order.end());
  for (Index i = 0; i < t.size(); ++i) {
    t[i] = static_cast<Scalar>(0.05 * static_cast<double>(order[static_cast<std::size_t>(i)]) + rng.uniform(0.0, 0.01) - 1.0);
  }
  return t;
}

template <typename Scalar>
double strict_threshold() {
  return std::is_same_v<Scalar, float> ? 1e-2 : 1e-6;
}
template <typename Scalar>
double loose_threshold() {
  return std::is_same_v<Scalar, float> ? 1e-2 : 1e-4;
}

template <typename Scalar>
Row run(const std::string& op, int instances, double threshold, const std::function<Case<Scalar>(Rng&, int)>& make,
        Rng& rng) {
  Row row{op, instances, 0.0, threshold, false};
  for (int i = 0; i < instances; ++i) {
    Case<Scalar> c = make(rng, i);
    row.max_rel_error = std::max(row.max_rel_error, check_case(c));
  }
  row.passed = row.max_rel_error < threshold;
  return row;
}

template <typename Scalar>
Tensor<Scalar> one_hot_rows(Index batch, Index k, Rng& rng) {
  Tensor<Scalar> t(Shape{batch, k});
  for (Index b = 0; b < batch; ++b) t[b * k + static_cast<Index>(rng.below(static_cast<std::uint64_t>(k)))] = Scalar(1);
  return t;
}

}  // namespace detail

/// Finite-difference checks over all nine primitive kinds.
template <typename Scalar>
std::vector<Row> op_suite(const Options& opt = {}) {
  using detail::random_tensor;
  Rng rng(opt.seed);
  const int n = opt.instances;
  const double strict = detail::strict_threshold<Scalar>();
  const double loose = detail::loose_threshold<Scalar>();
  const double kink_gap = std::is_same_v<Scalar, float> ? 0.05 : 1e-3;
  std::vector<Row> rows;

  rows.push_back(detail::run<Scalar>("dense", n, strict, [](Rng& r, int i) {
    Case<Scalar> c;
    const Index batch = 2 + i % 3, din = 3 + i % 4, dout = 1 + i % 3;
    Rng init(r.next());
    GraphBuilder<Scalar> b(c.graph, c.store, init);
    const NodeId x = b.input("x", {din});
    const NodeId y = b.dense(x, dout, false, "fc");
    c.store.tensor(1) = random_tensor<Scalar>({dout}, r);
    c.bindings.emplace_back(x, random_tensor<Scalar>({batch, din}, r));
    c.objective = y;
    c.weights = random_tensor<Scalar>({batch, dout}, r);
    c.check_inputs = {x};
    return c;
  }, rng));

  rows.push_back(detail::run<Scalar>("conv2d", n, loose, [](Rng& r, int i) {
    Case<Scalar> c;
    Rng init(r.next());
    GraphBuilder<Scalar> b(c.graph, c.store, init);
    const Index stride = 1 + i % 2, padding = i % 3 == 0 ? 1 : 0;
    const NodeId x = b.input("x", {2, 5, 5});
    const NodeId y = b.conv2d(x, random_tensor<Scalar>({3, 2, 3, 3}, r), stride, padding, "conv", false);
    c.bindings.emplace_back(x, random_tensor<Scalar>({2, 2, 5, 5}, r));
    c.objective = y;
    c.weights = random_tensor<Scalar>(detail::batched(2, c.graph.node(y).sample_shape), r);
    c.check_inputs = {x};
    return c;
  }, rng));

  rows.push_back(detail::run<Scalar>("maxpool2d", n, loose, [](Rng& r, int i) {
    Case<Scalar> c;
    Rng init(r.next());
    GraphBuilder<Scalar> b(c.graph, c.store, init);
    const Index window = 2 + i % 2, stride = 1 + i % 2;
    const NodeId x = b.input("x", {2, 6, 6});
    const NodeId y = b.maxpool2d(x, window, stride, "pool");
    c.bindings.emplace_back(x, detail::distinct_values<Scalar>({2, 2, 6, 6}, r));
    c.objective = y;
    c.weights = random_tensor<Scalar>(detail::batched(2, c.graph.node(y).sample_shape), r);
    c.check_inputs = {x};
    return c;
  }, rng));

  rows.push_back(detail::run<Scalar>("flatten", n, loose, [](Rng& r, int) {
    Case<Scalar> c;
    Rng init(r.next());
    GraphBuilder<Scalar> b(c.graph, c.store, init);
    const NodeId x = b.input("x", {2, 3, 3});
    const NodeId y = b.flatten(x, "flat");
    c.bindings.emplace_back(x, random_tensor<Scalar>({4, 2, 3, 3}, r));
    c.objective = y;
    c.weights = random_tensor<Scalar>({4, 18}, r);
    c.check_inputs = {x};
    return c;
  }, rng));

  rows.push_back(detail::run<Scalar>("relu", n, loose, [kink_gap](Rng& r, int) {
    Case<Scalar> c;
    Rng init(r.next());
    GraphBuilder<Scalar> b(c.graph, c.store, init);
    const NodeId x = b.input("x", {7});
    const NodeId y = b.relu(x, "relu");
    c.bindings.emplace_back(x, detail::away_from_zero<Scalar>({3, 7}, r, kink_gap));
    c.objective = y;
    c.weights = random_tensor<Scalar>({3, 7}, r);
    c.check_inputs = {x};
    return c;
  }, rng));

  rows.push_back(detail::run<Scalar>("dropout", n, loose, [](Rng& r, int) {
    Case<Scalar> c;
    Rng init(r.next());
    GraphBuilder<Scalar> b(c.graph, c.store, init);
    const NodeId x = b.input("x", {9});
    const NodeId y = b.dropout(x, 0.5, "drop");
    c.bindings.emplace_back(x, random_tensor<Scalar>({3, 9}, r));
    c.objective = y;
    c.weights = random_tensor<Scalar>({3, 9}, r);
    c.check_inputs = {x};
    c.mode = ops::Mode::train;
    c.dropout_seed = r.next();
    return c;
  }, rng));

  rows.push_back(detail::run<Scalar>("softmax", n, strict, [](Rng& r, int i) {
    Case<Scalar> c;
    Rng init(r.next());
    GraphBuilder<Scalar> b(c.graph, c.store, init);
    const Index k = 2 + i % 4;
    const NodeId x = b.input("x", {k});
    const NodeId y = b.softmax(x, "softmax");
    c.bindings.emplace_back(x, random_tensor<Scalar>({3, k}, r, -2.0, 2.0));
    c.objective = y;
    c.weights = random_tensor<Scalar>({3, k}, r);
    c.check_inputs = {x};
    return c;
  }, rng));

  rows.push_back(detail::run<Scalar>("concatenate", n, strict, [](Rng& r, int i) {
    Case<Scalar> c;
    Rng init(r.next());
    GraphBuilder<Scalar> b(c.graph, c.store, init);
    const Index d1 = 1 + i % 3, d2 = 2 + i % 4;
    const NodeId x1 = b.input("a", {d1});
    const NodeId x2 = b.input("b", {d2});
    const NodeId y = b.concatenate({x1, x2}, "cat", NodeRole::none);
    c.bindings.emplace_back(x1, random_tensor<Scalar>({3, d1}, r));
    c.bindings.emplace_back(x2, random_tensor<Scalar>({3, d2}, r));
    c.objective = y;
    c.weights = random_tensor<Scalar>({3, d1 + d2}, r);
    c.check_inputs = {x1, x2};
    return c;
  }, rng));

  // Cross-entropy requires probability rows, so it is checked through the
  // softmax that always precedes it.
  rows.push_back(detail::run<Scalar>("cross_entropy", n, strict, [](Rng& r, int i) {
    Case<Scalar> c;
    Rng init(r.next());
    GraphBuilder<Scalar> b(c.graph, c.store, init);
    const Index k = 2 + i % 3, batch = 2 + i % 4;
    const NodeId x = b.input("logits", {k});
    const NodeId t = b.input("target", {k}, NodeRole::target);
    const NodeId p = b.softmax(x, "softmax");
    const NodeId loss = b.cross_entropy(p, t, "ce");
    c.bindings.emplace_back(x, random_tensor<Scalar>({batch, k}, r, -2.0, 2.0));
    c.bindings.emplace_back(t, detail::one_hot_rows<Scalar>(batch, k, r));
    c.objective = loss;
    c.check_inputs = {x};
    return c;
  }, rng));

  return rows;
}

}  // namespace mednc::gradcheck
