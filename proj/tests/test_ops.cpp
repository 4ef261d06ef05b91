#include <doctest.h>

#include <cmath>
#include <vector>

#include "mednc/core/gradcheck.hpp"
#include "mednc/core/graph.hpp"
#include "mednc/core/ops.hpp"
#include "mednc/core/optimizer.hpp"

using namespace mednc;
using doctest::Approx;

namespace {

Tensord random(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  Tensord t(std::move(s));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Test-local central difference of a scalar function of one variable.
template <typename F>
double central_difference(F f, double x, double h = 1e-6) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

}  // namespace

TEST_CASE("relu sign cases and subgradient") {
  Tensord x({3}, {-1.0, 0.0, 2.0});
  CHECK(ops::relu(x) == Tensord({3}, {0.0, 0.0, 2.0}));

  Tensord pos({4}, {0.5, 1.0, 2.0, 3.0});
  CHECK(ops::relu(pos) == pos);

  auto relu_scalar = [](double v) { return ops::relu(Tensord({1}, {v}))[0]; };
  for (double at : {3.5, -3.5}) {
    const double fd = central_difference(relu_scalar, at);
    const double analytic = ops::relu_backward(Tensord({1}, {at}), Tensord({1}, {1.0}))[0];
    CHECK(analytic == Approx(fd).epsilon(1e-9));
  }
  CHECK(central_difference(relu_scalar, 3.5) == Approx(1.0));
  CHECK(central_difference(relu_scalar, -3.5) == Approx(0.0));
  CHECK(ops::relu_backward(Tensord({1}, {0.0}), Tensord({1}, {1.0}))[0] == 0.0);

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    CHECK((ops::relu(random({5, 5}, rng)).values().array() >= 0.0).all());
  }
}

TEST_CASE("softmax values, normalization and shift invariance") {
  auto s = ops::softmax(Tensord({1, 2}, {0.0, 0.0}), 1);
  CHECK(s[0] == Approx(0.5));
  CHECK(s[1] == Approx(0.5));

  s = ops::softmax(Tensord({1, 2}, {std::log(3.0), 0.0}), 1);
  CHECK(s[0] == Approx(0.75).epsilon(1e-14));
  CHECK(s[1] == Approx(0.25).epsilon(1e-14));

  for (double c : {-1000.0, 0.0, 7.5, 1000.0}) {
    s = ops::softmax(Tensord({1, 3}, {c, c, c}), 1);
    for (int i = 0; i < 3; ++i) CHECK(s[i] == Approx(1.0 / 3.0).epsilon(1e-14));
  }

  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensord x = random({4, 5}, rng, -20, 20);
    const auto y = ops::softmax(x, 1);
    for (Index r = 0; r < 4; ++r) CHECK(std::abs(y.matrix().row(r).sum() - 1.0) < 1e-12);
    Tensord shifted = x;
    shifted.values().array() += rng.uniform(-50, 50);
    const auto y2 = ops::softmax(shifted, 1);
    CHECK((y.values() - y2.values()).lpNorm<Eigen::Infinity>() < 1e-12);
  }

  // Non-trailing axis.
  const auto y = ops::softmax(Tensord({2, 2}, {0.0, 1.0, 0.0, 1.0}), 0);
  CHECK(y[0] == Approx(0.5));
  CHECK(y[3] == Approx(0.5));
}

TEST_CASE("dense forward and shape errors") {
  Tensord x({1, 2}, {1, 2});
  Tensord eye({2, 2}, {1, 0, 0, 1});
  CHECK(ops::dense(x, eye, Tensord({2}, {0, 0})) == Tensord({1, 2}, {1, 2}));

  auto y = ops::dense(Tensord({1, 2}, {1, 1}), Tensord({2, 1}, {2, 3}), Tensord({1}, {0.5}));
  CHECK(y.shape() == Shape{1, 1});
  CHECK(y[0] == 5.5);

  try {
    ops::dense(Tensord({1, 3}), eye, Tensord({2}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(1, 3)") != std::string::npos);
    CHECK(msg.find("(2, 2)") != std::string::npos);
  }
}

TEST_CASE("dense weight gradient of sum(output) matches finite differences") {
  Rng rng(5);
  const Tensord x = random({3, 4}, rng);
  Tensord w = random({4, 2}, rng);
  const Tensord b = random({2}, rng);
  const auto analytic = ops::dense_backward(x, w, Tensord::constant({3, 2}, 1.0)).w;
  for (Index i = 0; i < w.size(); ++i) {
    auto f = [&](double v) {
      Tensord wp = w;
      wp[i] = v;
      return ops::dense(x, wp, b).values().sum();
    };
    const double fd = central_difference(f, w[i], 1e-5);
    CHECK(std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)) < 1e-6);
  }
}

TEST_CASE("conv2d examples") {
  Rng rng(9);
  const Tensord x = random({2, 1, 4, 4}, rng);
  const auto same = ops::conv2d(x, Tensord({1, 1, 1, 1}, {1.0}), 1, 0);
  CHECK(same == x);

  const auto four = ops::conv2d(Tensord::constant({1, 1, 2, 2}, 1.0), Tensord::constant({1, 1, 2, 2}, 1.0), 1, 0);
  CHECK(four.shape() == Shape{1, 1, 1, 1});
  CHECK(four[0] == 4.0);

  // Output extent follows floor((H + 2p - k)/s) + 1.
  const auto strided = ops::conv2d(Tensord({1, 1, 7, 6}), Tensord({2, 1, 3, 3}), 2, 1);
  CHECK(strided.shape() == Shape{1, 2, 4, 3});

  CHECK_THROWS_AS(ops::conv2d(Tensord({1, 1, 2, 2}), Tensord({1, 1, 3, 3}), 1, 0), DimensionError);
  CHECK_NOTHROW(ops::conv2d(Tensord({1, 1, 2, 2}), Tensord({1, 1, 3, 3}), 1, 1));
}

TEST_CASE("maxpool2d examples and tie routing") {
  const auto r = ops::maxpool2d(Tensord({1, 1, 2, 2}, {1, 2, 3, 4}), 2, 2);
  CHECK(r.output == Tensord({1, 1, 1, 1}, {4}));

  Rng rng(2);
  const Tensord img = random({1, 1, 5, 5}, rng);
  CHECK(ops::maxpool2d(img, 5, 1).output[0] == img.values().maxCoeff());

  const auto c = ops::maxpool2d(Tensord::constant({1, 2, 4, 4}, 0.7), 2, 2);
  CHECK((c.output.values().array() == 0.7).all());

  // First maximal element in row-major order receives the gradient.
  const auto tie = ops::maxpool2d(Tensord::constant({1, 1, 2, 2}, 1.0), 2, 2);
  const auto g = ops::maxpool2d_backward<double>({1, 1, 2, 2}, tie.argmax, Tensord({1, 1, 1, 1}, {1.0}));
  CHECK(g == Tensord({1, 1, 2, 2}, {1, 0, 0, 0}));

  CHECK_THROWS_AS(ops::maxpool2d(Tensord({1, 1, 2, 2}), 3, 1), DimensionError);
}

TEST_CASE("flatten shapes and round trip") {
  Rng rng(4);
  const Tensord x = random({4, 2, 3, 3}, rng);
  const auto f = ops::flatten(x);
  CHECK(f.shape() == Shape{4, 18});
  CHECK(ops::flatten(f) == f);
  CHECK(f.reshaped(x.shape()) == x);
}

TEST_CASE("dropout modes, validation and expectation") {
  Rng rng(8);
  const Tensord x = random({3, 4}, rng);
  CHECK(ops::dropout(x, 0.0, ops::Mode::train, &rng).output == x);
  CHECK(ops::dropout(x, 0.0, ops::Mode::eval, &rng).output == x);
  CHECK(ops::dropout(x, 0.5, ops::Mode::eval, nullptr).output == x);
  CHECK_THROWS_AS(ops::dropout(x, 1.0, ops::Mode::train, &rng), ConfigError);
  CHECK_THROWS_AS(ops::dropout(x, -0.1, ops::Mode::train, &rng), ConfigError);

  // Monte Carlo oracle: mean over 1e5 masks within 2% of the input.
  const Tensord c = Tensord::constant({1, 8}, 1.5);
  Vector<double> sum = Vector<double>::Zero(8);
  const int draws = 100000;
  Rng mc(1234);
  for (int i = 0; i < draws; ++i) sum += ops::dropout(c, 0.5, ops::Mode::train, &mc).output.values();
  for (Index i = 0; i < 8; ++i) CHECK(std::abs(sum[i] / draws - 1.5) / 1.5 < 0.02);
}

TEST_CASE("concatenate shapes, identity, errors and split round trip") {
  Rng rng(6);
  const Tensord a = random({3, 2}, rng), b = random({3, 5}, rng);
  const Tensord* parts[] = {&a, &b};
  const auto joined = ops::concatenate<double>(parts, 1);
  CHECK(joined.shape() == Shape{3, 7});

  const Tensord* single[] = {&a};
  CHECK(ops::concatenate<double>(single, 1) == a);

  const Tensord bad = random({2, 5}, rng);
  const Tensord* wrong[] = {&a, &bad};
  try {
    ops::concatenate<double>(wrong, 1);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("part 1") != std::string::npos);
  }

  for (int trial = 0; trial < 20; ++trial) {
    const Index d1 = 1 + trial % 4, d2 = 1 + trial % 3;
    const Tensord p = random({2, 3, d1}, rng), q = random({2, 3, d2}, rng);
    const Tensord* pq[] = {&p, &q};
    const auto cat = ops::concatenate<double>(pq, 2);
    const Shape shapes[] = {p.shape(), q.shape()};
    const auto back = ops::split(cat, std::span<const Shape>(shapes), 2);
    CHECK(back[0] == p);
    CHECK(back[1] == q);
  }
}

TEST_CASE("cross-entropy values and contract") {
  Tensord t({2, 2}, {1, 0, 0, 1});
  CHECK(ops::cross_entropy(t, t) == 0.0);
  CHECK(ops::cross_entropy(Tensord({1, 2}, {0.5, 0.5}), Tensord({1, 2}, {1, 0})) ==
        Approx(std::log(2.0)).epsilon(1e-14));
  // log clamp at 1e-12
  CHECK(ops::cross_entropy(Tensord({1, 2}, {0.0, 1.0}), Tensord({1, 2}, {1, 0})) ==
        Approx(-std::log(1e-12)));
  CHECK_THROWS_AS(ops::cross_entropy(Tensord({1, 2}, {0.5, 0.4}), Tensord({1, 2}, {1, 0})), ContractError);
}

TEST_CASE("softmax-cross-entropy gradient equals (softmax - target)/batch") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    ParameterStore<double> store;
    GraphBuilder<double> b(g, store, rng);
    const NodeId x = b.input("logits", {3});
    const NodeId t = b.input("target", {3});
    const NodeId loss = b.cross_entropy(b.softmax(x, "sm"), t, "ce");
    const Tensord logits = random({4, 3}, rng, -3, 3);
    Tensord target({4, 3});
    for (Index r = 0; r < 4; ++r) target[r * 3 + static_cast<Index>(rng.below(3))] = 1.0;

    Session<double> s(g, store);
    s.bind(x, logits);
    s.bind(t, target);
    s.keep_grad(x);
    s.forward(loss, ops::Mode::eval);
    s.backward(loss);
    const Vector<double> expected = (ops::softmax(logits, 1).values() - target.values()) / 4.0;
    CHECK(gradcheck::relative_error<double>(s.grad(x).values(), expected) < 1e-6);
  }
}

TEST_CASE("backward semantics") {
  Rng rng(21);
  Graph g;
  ParameterStore<double> store;
  GraphBuilder<double> b(g, store, rng);
  const NodeId x = b.input("x", {4});
  const NodeId t = b.input("t", {2});
  const NodeId h = b.dense(x, 2, false, "fc");
  const NodeId loss = b.cross_entropy(b.softmax(h, "sm"), t, "ce");

  Session<double> s(g, store);
  s.bind(x, random({5, 4}, rng));
  s.bind(t, Tensord({5, 2}, {1, 0, 0, 1, 1, 0, 0, 1, 1, 0}));

  SUBCASE("unevaluated graph is a state error") { CHECK_THROWS_AS(s.backward(loss), StateError); }

  SUBCASE("repeated backward does not accumulate") {
    s.forward(loss, ops::Mode::eval);
    s.backward(loss);
    const auto first = store.tensor(0).grad();
    s.backward(loss);
    CHECK((store.tensor(0).grad().array() == first.array()).all());
  }

  SUBCASE("frozen parameters receive no gradient") {
    store.freeze_all();
    s.forward(loss, ops::Mode::eval);
    s.backward(loss);
    for (const auto& e : store) CHECK_FALSE(e.tensor.has_grad());
    CHECK(store.trainable_count() == 0);
  }

  SUBCASE("single dense layer matches finite differences") {
    gradcheck::Case<double> c;
    c.graph = g;
    c.store = store;
    c.bindings = {{x, random({5, 4}, rng)}, {t, Tensord({5, 2}, {1, 0, 0, 1, 1, 0, 0, 1, 1, 0})}};
    c.objective = loss;
    CHECK(gradcheck::check_case(c) < 1e-6);
  }
}

TEST_CASE("graph rejects bad structure at build time") {
  Rng rng(1);
  Graph g;
  ParameterStore<double> store;
  GraphBuilder<double> b(g, store, rng);
  const NodeId x = b.input("x", {4});
  CHECK_THROWS_AS(b.dropout(x, 1.0, "d"), ConfigError);
  CHECK_THROWS_AS(b.dense(x, 0, false, "fc0"), ConfigError);
  OpNode forward_ref;
  forward_ref.kind = OpKind::relu;
  forward_ref.inputs = {42};
  CHECK_THROWS_AS(g.add(forward_ref), ConfigError);
  const NodeId y = b.input("y", {3, 2});
  CHECK_THROWS_AS(b.concatenate({x, y}, "cat", NodeRole::none), DimensionError);
  CHECK_THROWS_AS(b.input("x", {1}), ConfigError);
}

TEST_CASE("optimizer steps") {
  ParameterStore<double> store;
  const ParamId p = store.add("p", Tensord({1}, {1.0}), InitScheme::external);
  const ParamId frozen = store.add("f", Tensord({2}, {0.25, -3.0}), InitScheme::external, true);

  SUBCASE("sgd one step") {
    Optimizer<double> opt({Algorithm::sgd, 0.1});
    store.tensor(p).zero_grad();
    store.tensor(p).grad()[0] = 2.0;
    opt.step(store);
    CHECK(store.tensor(p)[0] == Approx(0.8).epsilon(1e-15));
    CHECK(store.tensor(frozen) == Tensord({2}, {0.25, -3.0}));
  }

  SUBCASE("zero gradient leaves parameters unchanged") {
    for (auto algo : {Algorithm::sgd, Algorithm::adam}) {
      Optimizer<double> opt({algo, 0.01});
      store.tensor(p).zero_grad();
      opt.step(store);
      CHECK(store.tensor(p)[0] == 1.0);
    }
  }

  SUBCASE("adam first step is lr * g / (|g| + eps)") {
    const double g = -0.37, lr = 1e-3, eps = 1e-8;
    Optimizer<double> opt({Algorithm::adam, lr, 0.9, 0.999, eps});
    store.tensor(p).zero_grad();
    store.tensor(p).grad()[0] = g;
    opt.step(store);
    // m = 0.1 g, v = 0.001 g^2; bias-corrected m_hat = g, v_hat = g^2
    const double expected = 1.0 - lr * g / (std::abs(g) + eps);
    CHECK(store.tensor(p)[0] == Approx(expected).epsilon(1e-14));
    CHECK(std::abs(store.tensor(p)[0] - 1.0) == Approx(lr).epsilon(1e-4));
  }

  SUBCASE("config and state errors") {
    CHECK_THROWS_AS(Optimizer<double>({Algorithm::sgd, 0.0}), ConfigError);
    CHECK_THROWS_AS(Optimizer<double>({Algorithm::adam, -1.0}), ConfigError);
    Optimizer<double> opt({Algorithm::sgd, 0.1});
    store.tensor(p).clear_grad();
    CHECK_THROWS_AS(opt.step(store), StateError);
  }
}

TEST_CASE("fixed seed gives bit-identical trajectories") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Graph g;
    ParameterStore<double> store;
    GraphBuilder<double> b(g, store, rng);
    const NodeId x = b.input("x", {6});
    const NodeId t = b.input("t", {2});
    const NodeId h = b.dropout(b.relu(b.dense(x, 5, true, "fc"), "r"), 0.5, "d");
    const NodeId loss = b.cross_entropy(b.softmax(b.dense(h, 2, false, "out"), "sm"), t, "ce");
    Optimizer<double> opt({});
    Tensord xs = random({8, 6}, rng);
    Tensord ts({8, 2});
    for (Index r = 0; r < 8; ++r) ts[r * 2 + r % 2] = 1;
    for (int step = 0; step < 10; ++step) {
      Session<double> s(g, store);
      s.bind(x, xs);
      s.bind(t, ts);
      s.forward(loss, ops::Mode::train, &rng);
      s.backward(loss);
      opt.step(store);
    }
    std::vector<double> flat;
    for (const auto& e : store) flat.insert(flat.end(), e.tensor.data(), e.tensor.data() + e.tensor.size());
    return flat;
  };
  CHECK(run(99) == run(99));
  CHECK(run(99) != run(100));
}

TEST_CASE("gradient suite passes in 64-bit and 32-bit modes") {
  const auto rows = gradcheck::op_suite<double>();
  CHECK(rows.size() == 9);
  for (const auto& r : rows) {
    INFO(r.op << " max rel error " << r.max_rel_error);
    CHECK(r.instances >= 20);
    CHECK(r.passed);
  }
  for (const auto& r : gradcheck::op_suite<float>()) {
    INFO(r.op << " (f32) max rel error " << r.max_rel_error);
    CHECK(r.passed);
  }
}

TEST_CASE("gradient suite catches a corrupted dense backward") {
  debug::corrupt_dense_backward = true;
  const auto rows = gradcheck::op_suite<double>({2, 1});
  debug::corrupt_dense_backward = false;
  CHECK_FALSE(rows[0].passed);
}
