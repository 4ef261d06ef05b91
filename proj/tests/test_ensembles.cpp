#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "mednc/core/errors.hpp"
#include "mednc/core/optimizer.hpp"
#include "mednc/nn/model.hpp"
#include "mednc/nn/serialize.hpp"
#include "mednc/nn/verify.hpp"

using namespace mednc;
using namespace mednc::nn;

namespace {

std::vector<ExtractorSpec> tables(std::size_t n, Index dim, std::size_t rows = 8) {
  std::vector<ExtractorSpec> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto t = std::make_shared<data::FeatureTable>("m" + std::to_string(i), dim, 2);
    Rng rng(i + 1);
    std::vector<float> row(static_cast<std::size_t>(dim));
    for (std::size_t r = 0; r < rows; ++r) {
      for (auto& f : row) f = static_cast<float>(rng.uniform(-1, 1));
      t->add("s" + std::to_string(r), static_cast<std::uint32_t>(r % 2), row);
    }
    out.push_back(wrap_feature_table(t));
  }
  return out;
}

std::vector<ExtractorSpec> toys(std::size_t n) {
  std::vector<ExtractorSpec> out;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(100 + i);
    out.push_back(build_toy_backbone("toy" + std::to_string(i), ToyBackboneConfig{{2, 4}, 3, 2, 1, 8, 8}, rng));
  }
  return out;
}

Index combiner_input(const Model& m) {
  return m.params.tensor(m.combiner_params[0]).dim(0);
}

Tensord run_output(Model& m, Index batch) {
  Session<double> s(m.graph, m.params);
  std::vector<std::string> ids;
  for (Index r = 0; r < batch; ++r) ids.push_back("s" + std::to_string(r));
  for (std::size_t i = 0; i < m.extractors.size(); ++i) s.bind(m.extractor_nodes[i], m.extractors[i].table->lookup(ids));
  s.forward(m.output, ops::Mode::eval);
  return s.value(m.output);
}

}  // namespace

TEST_CASE("default grouping pairs sorted ids") {
  const auto g = default_grouping(Topology::ffc, {"d", "b", "a", "c"});
  CHECK(g.feature_groups == std::vector<std::vector<std::string>>{{"a", "b"}, {"c", "d"}});
  CHECK(g.fc_groups.empty());
  const auto f = default_grouping(Topology::ffco, {"h", "g", "f", "e", "d", "c", "b", "a"});
  CHECK(f.feature_groups.size() == 4);
  CHECK(f.fc_groups == std::vector<std::vector<std::size_t>>{{0, 1}, {2, 3}});
  CHECK_THROWS_AS(default_grouping(Topology::fo, {"a", "b", "c"}), ConfigError);
  try {
    default_grouping(Topology::ffco, {"a", "b", "c", "d", "e", "f"});
    FAIL("expected config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("multiple of 4") != std::string::npos);
  }
}

TEST_CASE("grouping validation") {
  const std::vector<std::string> ids{"a", "b", "c", "d"};
  CHECK_NOTHROW(validate_grouping(Topology::fco, {{{"a", "c"}, {"b", "d"}}, {}}, ids));
  CHECK_THROWS_AS(validate_grouping(Topology::fco, {{{"a", "b"}, {"b", "c", "d"}}, {}}, ids), ConfigError);
  CHECK_THROWS_AS(validate_grouping(Topology::fco, {{{"a", "b"}, {"c"}}, {}}, ids), ConfigError);
  CHECK_THROWS_AS(validate_grouping(Topology::fco, {{{"a", "b"}, {"c", "x"}}, {}}, ids), ConfigError);
  CHECK_THROWS_AS(validate_grouping(Topology::fco, {{{"a", "b"}}, {}}, ids), ConfigError);
  CHECK_THROWS_AS(validate_grouping(Topology::ffco, {{{"a", "b"}, {"c", "d"}}, {{0}, {1}}}, ids), ConfigError);
  CHECK_THROWS_AS(validate_grouping(Topology::ffc, {{{"a", "b"}, {"c", "d"}}, {{0, 1}}}, ids), ConfigError);
  CHECK_THROWS_AS(build_ensemble(tables(2, 3), EnsembleSpec{Topology::ffc, {{{"m0"}, {"m1"}}, {}}, {}}, 1),
                  ConfigError);
}

TEST_CASE("concatenation census per topology") {
  const auto members = tables(8, 4);
  const HeadSpec head{5, 0.5, 2, 1};
  const auto ffc = build_ffc(members, {}, head, 1);
  const auto fco = build_fco(members, {}, head, 1);
  const auto fo = build_fo(members, {}, head, 1);
  const auto ffco = build_ffco(members, {}, head, 1);
  CHECK(concat_census(ffc.graph) == ConcatCensus{4, 1, 0});
  CHECK(concat_census(fco.graph) == ConcatCensus{0, 4, 1});
  CHECK(concat_census(fo.graph) == ConcatCensus{4, 0, 1});
  CHECK(concat_census(ffco.graph) == ConcatCensus{4, 2, 1});

  for (const Model* m : {&ffc, &fco, &fo, &ffco}) {
    // Every extractor appears exactly once.
    const auto ext = m->graph.with_role(NodeRole::extractor);
    CHECK(ext.size() == 8);
    std::vector<std::string> tags;
    for (auto id : ext) tags.push_back(m->graph.node(id).tag);
    std::sort(tags.begin(), tags.end());
    CHECK(std::adjacent_find(tags.begin(), tags.end()) == tags.end());
    CHECK(m->graph.count(OpKind::softmax, NodeRole::output) == 1);
  }
  CHECK(ffco.symbols.at("F_e").size() == 4);
  CHECK(ffco.symbols.at("FC_e").size() == 2);
  CHECK(ffco.symbols.at("O_x").size() == 2);
  CHECK(ffco.symbols.at("O_e").size() == 1);
}

TEST_CASE("combiner input dimensions") {
  const HeadSpec head{128, 0.5, 2, 1};
  CHECK(combiner_input(build_ffc(tables(6, 16), {}, head, 1)) == 3 * 128);
  CHECK(combiner_input(build_fco(tables(6, 16), {}, head, 1)) == 6);
  CHECK(combiner_input(build_fco(tables(2, 16), {}, head, 1)) == 2);
  CHECK(combiner_input(build_fo(tables(6, 16), {}, head, 1)) == 6);

  const auto ffco = build_ffco(tables(8, 16), {}, head, 1);
  for (auto id : ffco.symbols.at("FC_e")) CHECK(ffco.graph.node(id).sample_shape == Shape{256});
  CHECK(ffco.graph.node(ffco.symbols.at("O_e")[0]).sample_shape == Shape{4});

  const auto single_group = build_ffc(tables(2, 16), {}, head, 1);
  CHECK(single_group.trainable_params() == 32 * 128 + 128 + 128 * 2 + 2);
}

TEST_CASE("trainable parameter closed forms") {
  const HeadSpec head{128, 0.5, 2, 1};
  CHECK(build_ffc(tables(6, 1024, 2), {}, head, 1).trainable_params() == 3 * (2048 * 128 + 128) + (384 * 2 + 2));

  const Index d = 16, w = 128, k = 2;
  const auto ffco = build_ffco(tables(8, d), {}, head, 1);
  const Index branches = 4 * (2 * d * w + w);
  const Index group_outputs = 2 * (2 * w * k + k);
  const Index final_layer = 2 * k * k + k;
  CHECK(ffco.trainable_params() == branches + group_outputs + final_layer);

  const Index fco_count = 6 * (d * w + w) + 3 * (2 * w * k + k) + (3 * k * k + k);
  CHECK(build_fco(tables(6, d), {}, head, 1).trainable_params() == fco_count);
  const Index fo_count = 3 * (2 * d * w + w) + 3 * (w * k + k) + (3 * k * k + k);
  CHECK(build_fo(tables(6, d), {}, head, 1).trainable_params() == fo_count);

  auto frozen = build_ffco(tables(8, d), {}, head, 1);
  frozen.params.freeze_all();
  CHECK(frozen.trainable_params() == 0);

  const auto permuted = build_ffco(tables(8, d), {{{"m1", "m0"}, {"m3", "m2"}, {"m5", "m4"}, {"m7", "m6"}}, {{1, 0}, {3, 2}}},
                                   head, 1);
  CHECK(permuted.trainable_params() == ffco.trainable_params());
}

TEST_CASE("ensemble outputs are distributions") {
  const HeadSpec head{6, 0.5, 3, 1};
  for (auto topo : {Topology::ffc, Topology::fco, Topology::fo, Topology::ffco}) {
    for (auto signal : {CombineSignal::probabilities, CombineSignal::hidden_activations}) {
      auto m = build_ensemble(tables(4, 5), EnsembleSpec{topo, {}, head, signal}, 2);
      const auto out = run_output(m, 8);
      CHECK(out.shape() == Shape{8, 3});
      for (Index r = 0; r < 8; ++r) CHECK(std::abs(out[3 * r] + out[3 * r + 1] + out[3 * r + 2] - 1.0) < 1e-12);
    }
  }
  // Duplicated members within a pair are structurally fine.
  auto members = tables(2, 5);
  members[1] = members[0];
  members[1].id = "copy";
  auto fo = build_fo(members, {}, head, 1);
  CHECK(run_output(fo, 4).all_finite());
  members[1].id = members[0].id;
  CHECK_THROWS_AS(build_fo(members, {}, head, 1), ConfigError);
}

TEST_CASE("end-to-end ensemble gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    CHECK(ensemble_gradient_check(Topology::ffco, seed) < 1e-4);
    CHECK(ensemble_gradient_check(Topology::ffc, seed) < 1e-4);
    CHECK(ensemble_gradient_check(Topology::fco, seed) < 1e-4);
    CHECK(ensemble_gradient_check(Topology::fo, seed) < 1e-4);
  }
}

TEST_CASE("toy ensemble keeps every extractor frozen") {
  auto m = build_ffco(toys(4), {}, HeadSpec{4, 0.5, 2, 1}, 3);
  const auto frozen = m.extractor_params();
  CHECK(frozen.size() == 8);
  std::vector<Tensord> before;
  for (auto p : frozen) before.push_back(m.params.tensor(p));
  Session<double> s(m.graph, m.params);
  Optimizer<double> opt(OptimizerConfig{});
  Rng rng(1);
  for (int step = 0; step < 30; ++step) {
    Tensord img(Shape{2, 1, 8, 8});
    for (Index i = 0; i < img.size(); ++i) img[i] = rng.uniform();
    Tensord t(Shape{2, 2}, {1, 0, 0, 1});
    s.bind(*m.image, img);
    s.bind(m.target, t);
    s.forward(m.loss, ops::Mode::train, &rng);
    s.backward(m.loss);
    opt.step(m.params);
    for (auto p : frozen) CHECK_FALSE(m.params.tensor(p).has_grad());
  }
  for (std::size_t i = 0; i < frozen.size(); ++i) CHECK(m.params.tensor(frozen[i]) == before[i]);
}

TEST_CASE("model files round trip bit-exactly") {
  const auto dir = std::filesystem::temp_directory_path() / "mednc_test_models";
  std::filesystem::create_directories(dir);

  auto members = toys(2);
  auto t = tables(2, 6);
  members.insert(members.end(), t.begin(), t.end());
  auto m = build_ffco(members, {}, HeadSpec{4, 0.25, 2, 1}, 9, CombineSignal::hidden_activations);
  save_model(m, dir / "ffco.json");
  TableMap map;
  for (const auto& e : t) map[e.id] = e.table;
  auto back = load_model(dir / "ffco.json", map);

  CHECK(back.name == m.name);
  CHECK(back.topology == Topology::ffco);
  CHECK(back.combine_signal == CombineSignal::hidden_activations);
  CHECK(back.grouping == m.grouping);
  CHECK(back.head.dropout_rate == 0.25);
  REQUIRE(back.params.size() == m.params.size());
  for (ParamId p = 0; p < m.params.size(); ++p) {
    CHECK(back.params.entry(p).name == m.params.entry(p).name);
    CHECK(back.params.entry(p).frozen == m.params.entry(p).frozen);
    CHECK(back.params.tensor(p) == m.params.tensor(p));
  }
  REQUIRE(back.graph.size() == m.graph.size());
  for (NodeId n = 0; n < m.graph.size(); ++n) {
    CHECK(back.graph.node(n).name == m.graph.node(n).name);
    CHECK(back.graph.node(n).sample_shape == m.graph.node(n).sample_shape);
  }
  CHECK(back.extractor_nodes == m.extractor_nodes);
  CHECK(back.group_outputs == m.group_outputs);
  CHECK(back.symbols == m.symbols);
  CHECK(back.extractors[0].kernels[1] == m.extractors[0].kernels[1]);
  CHECK(back.trainable_params() == m.trainable_params());

  auto bytes = encode_params(m.params);
  bytes.pop_back();
  CHECK_THROWS_AS(decode_params(bytes, back.params), FormatError);
}
