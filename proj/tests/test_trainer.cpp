#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "mednc/core/errors.hpp"
#include "mednc/eval/report.hpp"

using namespace mednc;
using namespace mednc::eval;
namespace fs = std::filesystem;

namespace {

data::Dataset separable(int per_class = 60) {
  data::SyntheticConfig cfg;
  cfg.per_class = per_class;
  cfg.height = cfg.width = 12;
  cfg.noise = 0.0;
  return data::make_synthetic(cfg, 17);
}

nn::ExtractorSpec toy(const std::string& id, std::uint64_t seed) {
  Rng rng(seed);
  return nn::build_toy_backbone(id, nn::ToyBackboneConfig{{4}, 3, 2, 1, 12, 12}, rng);
}

std::vector<std::size_t> all_indices(const data::Dataset& ds) {
  std::vector<std::size_t> idx(ds.records.size());
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

/// Mean of each class in raw pixel space; accuracy of the nearest centroid.
double nearest_centroid_accuracy(const data::Dataset& ds) {
  std::vector<Vector<double>> centroid(2, Vector<double>::Zero(ds.records[0].pixels.size()));
  std::vector<int> n(2, 0);
  for (const auto& r : ds.records) {
    centroid[r.label] += r.pixels.values();
    ++n[r.label];
  }
  for (int c = 0; c < 2; ++c) centroid[c] /= n[c];
  int correct = 0;
  for (const auto& r : ds.records) {
    const double d0 = (r.pixels.values() - centroid[0]).squaredNorm();
    const double d1 = (r.pixels.values() - centroid[1]).squaredNorm();
    correct += (d1 < d0 ? 1 : 0) == r.label;
  }
  return static_cast<double>(correct) / ds.records.size();
}

struct Fixture {
  data::Dataset ds = separable();
  nn::ExtractorSpec extractor = toy("toy", 3);
  FeatureCache cache;
  std::vector<std::size_t> idx = all_indices(ds);

  Fixture() {
    std::vector<nn::ExtractorSpec> e{extractor};
    cache_features(cache, e, ds);
  }

  nn::Model model(std::uint64_t seed = 5) const { return nn::build_single_model(extractor, nn::HeadSpec{16, 0.5, 2, 1}, seed); }
};

std::vector<Tensord> snapshot(const nn::Model& m) {
  std::vector<Tensord> out;
  for (const auto& e : m.params) out.push_back(e.tensor);
  return out;
}

bool same_values(const std::vector<Tensord>& a, const std::vector<Tensord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape() || a[i].values() != b[i].values()) return false;
  }
  return true;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("mednc_test_trainer_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("separable fixture trains to high accuracy") {
  Fixture f;
  CHECK(nearest_centroid_accuracy(f.ds) == 1.0);
  auto m = f.model();
  const auto set = gather(m, f.cache, f.ds, f.idx);
  CHECK(set.size() == 120);
  CHECK(set.inputs.at(0).shape() == Shape{120, 4, 6, 6});
  const auto curve = train(m, set, {}, TrainConfig{30, 16, OptimizerConfig{Algorithm::adam, 1e-2}, 1});
  REQUIRE(curve.size() == 30);
  CHECK(curve.epochs.back().train_acc >= 0.99);
  CHECK(std::isnan(curve.epochs.back().val_loss));
  for (std::size_t i = 0; i < curve.size(); ++i) CHECK(curve.epochs[i].epoch == static_cast<int>(i) + 1);
}

TEST_CASE("zero epochs leave parameters unchanged") {
  Fixture f;
  auto m = f.model();
  const auto before = snapshot(m);
  const auto set = gather(m, f.cache, f.ds, f.idx);
  const auto curve = train(m, set, set, TrainConfig{0, 16, {}, 1});
  CHECK(curve.size() == 0);
  CHECK(same_values(before, snapshot(m)));

  FeatureSet empty;
  CHECK_THROWS_AS(train(m, empty, set, TrainConfig{1, 16, {}, 1}), ConfigError);
  CHECK_THROWS_AS(train(m, set, set, TrainConfig{1, 0, {}, 1}), ConfigError);
}

TEST_CASE("training is deterministic per seed") {
  Fixture f;
  auto a = f.model(), b = f.model();
  const auto set = gather(a, f.cache, f.ds, f.idx);
  const TrainConfig cfg{4, 16, {}, 11};
  const auto ca = train(a, set, set, cfg);
  const auto cb = train(b, set, set, cfg);
  CHECK(same_values(snapshot(a), snapshot(b)));
  for (std::size_t i = 0; i < ca.size(); ++i) {
    CHECK(ca.epochs[i].train_loss == cb.epochs[i].train_loss);
    CHECK(ca.epochs[i].val_acc == cb.epochs[i].val_acc);
  }
  auto c = f.model();
  train(c, set, set, TrainConfig{4, 16, {}, 12});
  CHECK_FALSE(same_values(snapshot(a), snapshot(c)));
}

TEST_CASE("sgd loss falls after the early epochs") {
  Fixture f;
  auto m = f.model();
  const auto set = gather(m, f.cache, f.ds, f.idx);
  const auto curve = train(m, set, {}, TrainConfig{20, 8, OptimizerConfig{Algorithm::sgd, 0.01}, 2});
  CHECK(curve.epochs.back().train_loss < curve.epochs[2].train_loss);
}

TEST_CASE("non-finite loss names the epoch") {
  Fixture f;
  auto m = f.model();
  const auto set = gather(m, f.cache, f.ds, f.idx);
  for (auto& e : m.params) {
    if (!e.frozen) e.tensor[0] = std::nan("");
  }
  try {
    train(m, set, {}, TrainConfig{3, 16, {}, 1});
    FAIL("expected numeric error");
  } catch (const NumericError& e) {
    CHECK(e.epoch() == 1);
  }
  CHECK(m.params.entry(m.extractor_params().at(0)).frozen);
}

TEST_CASE("evaluation: degenerate predictor, determinism and recomputation") {
  Fixture f;
  auto m = f.model();
  const auto set = gather(m, f.cache, f.ds, f.idx);

  // Output layer pinned to always favor class 0.
  auto& w = m.params.tensor(m.params.size() - 2);
  auto& b = m.params.tensor(m.params.size() - 1);
  w.values().setZero();
  b[0] = 1.0;
  b[1] = 0.0;
  const auto ev = evaluate(m, set);
  CHECK(*ev.metrics.accuracy == 0.5);
  CHECK(*ev.metrics.sensitivity == 0.0);
  CHECK(*ev.metrics.specificity == 1.0);
  CHECK_FALSE(ev.metrics.precision.has_value());
  CHECK(compute_metrics(ev.confusion, 0).sensitivity == 1.0);
  CHECK(ev.confusion.total() == set.size());

  const auto perfect = compute_metrics(confusion(set.labels, set.labels, 2));
  for (const char* name : kMetricNames) {
    if (std::string_view(name) != "fdr") CHECK(*metric_by_name(perfect, name) == 1.0);
  }

  auto trained = f.model();
  train(trained, set, {}, TrainConfig{3, 16, {}, 4});
  const auto e1 = evaluate(trained, set);
  const auto e2 = evaluate(trained, set);
  CHECK(e1.confusion == e2.confusion);
  const double tp = static_cast<double>(e1.confusion.at(1, 1)), fp = static_cast<double>(e1.confusion.at(0, 1));
  const double fn = static_cast<double>(e1.confusion.at(1, 0)), tn = static_cast<double>(e1.confusion.at(0, 0));
  CHECK(std::abs(*e1.metrics.accuracy - (tp + tn) / (tp + tn + fp + fn)) < 1e-12);
  CHECK(std::abs(*e1.metrics.sensitivity - tp / (tp + fn)) < 1e-12);
  CHECK(std::abs(*e1.metrics.specificity - tn / (tn + fp)) < 1e-12);
}

TEST_CASE("augmented training rows") {
  Fixture f;
  auto m = f.model();
  const std::vector<std::size_t> some{0, 1, 70};
  data::AugmentSpec aug{true, true, {90, 180}};
  const auto set = gather_augmented(m, f.cache, f.ds, some, aug);
  CHECK(set.size() == 15);
  CHECK(set.labels[3] == f.ds.records[0].label);
  std::vector<data::ImageRecord> one{f.ds.records[1]};
  const auto flipped = data::augment(one, data::AugmentSpec{true, false, {}});
  data::Dataset tmp{f.ds.class_names, {flipped[1]}};
  const std::vector<std::size_t> first{0};
  const auto expect = nn::extract(f.extractor, tmp, first);
  const std::vector<Index> row{4};
  CHECK(slice_rows(set.inputs[0], row).values() == expect.values());

  auto table = std::make_shared<data::FeatureTable>("tab", 3, 2);
  const std::vector<float> v{1, 2, 3};
  for (const auto& r : f.ds.records) table->add(r.id, static_cast<std::uint32_t>(r.label), v);
  const auto te = nn::wrap_feature_table(table);
  auto tm = nn::build_single_model(te, nn::HeadSpec{4, 0.0, 2, 1}, 1);
  std::vector<nn::ExtractorSpec> tes{te};
  cache_features(f.cache, tes, f.ds);
  CHECK_THROWS_AS(gather_augmented(tm, f.cache, f.ds, some, aug), ConfigError);
}

TEST_CASE("staged training touches heads then combiner only") {
  Fixture f;
  const std::vector<nn::ExtractorSpec> members{toy("a", 1), toy("b", 2), toy("c", 3), toy("d", 4)};
  cache_features(f.cache, members, f.ds);
  auto m = nn::build_ensemble(members, nn::EnsembleSpec{nn::Topology::fo, {}, nn::HeadSpec{8, 0.2, 2, 1}}, 3);
  const auto before = snapshot(m);
  std::vector<bool> frozen;
  for (const auto& e : m.params) frozen.push_back(e.frozen);
  const auto set = gather(m, f.cache, f.ds, f.idx);
  const auto curve = train(m, set, set, TrainConfig{2, 16, {}, 1, TrainMode::staged});
  CHECK(curve.size() == 4);
  const auto after = snapshot(m);
  for (ParamId p = 0; p < m.params.size(); ++p) {
    CHECK(m.params.entry(p).frozen == frozen[p]);
    if (frozen[p]) CHECK(after[p] == before[p]);
  }
  for (ParamId p : m.combiner_params) CHECK_FALSE(after[p] == before[p]);
}

TEST_CASE("standardizer uses the statistics of the set it was fitted on") {
  FeatureSet a;
  a.inputs.push_back(Tensord({4, 2}));
  a.labels = {0, 1, 0, 1};
  const std::vector<double> col0{1, 3, 5, 7};
  for (Index r = 0; r < 4; ++r) {
    a.inputs[0].matrix()(r, 0) = col0[r];
    a.inputs[0].matrix()(r, 1) = 2.0;
  }
  const auto s = fit_standardizer(a);
  REQUIRE(s.mean.size() == 1);
  CHECK(s.mean[0][0] == 4.0);
  CHECK(s.scale[0][0] == doctest::Approx(std::sqrt(5.0)));
  CHECK(s.scale[0][1] == 1.0);
  FeatureSet b = a;
  s.apply(a);
  CHECK(a.inputs[0].matrix().col(0).mean() == doctest::Approx(0.0));
  CHECK(a.inputs[0].matrix().col(0).squaredNorm() / 4 == doctest::Approx(1.0));
  CHECK(a.inputs[0].matrix().col(1).isZero());

  b.inputs[0].matrix()(0, 0) = 4.0;
  s.apply(b);
  CHECK(b.inputs[0].matrix()(0, 0) == 0.0);
  CHECK(fit_standardizer(FeatureSet{}).empty());
  b.inputs.push_back(b.inputs[0]);
  CHECK_THROWS_AS(s.apply(b), ContractError);
}

TEST_CASE("every ensemble topology trains on toy extractors") {
  Fixture f;
  std::vector<nn::ExtractorSpec> members;
  for (int i = 0; i < 4; ++i) members.push_back(toy("toy" + std::to_string(i), 20 + i));
  cache_features(f.cache, members, f.ds);
  for (auto topo : {nn::Topology::ffc, nn::Topology::fco, nn::Topology::fo, nn::Topology::ffco}) {
    CAPTURE(nn::to_string(topo));
    auto m = nn::build_ensemble(members, nn::EnsembleSpec{topo, {}, nn::HeadSpec{16, 0.2, 2, 1}}, 9);
    auto set = gather(m, f.cache, f.ds, f.idx);
    fit_standardizer(set).apply(set);
    const auto curve = train(m, set, {}, TrainConfig{15, 16, OptimizerConfig{Algorithm::adam, 1e-3}, 2});
    CHECK(curve.epochs.back().train_acc >= 0.95);
    CHECK(curve.epochs.back().train_loss < curve.epochs.front().train_loss);
  }
}

TEST_CASE("mccv aggregates repetitions and writes reloadable reports") {
  Fixture f;
  const std::vector<nn::ExtractorSpec> members{toy("a", 1), toy("b", 2)};
  cache_features(f.cache, members, f.ds);
  std::vector<Candidate> cands;
  cands.push_back({"ffc", false, [&](std::uint64_t s) {
                     return nn::build_ensemble(members, nn::EnsembleSpec{nn::Topology::ffc, {}, {8, 0.2, 2, 1}}, s);
                   }});
  for (const auto& e : members) {
    cands.push_back({e.id, true, [&, e](std::uint64_t s) { return nn::build_single_model(e, {8, 0.2, 2, 1}, s); }});
  }
  MccvConfig cfg;
  cfg.repetitions = 3;
  cfg.base_seed = 40;
  cfg.train = TrainConfig{3, 16, {}, 0};
  cfg.threads = 1;
  const auto results = run_mccv(cands, f.ds, f.cache, cfg);
  REQUIRE(results.size() == 3);
  CHECK(results[0].topology == nn::Topology::ffc);
  for (const auto& r : results) {
    REQUIRE(r.repetitions.size() == 3);
    for (int i = 0; i < 3; ++i) {
      CHECK(r.repetitions[i].split_seed == 40u + i);
      CHECK(r.repetitions[i].curve.size() == 3);
      CHECK(r.repetitions[i].partitions.size() == 4);
      CHECK(r.repetitions[i].partitions.at(data::Part::test_b).confusion.total() == 12);
    }
    double sum = 0.0;
    for (const auto& rep : r.repetitions) sum += *rep.partitions.at(data::Part::test_b).metrics.accuracy;
    CHECK(std::abs(*r.stat(data::Part::test_b, "accuracy").mean - sum / 3) < 1e-12);
  }

  cfg.threads = 3;
  const auto parallel = run_mccv(cands, f.ds, f.cache, cfg);
  for (std::size_t c = 0; c < results.size(); ++c) {
    for (int i = 0; i < 3; ++i) {
      CHECK(results[c].repetitions[i].partitions.at(data::Part::test_b).confusion ==
            parallel[c].repetitions[i].partitions.at(data::Part::test_b).confusion);
      CHECK(metrics_document(results[c], results[c].repetitions[i]) ==
            metrics_document(parallel[c], parallel[c].repetitions[i]));
    }
  }

  const auto dir = scratch("mccv");
  write_repetitions(dir, results);
  CHECK(fs::exists(dir / "rep2" / "metrics.json"));
  CHECK(fs::exists(dir / "rep2" / "members" / "a" / "curve.csv"));
  CHECK(fs::exists(dir / "rep0" / "confusion_testB.csv"));
  fs::remove(dir / "rep1" / "curve.csv");
  const auto rows = summarize_runs(load_runs(dir));
  REQUIRE(rows.size() == 3);
  const auto& ffc = *std::find_if(rows.begin(), rows.end(), [](const SummaryRow& r) { return r.model == "ffc"; });
  CHECK(ffc.role == "ensemble");
  CHECK(ffc.partition == "testB");
  CHECK(ffc.repetitions == 3);
  CHECK(*ffc.metrics.at("accuracy").mean == *results[0].stat(data::Part::test_b, "accuracy").mean);
  CHECK(ffc.seconds_per_epoch.has_value());

  const auto csv = summary_csv(rows);
  const auto parsed = parse_summary_csv(csv);
  REQUIRE(parsed.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(parsed[i].model == rows[i].model);
    CHECK(parsed[i].best == rows[i].best);
    CHECK(parsed[i].params_mb == rows[i].params_mb);
    for (const char* m : kMetricNames) {
      CHECK(parsed[i].metrics.at(m).mean == rows[i].metrics.at(m).mean);
      CHECK(parsed[i].metrics.at(m).std == rows[i].metrics.at(m).std);
    }
  }
  fs::remove_all(dir);

  std::vector<Candidate> failing{{"broken", false, [](std::uint64_t) -> nn::Model { throw ConfigError("nope"); }}};
  try {
    run_mccv(failing, f.ds, f.cache, cfg);
    FAIL("expected failure");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("repetition 0") != std::string::npos);
  }
}

TEST_CASE("staged mccv scores members on testA and ensembles on testB") {
  Candidate member{"m", true, {}}, ens{"e", false, {}};
  CHECK(scored_parts(member, TrainMode::staged) ==
        std::vector<data::Part>{data::Part::train, data::Part::val, data::Part::test_a});
  CHECK(scored_parts(ens, TrainMode::staged) ==
        std::vector<data::Part>{data::Part::train, data::Part::val, data::Part::test_b});
  CHECK(scored_parts(ens, TrainMode::joint).size() == 4);
}

TEST_CASE("summary statistics and tables") {
  const auto s = summarize({0.9, 0.9, 0.9});
  CHECK(*s.mean == doctest::Approx(0.9));
  CHECK(*s.std == 0.0);
  const auto one = summarize({0.7});
  CHECK(*one.mean == 0.7);
  CHECK_FALSE(one.std.has_value());
  const auto partial = summarize({std::nullopt, 0.5, 1.0});
  CHECK(partial.defined == 2);
  CHECK(*partial.mean == 0.75);
  CHECK(partial.compat_mean == 0.5);
  CHECK(*partial.std == doctest::Approx(std::sqrt(0.125)));

  auto doc = [](const std::string& name, double acc) {
    StoredRun r;
    r.metrics = {{"model", name}, {"topology", "single"}, {"role", "single"}, {"trainable_params", 10},
                 {"params_mb", 4e-5}, {"testB_accuracy", acc}};
    return r;
  };
  const auto single = summarize_runs({doc("x", 0.9)});
  REQUIRE(single.size() == 1);
  const auto md = summary_markdown(single);
  CHECK(std::count(md.begin(), md.end(), '\n') == 3);
  CHECK(md.find("n/a") != std::string::npos);

  const auto two = summarize_runs({doc("x", 0.9), doc("y", 0.95)});
  CHECK_FALSE(two[0].best);
  CHECK(two[1].best);
  CHECK(summary_markdown(two).find("**0.9500 ± n/a**") != std::string::npos);
}
