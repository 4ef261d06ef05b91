#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "mednc/cli/commands.hpp"
#include "mednc/core/gradcheck.hpp"
#include "mednc/eval/report.hpp"
#include "mednc/nn/verify.hpp"

using namespace mednc;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("mednc_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::map<std::string, double> limit = {{"dense", 1e-6},     {"concatenate", 1e-6}, {"softmax", 1e-6},
                                               {"cross_entropy", 1e-6}, {"conv2d", 1e-4},  {"maxpool2d", 1e-4},
                                               {"flatten", 1e-4},   {"relu", 1e-4},        {"dropout", 1e-4}};
  bool ok = true;
  std::size_t seen = 0;
  double worst = 0.0;
  for (const auto& row : gradcheck::op_suite<double>()) {
    const auto it = limit.find(row.op);
    if (it == limit.end()) continue;
    ++seen;
    ok = ok && row.instances >= 20 && row.max_rel_error < it->second;
    worst = std::max(worst, row.max_rel_error);
  }
  double graph = 0.0;
  for (std::uint64_t s = 1; s <= 20; ++s) graph = std::max(graph, nn::ensemble_gradient_check(nn::Topology::ffco, s));
  const double secs = seconds_since(t0);
  ok = ok && seen == limit.size() && graph < 1e-4 && secs < 30.0;
  return {ok, std::to_string(seen) + " op kinds, worst op " + fmt("%.2e", worst) + ", ffco graph " + fmt("%.2e", graph) +
                  " over 20 instances, " + fmt("%.1f", secs) + " s"};
}

std::optional<double> ratio(double num, double den) {
  if (den == 0.0) return std::nullopt;
  return num / den;
}

bool same(const std::optional<double>& a, const std::optional<double>& b) {
  return a.has_value() == b.has_value() && (!a || *a == *b);
}

Outcome metric_oracle() {
  Rng rng(4242);
  int identities = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(200));
    // Some trials predict one class only, so zero denominators occur.
    const double bias = trial % 10 == 0 ? 0.0 : trial % 10 == 1 ? 1.0 : rng.uniform(0.1, 0.9);
    std::vector<int> actual, pred;
    for (int i = 0; i < n; ++i) {
      actual.push_back(rng.uniform() < 0.5 ? 1 : 0);
      pred.push_back(rng.uniform() < bias ? 1 : 0);
    }
    double tp = 0, tn = 0, fp = 0, fn = 0;
    for (int i = 0; i < n; ++i) {
      if (pred[i] == 1 && actual[i] == 1) ++tp;
      if (pred[i] == 0 && actual[i] == 0) ++tn;
      if (pred[i] == 1 && actual[i] == 0) ++fp;
      if (pred[i] == 0 && actual[i] == 1) ++fn;
    }
    const auto acc = ratio(tp + tn, tp + tn + fp + fn);
    const auto prec = ratio(tp, tp + fp);
    const auto sens = ratio(tp, tp + fn);
    const auto spec = ratio(tn, tn + fp);
    const auto fdr = ratio(fp, fp + tp);
    std::optional<double> f1;
    if (prec && sens && *prec + *sens > 0) f1 = 2 * *prec * *sens / (*prec + *sens);

    const auto m = eval::compute_metrics(eval::confusion(pred, actual, 2));
    if (!same(m.accuracy, acc) || !same(m.precision, prec) || !same(m.sensitivity, sens) ||
        !same(m.specificity, spec) || !same(m.fdr, fdr) || !same(m.f1, f1)) {
      return {false, "trial " + std::to_string(trial) + " disagrees with the tally"};
    }
    if (m.f1 && m.precision && m.sensitivity) {
      const double h = 2.0 / (1.0 / *m.precision + 1.0 / *m.sensitivity);
      if (std::abs(*m.f1 - h) > 1e-12) return {false, "f1 is not the harmonic mean in trial " + std::to_string(trial)};
      ++identities;
    }
    if (m.fdr && m.precision) {
      if (std::abs(*m.fdr - (1.0 - *m.precision)) > 1e-12) {
        return {false, "fdr != 1 - precision in trial " + std::to_string(trial)};
      }
      ++identities;
    }
  }
  return {true, "50 matrices match exactly, " + std::to_string(identities) + " identities hold"};
}

double accuracy_of(int correct, int total) {
  std::vector<int> actual(total, 1), pred(total, 1);
  for (int i = correct; i < total; ++i) pred[i] = 0;
  return *eval::compute_metrics(eval::confusion(pred, actual, 2)).accuracy;
}

Outcome spot_checks() {
  const double a = accuracy_of(242, 248), b = accuracy_of(469, 490);
  const auto r4 = [](double v) { return std::round(v * 1e4) / 1e4; };
  const bool ok = r4(a) == 0.9758 && r4(b) == 0.9571;
  return {ok, "242/248 = " + fmt("%.4f", a) + ", 469/490 = " + fmt("%.4f", b)};
}

Outcome split_rule() {
  const std::array<double, 4> ratios{0.6, 0.2, 0.1, 0.1};
  const auto sizes = data::split_sizes(2458, ratios);
  data::Dataset ds;
  ds.class_names = {"covid", "noncovid"};
  for (int i = 0; i < 2458; ++i) ds.records.push_back({"s" + std::to_string(i), i % 2, {}, "fixture"});
  const auto a = data::split_mccv(ds, {ratios, 7});
  const auto b = data::split_mccv(ds, {ratios, 7});
  const auto c = data::split_mccv(ds, {ratios, 8});
  bool ok = sizes == std::array<std::size_t, 4>{1474, 491, 245, 248};
  for (std::size_t p = 0; p < 4; ++p) ok = ok && a.indices[p].size() == sizes[p];
  ok = ok && a.indices == b.indices && a.indices != c.indices;
  return {ok, "sizes " + std::to_string(sizes[0]) + "/" + std::to_string(sizes[1]) + "/" + std::to_string(sizes[2]) +
                  "/" + std::to_string(sizes[3]) + ", same seed same split"};
}

Outcome freeze_contract() {
  data::SyntheticConfig sc;
  sc.per_class = 32;
  sc.height = sc.width = 12;
  sc.noise = 0.5;
  const auto ds = data::make_synthetic(sc, 3);
  std::vector<nn::ExtractorSpec> members;
  for (int i = 0; i < 4; ++i) {
    Rng rng(100 + i);
    members.push_back(nn::build_toy_backbone("toy" + std::to_string(i), nn::ToyBackboneConfig{{4}, 3, 2, 1, 12, 12}, rng));
  }
  eval::FeatureCache cache;
  eval::cache_features(cache, members, ds);
  std::vector<std::size_t> idx(ds.records.size());
  std::iota(idx.begin(), idx.end(), 0);
  // 64 rows, batch 16: 4 steps per epoch, 50 epochs.
  const eval::TrainConfig tc{50, 16, OptimizerConfig{Algorithm::adam, 1e-2}, 1};
  for (auto topo : {nn::Topology::ffc, nn::Topology::fco, nn::Topology::fo, nn::Topology::ffco}) {
    auto m = nn::build_ensemble(members, nn::EnsembleSpec{topo, {}, nn::HeadSpec{8, 0.5, 2, 1}}, 5);
    std::vector<Tensord> before;
    for (ParamId p : m.extractor_params()) before.push_back(m.params.tensor(p));
    const auto head_before = m.params.tensor(m.combiner_params.front());
    auto set = eval::gather(m, cache, ds, idx);
    eval::fit_standardizer(set).apply(set);
    eval::train(m, set, {}, tc);
    const auto ext = m.extractor_params();
    for (std::size_t i = 0; i < ext.size(); ++i) {
      const auto& now = m.params.tensor(ext[i]);
      for (Index j = 0; j < now.size(); ++j) {
        if (std::bit_cast<std::uint64_t>(now[j]) != std::bit_cast<std::uint64_t>(before[i][j])) {
          return {false, std::string(nn::to_string(topo)) + " changed an extractor parameter"};
        }
      }
    }
    if (m.params.tensor(m.combiner_params.front()).values() == head_before.values()) {
      return {false, std::string(nn::to_string(topo)) + " did not train its head"};
    }
  }
  return {true, "4 topologies x 200 steps, extractor parameters bit-identical"};
}

json desk_config() {
  return {{"dataset", {{"synthetic", {{"per_class", 400}, {"noise", 0.8}}}}},
          {"extractors", {{"count", 8}}},
          {"model", {{"topology", "ffco"}, {"head", {{"fc_width", 32}}}}},
          {"training", {{"epochs", 20}}},
          {"mccv", {{"repetitions", 10}}}};
}

Outcome ensemble_beats_singles() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto config = cli::parse_config(desk_config());
  const auto p = cli::prepare(config);
  eval::FeatureCache cache;
  eval::cache_features(cache, p.extractors, p.dataset);
  const auto results = eval::run_mccv(cli::candidates(config, p), p.dataset, cache, config.mccv);
  const auto& ens = results.front();
  int wins = 0;
  double ens_sum = 0.0, member_sum = 0.0;
  for (int r = 0; r < config.mccv.repetitions; ++r) {
    const double e = *ens.repetitions[r].partitions.at(data::Part::test_b).metrics.accuracy;
    double m = 0.0;
    for (std::size_t i = 1; i < results.size(); ++i) {
      m += *results[i].repetitions[r].partitions.at(data::Part::test_b).metrics.accuracy;
    }
    m /= static_cast<double>(results.size() - 1);
    wins += e >= m;
    ens_sum += e;
    member_sum += m;
  }
  const double n = config.mccv.repetitions;
  const double ens_mean = ens_sum / n, member_mean = member_sum / n;
  const double secs = seconds_since(t0);
  const bool calibrated = member_mean >= 0.80 && member_mean <= 0.95;
  const bool ok = results.size() == 9 && calibrated && wins >= 8 && ens_mean >= member_mean - 0.005 && secs < 600.0;
  return {ok, "ffco " + fmt("%.4f", ens_mean) + " vs member mean " + fmt("%.4f", member_mean) + ", " +
                  std::to_string(wins) + "/10 paired wins, " + fmt("%.0f", secs) + " s"};
}

Outcome topology_census() {
  std::vector<nn::ExtractorSpec> members;
  for (int i = 0; i < 8; ++i) {
    Rng rng(i);
    members.push_back(nn::build_toy_backbone("toy" + std::to_string(i), {}, rng));
  }
  const std::map<nn::Topology, nn::ConcatCensus> expected = {{nn::Topology::ffc, {4, 1, 0}},
                                                            {nn::Topology::fco, {0, 4, 1}},
                                                            {nn::Topology::fo, {4, 0, 1}},
                                                            {nn::Topology::ffco, {4, 2, 1}}};
  std::string detail;
  for (const auto& [topo, census] : expected) {
    const auto m = nn::build_ensemble(members, nn::EnsembleSpec{topo, {}, {}}, 1);
    const auto got = nn::concat_census(m.graph);
    if (!(got == census) || m.graph.with_role(NodeRole::extractor).size() != 8) {
      return {false, std::string(nn::to_string(topo)) + " census mismatch"};
    }
    detail += (detail.empty() ? "" : ", ") + std::string(nn::to_string(topo)) + " " +
              std::to_string(got.feature) + "/" + std::to_string(got.fc) + "/" +
              std::to_string(got.output);
  }
  return {true, detail + " with 8 members"};
}

std::map<std::string, std::string> metrics_files(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.path().filename() == "metrics.json") out[fs::relative(e.path(), root).string()] = eval::read_text(e.path());
  }
  return out;
}

Outcome determinism() {
  const auto dir = scratch("determinism");
  json cfg = {{"dataset", {{"synthetic", {{"per_class", 60}, {"noise", 0.8}}}}},
              {"preprocessing", {{"height", 16}, {"width", 16}}},
              {"extractors", {{"count", 4}, {"channels", {4, 8}}}},
              {"model", {{"topology", "ffco"}, {"head", {{"fc_width", 16}}}}},
              {"training", {{"epochs", 5}}},
              {"mccv", {{"repetitions", 3}}}};
  eval::write_text(dir / "config.json", cfg.dump());
  std::ostringstream out, err;
  for (const char* name : {"a", "b"}) {
    const int code = cli::run_cli({"--config", (dir / "config.json").string(), "--out", (dir / name).string(), "mccv"},
                                  out, err);
    if (code != 0) return {false, "mccv exited " + std::to_string(code) + ": " + err.str()};
  }
  const auto a = metrics_files(dir / "a"), b = metrics_files(dir / "b");
  const bool ok = !a.empty() && a == b;
  return {ok, std::to_string(a.size()) + " metrics.json files, " + (ok ? "byte-identical" : "differ")};
}

data::FeatureTable random_table(std::size_t rows, Index dim, Rng& rng) {
  data::FeatureTable t("rand", dim, 3);
  std::vector<float> row(static_cast<std::size_t>(dim));
  for (std::size_t i = 0; i < rows; ++i) {
    for (auto& v : row) v = std::bit_cast<float>(static_cast<std::uint32_t>(rng.below(0x7f800000)) |
                                                 (rng.uniform() < 0.5 ? 0x80000000u : 0u));
    t.add("r" + std::to_string(i), static_cast<std::uint32_t>(rng.below(3)), row);
  }
  return t;
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

Outcome medf_round_trip() {
  const auto dir = scratch("medf");
  Rng rng(99);
  int checked = 0;
  for (std::size_t rows : {std::size_t{0}, std::size_t{1}, std::size_t{37}, std::size_t{10000}}) {
    const auto t = random_table(rows, rows == 10000 ? 16 : 5, rng);
    const auto path = dir / ("t" + std::to_string(rows) + ".medf");
    data::write_feature_table(t, path);
    const auto back = data::read_feature_table(path);
    if (!(back.size() == t.size() && back.dim() == t.dim() && back.ids() == t.ids())) {
      return {false, std::to_string(rows) + "-row table changed shape"};
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (back.label(i) != t.label(i)) return {false, "label changed"};
      for (Index j = 0; j < t.dim(); ++j) {
        if (std::bit_cast<std::uint32_t>(back.row(i)[j]) != std::bit_cast<std::uint32_t>(t.row(i)[j])) {
          return {false, std::to_string(rows) + "-row table changed a value"};
        }
      }
    }
    if (data::encode_medf(back) != data::encode_medf(t)) return {false, "re-encoding differs"};
    ++checked;
  }

  std::vector<std::uint8_t> f{'M', 'E', 'D', 'F'};
  put_u32(f, 1);
  put_u32(f, 3);
  put_u32(f, 4);
  put_u32(f, 2);
  const std::pair<std::string, std::array<float, 4>> rows[] = {
      {"p1", {0.5f, -2.0f, 0.25f, 8.0f}}, {"p2", {1.0f, 0.0f, -0.125f, 3.0f}}, {"p3", {-1.5f, 4.0f, 6.5f, 0.75f}}};
  int label = 0;
  for (const auto& [id, vals] : rows) {
    f.push_back(static_cast<std::uint8_t>(id.size()));
    f.push_back(0);
    f.insert(f.end(), id.begin(), id.end());
    put_u32(f, static_cast<std::uint32_t>(label++ % 2));
    for (float v : vals) put_u32(f, std::bit_cast<std::uint32_t>(v));
  }
  const auto hand = data::decode_medf(f, "hand");
  bool ok = hand.size() == 3 && hand.dim() == 4 && hand.num_classes() == 2;
  for (std::size_t i = 0; ok && i < 3; ++i) {
    ok = hand.ids()[i] == rows[i].first && hand.label(i) == i % 2;
    for (Index j = 0; ok && j < 4; ++j) ok = hand.row(i)[j] == rows[i].second[j];
  }
  ok = ok && data::encode_medf(hand) == f;
  return {ok, std::to_string(checked) + " random tables (0 to 10000 rows) bit-exact, 3x4 fixture " +
                  (ok ? "exact" : "wrong")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"metric oracle", metric_oracle},
      {"accuracy spot checks", spot_checks},
      {"split rule", split_rule},
      {"freeze contract", freeze_contract},
      {"ensemble beats singles", ensemble_beats_singles},
      {"topology structure", topology_census},
      {"determinism", determinism},
      {"MEDF round trip", medf_round_trip},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.passed;
    std::cout << (o.passed ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
