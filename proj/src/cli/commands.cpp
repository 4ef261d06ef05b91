#include "mednc/cli/commands.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>

#include "mednc/core/errors.hpp"
#include "mednc/core/gradcheck.hpp"
#include "mednc/eval/report.hpp"
#include "mednc/nn/verify.hpp"

namespace mednc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// manifest.json: written before any training and rewritten at each stage,
/// so an interrupted run never reads as complete.
class Manifest {
 public:
  Manifest(fs::path dir, const std::string& command, const RunConfig& config) : path_(std::move(dir) / "manifest.json") {
    doc_ = {{"artifact", "mednc"},
            {"version", kArtifactVersion},
            {"command", command},
            {"config", to_json(config)},
            {"seeds", {{"seed", config.seed}, {"base_seed", config.mccv.base_seed}}},
            {"started", utc_now()},
            {"finished", nullptr},
            {"status", "running"},
            {"stages", json::object()}};
    save();
  }

  void stage(const std::string& name, const std::string& status) {
    doc_["stages"][name] = status;
    save();
  }

  void set(const std::string& key, json value) { doc_[key] = std::move(value); }

  void finish(const std::string& status) {
    doc_["status"] = status;
    doc_["finished"] = utc_now();
    save();
  }

 private:
  void save() const { eval::write_text(path_, doc_.dump(2) + "\n"); }

  fs::path path_;
  json doc_;
};

std::string counts_line(const data::Dataset& ds) {
  const auto counts = ds.class_counts();
  std::string out;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    out += (c ? " " : "") + ds.class_names[c] + "=" + std::to_string(counts[c]);
  }
  return out;
}

data::Dataset dataset_from_tables(const RunConfig& config, nn::TableMap& tables) {
  std::vector<std::shared_ptr<const data::FeatureTable>> loaded;
  for (const auto& path : config.dataset.tables) {
    auto t = std::make_shared<const data::FeatureTable>(data::read_feature_table(path));
    tables.emplace(t->backbone_id(), t);
    loaded.push_back(t);
  }
  const auto& first = *loaded.front();
  std::uint32_t k = 2;
  for (const auto& t : loaded) k = std::max(k, t->num_classes());
  data::Dataset ds;
  ds.class_names = config.dataset.class_names;
  if (ds.class_names.empty()) {
    for (std::uint32_t c = 0; c < k; ++c) ds.class_names.push_back("class" + std::to_string(c));
  }
  if (ds.class_names.size() < k) {
    throw ConfigError("dataset.class_names: " + std::to_string(k) + " classes in the tables, " +
                      std::to_string(ds.class_names.size()) + " names given");
  }
  for (std::size_t i = 0; i < first.size(); ++i) {
    ds.records.push_back({first.ids()[i], static_cast<int>(first.label(i)), {}, "table:" + first.backbone_id()});
  }
  for (const auto& t : loaded) {
    if (t->size() != first.size()) {
      throw DataError("feature table '" + t->backbone_id() + "' has " + std::to_string(t->size()) + " rows, '" +
                      first.backbone_id() + "' has " + std::to_string(first.size()));
    }
    for (const auto& r : ds.records) {
      if (!t->contains(r.id)) throw DataError("feature table '" + t->backbone_id() + "' lacks sample '" + r.id + "'");
      if (static_cast<int>(t->label_of(r.id)) != r.label) {
        throw DataError("feature tables disagree on the label of '" + r.id + "'");
      }
    }
  }
  return ds;
}

nn::Model build_model(const RunConfig& config, const Prepared& p, const std::vector<std::string>& members,
                      nn::Topology topology, std::uint64_t seed) {
  std::vector<nn::ExtractorSpec> specs;
  for (const auto& id : members) {
    auto it = std::find_if(p.extractors.begin(), p.extractors.end(), [&](const auto& e) { return e.id == id; });
    if (it == p.extractors.end()) throw ConfigError("model.members: unknown extractor '" + id + "'");
    specs.push_back(*it);
  }
  nn::HeadSpec head = config.model.head;
  head.num_classes = p.dataset.num_classes();
  if (topology == nn::Topology::single) return nn::build_single_model(specs.front(), head, seed);
  nn::EnsembleSpec spec{topology, {}, head, config.model.combine_signal};
  spec.grouping = config.model.grouping ? *config.model.grouping
                                        : nn::default_grouping(topology, members, config.model.group_size,
                                                               config.model.fc_group_size);
  return nn::build_ensemble(specs, spec, seed);
}

eval::FeatureCache features_for(const Prepared& p) {
  eval::FeatureCache cache;
  eval::cache_features(cache, p.extractors, p.dataset);
  return cache;
}

std::string format_metric(const eval::Metric& m) {
  if (!m) return "undefined";
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << *m;
  return s.str();
}

void print_evaluation(std::ostream& out, const std::string& part, const eval::Evaluation& ev) {
  out << part << ":";
  for (const char* name : eval::kMetricNames) out << " " << name << "=" << format_metric(eval::metric_by_name(ev.metrics, name));
  out << "\n";
}

fs::path run_dir(const RunConfig& config) { return config.output_dir / config.run_id; }

}  // namespace

Prepared prepare(const RunConfig& config) {
  Prepared p;
  const auto& d = config.dataset;
  switch (d.source) {
    case SourceKind::synthetic: {
      data::SyntheticConfig syn = d.synthetic;
      syn.height = config.preprocessing.height;
      syn.width = config.preprocessing.width;
      syn.channels = d.channels;
      p.raw = data::make_synthetic(syn, derive_seed(config.seed, "data"));
      break;
    }
    case SourceKind::directory:
      p.raw = data::load_image_tree(d.directory, d.channels, config.preprocessing.height, config.preprocessing.width);
      break;
    case SourceKind::tables:
      p.raw = dataset_from_tables(config, p.tables);
      break;
  }
  if (d.positive_class >= p.raw.num_classes()) {
    throw ConfigError("dataset.positive_class: " + std::to_string(d.positive_class) + " but the dataset has " +
                      std::to_string(p.raw.num_classes()) + " classes");
  }
  if (d.balance) {
    Rng rng(derive_seed(config.seed, "balance"));
    p.dataset = data::balance_classes(p.raw, rng);
  } else {
    p.dataset = p.raw;
  }

  if (d.source == SourceKind::tables) {
    for (const auto& [id, table] : p.tables) p.extractors.push_back(nn::wrap_feature_table(table, id));
  } else {
    const auto& e = config.extractors;
    const nn::ToyBackboneConfig toy{e.channels, e.kernel, e.pool, d.channels, config.preprocessing.height,
                                    config.preprocessing.width};
    std::vector<std::size_t> all(p.dataset.records.size());
    std::iota(all.begin(), all.end(), 0);
    for (const auto& id : extractor_ids(config)) {
      Rng rng(derive_seed(config.seed, "extractor:" + id));
      auto spec = nn::build_toy_backbone(id, toy, rng);
      if (e.pretext) {
        nn::PretextConfig pc = e.pretext_config;
        pc.seed = derive_seed(config.seed, "pretext:" + id);
        nn::pretrain_on_rotations(spec, p.dataset, all, pc);
      }
      p.extractors.push_back(std::move(spec));
    }
  }
  return p;
}

std::vector<eval::Candidate> candidates(const RunConfig& config, const Prepared& p) {
  const auto members = model_members(config);
  const auto topology = config.model.topology;
  std::vector<eval::Candidate> out;
  const std::string name = topology == nn::Topology::single ? members.front() : std::string(nn::to_string(topology));
  out.push_back({name, false, [&config, &p, members, topology](std::uint64_t seed) {
                   return build_model(config, p, members, topology, seed);
                 }});
  if (topology != nn::Topology::single && config.model.evaluate_members) {
    for (const auto& m : members) {
      out.push_back({m, true, [&config, &p, m](std::uint64_t seed) {
                       return build_model(config, p, {m}, nn::Topology::single, seed);
                     }});
    }
  }
  return out;
}

int cmd_prepare(const RunConfig& config, std::ostream& out) {
  const auto p = prepare(config);
  out << "source: " << to_string(config.dataset.source) << "\n";
  out << "loaded: " << counts_line(p.raw) << "\n";
  out << "classes: " << counts_line(p.dataset) << "\n";
  out << "total: " << p.dataset.records.size() << "\n";
  const auto sizes = data::split_sizes(p.dataset.records.size(), config.mccv.ratios);
  out << "split:";
  for (data::Part part : data::kParts) out << " " << data::to_string(part) << "=" << sizes[static_cast<std::size_t>(part)];
  out << "\n";
  out << "extractors:";
  for (const auto& e : p.extractors) out << " " << e.id << "(" << e.output_dim << ")";
  out << "\n";
  return kOk;
}

int cmd_train(const RunConfig& config, std::ostream& out) {
  const auto p = prepare(config);
  const fs::path dir = run_dir(config) / "train";
  Manifest manifest(dir, "train", config);
  manifest.stage("data", "complete");
  try {
    const auto cache = features_for(p);
    manifest.stage("features", "complete");
    const auto cands = candidates(config, p);
    const auto split = data::split_mccv(p.dataset, data::SplitSpec{config.mccv.ratios, config.mccv.base_seed});
    const std::vector<data::Part> parts(data::kParts.begin(), data::kParts.end());
    auto trained = eval::run_candidate(cands.front(), p.dataset, split, cache, config.mccv, 0, parts);
    manifest.stage("training", "complete");

    eval::MCCVResult result;
    result.name = cands.front().name;
    result.topology = trained.run.topology;
    result.trainable_params = trained.run.trainable_params;
    eval::write_run_files(dir, result, trained.run);
    nn::save_model(trained.model, dir / "model.json");
    if (!trained.standardizer.empty()) {
      json st = json::array();
      for (std::size_t i = 0; i < trained.standardizer.mean.size(); ++i) {
        const auto& mu = trained.standardizer.mean[i];
        const auto& sd = trained.standardizer.scale[i];
        st.push_back({{"input", trained.model.extractors.at(i).id},
                      {"mean", std::vector<double>(mu.data(), mu.data() + mu.size())},
                      {"scale", std::vector<double>(sd.data(), sd.data() + sd.size())}});
      }
      eval::write_text(dir / "standardizer.json", st.dump(1) + "\n");
    }
    manifest.stage("evaluation", "complete");
    manifest.finish("complete");

    out << "model: " << result.name << " (" << nn::to_string(result.topology) << "), "
        << result.trainable_params << " trainable parameters\n";
    for (const auto& [part, ev] : trained.run.partitions) print_evaluation(out, std::string(data::to_string(part)), ev);
    out << "wrote " << dir.string() << "\n";
  } catch (...) {
    manifest.finish("failed");
    throw;
  }
  return kOk;
}

int cmd_mccv(const RunConfig& config, std::ostream& out) {
  const auto p = prepare(config);
  const fs::path dir = run_dir(config);
  Manifest manifest(dir, "mccv", config);
  manifest.stage("data", "complete");
  try {
    const auto cache = features_for(p);
    manifest.stage("features", "complete");
    json seeds = json::array();
    for (int r = 0; r < config.mccv.repetitions; ++r) seeds.push_back(data::repetition_seed(config.mccv.base_seed, r));
    manifest.set("repetition_seeds", seeds);
    const auto results = eval::run_mccv(candidates(config, p), p.dataset, cache, config.mccv);
    manifest.stage("training", "complete");
    eval::write_repetitions(dir, results);
    const auto rows = eval::summarize_runs(eval::load_runs(dir));
    eval::write_summary(dir, rows);
    manifest.stage("report", "complete");
    manifest.finish("complete");
    out << eval::summary_markdown(rows);
    out << "wrote " << dir.string() << "\n";
  } catch (...) {
    manifest.finish("failed");
    throw;
  }
  return kOk;
}

int cmd_report(const fs::path& dir, std::ostream& out) {
  const auto rows = eval::summarize_runs(eval::load_runs(dir));
  eval::write_summary(dir, rows);
  out << eval::summary_markdown(rows);
  return kOk;
}

int cmd_gradcheck(bool single_precision, std::ostream& out) {
  std::vector<gradcheck::Row> rows =
      single_precision ? gradcheck::op_suite<float>() : gradcheck::op_suite<double>();
  gradcheck::Row graph{"ffco_graph", 3, 0.0, 1e-4, false};
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    graph.max_rel_error = std::max(graph.max_rel_error, nn::ensemble_gradient_check(nn::Topology::ffco, seed));
  }
  graph.passed = graph.max_rel_error < graph.threshold;
  rows.push_back(graph);

  bool ok = true;
  out << std::left << std::setw(16) << "op" << std::setw(11) << "instances" << std::setw(16) << "max_rel_error"
      << std::setw(12) << "threshold" << "status\n";
  for (const auto& r : rows) {
    out << std::left << std::setw(16) << r.op << std::setw(11) << r.instances << std::setw(16) << std::scientific
        << std::setprecision(3) << r.max_rel_error << std::setw(12) << r.threshold << (r.passed ? "pass" : "FAIL")
        << "\n"
        << std::defaultfloat;
    ok = ok && r.passed;
  }
  return ok ? kOk : kVerification;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-level concatenation ensembles for image classification", "mednc"};
  app.fallthrough();
  app.require_subcommand(0, 1);
  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  bool paper_mode = false, print_default = false, corrupt = false, f32 = false;
  app.add_option("--config", config_path, "JSON run config");
  auto* out_opt = app.add_option("--out", out_dir, "Output directory (overrides output_dir)");
  auto* seed_opt = app.add_option("--seed", seed, "Seed for data, extractors and MCCV (overrides seed and base_seed)");
  app.add_flag("--paper-mode", paper_mode, "Resize 224, dropout 0.5, 10 repetitions, ratios 60/20/10/10");
  app.add_flag("--print-default-config", print_default, "Print the default config with every key and exit");

  auto* prepare_cmd = app.add_subcommand("prepare", "Load or generate data, balance it and print split sizes");
  auto* train_cmd = app.add_subcommand("train", "Train and evaluate the configured model once");
  auto* mccv_cmd = app.add_subcommand("mccv", "Monte Carlo cross-validation with summary tables");
  auto* report_cmd = app.add_subcommand("report", "Rebuild summary tables from stored metrics.json files");
  std::string report_dir;
  report_cmd->add_option("dir", report_dir, "Results directory (default <output_dir>/<run_id>)");
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every op and an FFCO graph");
  grad_cmd->add_flag("--f32", f32, "Check in single precision");
  grad_cmd->add_flag("--corrupt-dense-backward", corrupt)->group("");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigOrData;
  }

  try {
    if (print_default) {
      out << default_config_json().dump(2) << "\n";
      return kOk;
    }
    if (*grad_cmd) {
      debug::corrupt_dense_backward = corrupt;
      const int code = cmd_gradcheck(f32, out);
      debug::corrupt_dense_backward = false;
      return code;
    }
    RunConfig config = config_path.empty() ? parse_config(json::object()) : load_config(config_path);
    if (*out_opt) config.output_dir = out_dir;
    if (*seed_opt) {
      config.seed = seed;
      config.mccv.base_seed = seed;
    }
    if (paper_mode) apply_paper_mode(config);
    validate(config);

    if (*prepare_cmd) return cmd_prepare(config, out);
    if (*train_cmd) return cmd_train(config, out);
    if (*mccv_cmd) return cmd_mccv(config, out);
    if (*report_cmd) return cmd_report(report_dir.empty() ? run_dir(config) : fs::path(report_dir), out);
    out << app.help();
    return kConfigOrData;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigOrData;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kConfigOrData;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kConfigOrData;
  } catch (const LookupError& e) {
    err << "lookup error: " << e.what() << "\n";
    return kConfigOrData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kInternal;
  }
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace mednc::cli
