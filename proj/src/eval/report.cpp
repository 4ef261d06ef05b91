#include "mednc/eval/report.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mednc/core/errors.hpp"

namespace mednc::eval {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json metric_json(const Metric& m) { return m ? json(*m) : json(nullptr); }

std::string role_of(const MCCVResult& r) {
  if (r.member) return "member";
  return r.topology == nn::Topology::single ? "single" : "ensemble";
}

std::string g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string opt_g17(const std::optional<double>& v) { return v ? g17(*v) : "n/a"; }

std::optional<double> parse_opt(const std::string& cell) {
  if (cell == "n/a") return std::nullopt;
  std::size_t used = 0;
  const double v = std::stod(cell, &used);
  if (used != cell.size()) throw DataError("summary.csv: bad number '" + cell + "'");
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void check_csv_safe(const std::string& s) {
  if (s.find_first_of(",\"\n\r") != std::string::npos) {
    throw ContractError("name '" + s + "' cannot be written to CSV");
  }
}

}  // namespace

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json metrics_document(const MCCVResult& result, const RunResult& run) {
  json doc;
  doc["model"] = result.name;
  doc["topology"] = std::string(nn::to_string(result.topology));
  doc["role"] = role_of(result);
  doc["repetition"] = run.repetition;
  doc["seeds"] = {{"split", run.split_seed}, {"model", run.model_seed}, {"train", run.train_seed}};
  doc["trainable_params"] = run.trainable_params;
  doc["params_mb"] = static_cast<double>(run.trainable_params) * kBytesPerParam / 1e6;
  doc["epochs"] = run.curve.size();
  json compat_doc = json::object();
  json confusion = json::object();
  for (const auto& [part, ev] : run.partitions) {
    const std::string p(data::to_string(part));
    for (const char* name : kMetricNames) {
      const Metric m = metric_by_name(ev.metrics, name);
      doc[p + "_" + name] = metric_json(m);
      compat_doc[p + "_" + name] = compat(m);
    }
    doc[p + "_loss"] = ev.loss;
    json rows = json::array();
    for (int a = 0; a < ev.confusion.k(); ++a) {
      json row = json::array();
      for (int q = 0; q < ev.confusion.k(); ++q) row.push_back(ev.confusion.at(a, q));
      rows.push_back(row);
    }
    confusion[p] = rows;
  }
  doc["_compat"] = compat_doc;
  doc["confusion"] = confusion;
  return doc;
}

json timing_document(const RunResult& run) {
  json per_epoch = json::array();
  for (const auto& e : run.curve.epochs) per_epoch.push_back(e.seconds);
  return {{"seconds_per_epoch", per_epoch}, {"mean_seconds_per_epoch", run.curve.mean_seconds()}};
}

std::string curve_csv(const LearningCurve& curve) {
  std::string out = "epoch,train_loss,train_acc,val_loss,val_acc\n";
  for (const auto& e : curve.epochs) {
    out += std::to_string(e.epoch) + "," + g17(e.train_loss) + "," + g17(e.train_acc) + "," + g17(e.val_loss) + "," +
           g17(e.val_acc) + "\n";
  }
  return out;
}

std::string confusion_csv(const ConfusionMatrix& cm) {
  std::string out = "actual\\predicted";
  for (int q = 0; q < cm.k(); ++q) out += "," + std::to_string(q);
  out += "\n";
  for (int a = 0; a < cm.k(); ++a) {
    out += std::to_string(a);
    for (int q = 0; q < cm.k(); ++q) out += "," + std::to_string(cm.at(a, q));
    out += "\n";
  }
  return out;
}

void write_run_files(const fs::path& dir, const MCCVResult& result, const RunResult& run) {
  write_text(dir / "metrics.json", metrics_document(result, run).dump(2) + "\n");
  write_text(dir / "timing.json", timing_document(run).dump(2) + "\n");
  write_text(dir / "curve.csv", curve_csv(run.curve));
  for (const auto& [part, ev] : run.partitions) {
    if (part == data::Part::test_a || part == data::Part::test_b) {
      write_text(dir / ("confusion_" + std::string(data::to_string(part)) + ".csv"), confusion_csv(ev.confusion));
    }
  }
}

void write_repetitions(const fs::path& run_dir, const std::vector<MCCVResult>& results) {
  for (const auto& res : results) {
    for (const auto& run : res.repetitions) {
      fs::path dir = run_dir / ("rep" + std::to_string(run.repetition));
      if (res.member) dir = dir / "members" / res.name;
      write_run_files(dir, res, run);
    }
  }
}

std::vector<StoredRun> load_runs(const fs::path& root) {
  if (!fs::is_directory(root)) throw DataError("results directory '" + root.string() + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file() && entry.path().filename() == "metrics.json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
    const auto da = std::distance(a.begin(), a.end()), db = std::distance(b.begin(), b.end());
    return da != db ? da < db : a < b;
  });
  if (files.empty()) throw DataError("no metrics.json found under '" + root.string() + "'");
  auto in_repetition = [&](const fs::path& f) {
    const std::string top = fs::relative(f, root).begin()->string();
    return top.size() > 3 && top.rfind("rep", 0) == 0 &&
           std::all_of(top.begin() + 3, top.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
  };
  if (std::any_of(files.begin(), files.end(), in_repetition)) {
    files.erase(std::remove_if(files.begin(), files.end(), [&](const fs::path& f) { return !in_repetition(f); }),
                files.end());
  }
  std::vector<StoredRun> runs;
  for (const auto& f : files) {
    StoredRun run{f.parent_path(), {}, std::nullopt};
    try {
      run.metrics = json::parse(read_text(f));
      const auto timing = f.parent_path() / "timing.json";
      if (fs::exists(timing)) run.timing = json::parse(read_text(timing));
    } catch (const json::exception& e) {
      throw DataError(f.string() + ": " + e.what());
    }
    runs.push_back(std::move(run));
  }
  return runs;
}

std::vector<SummaryRow> summarize_runs(const std::vector<StoredRun>& runs) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const StoredRun*>> by_model;
  for (const auto& r : runs) {
    const std::string name = r.metrics.at("model").get<std::string>();
    if (!by_model.count(name)) order.push_back(name);
    by_model[name].push_back(&r);
  }
  std::vector<SummaryRow> rows;
  for (const auto& name : order) {
    const auto& group = by_model[name];
    const json& first = group.front()->metrics;
    SummaryRow row;
    row.model = name;
    row.topology = first.at("topology").get<std::string>();
    row.role = first.at("role").get<std::string>();
    row.partition = first.contains("testB_accuracy") ? "testB" : "testA";
    row.repetitions = static_cast<int>(group.size());
    row.trainable_params = first.at("trainable_params").get<Index>();
    row.params_mb = first.at("params_mb").get<double>();
    for (const char* metric : kMetricNames) {
      std::vector<Metric> values;
      for (const auto* r : group) {
        const auto it = r->metrics.find(row.partition + "_" + metric);
        if (it == r->metrics.end() || it->is_null()) {
          values.push_back(std::nullopt);
        } else {
          values.push_back(it->get<double>());
        }
      }
      row.metrics[metric] = summarize(values);
    }
    double seconds = 0.0;
    int timed = 0;
    for (const auto* r : group) {
      if (r->timing) {
        seconds += r->timing->at("mean_seconds_per_epoch").get<double>();
        ++timed;
      }
    }
    if (timed > 0) row.seconds_per_epoch = seconds / timed;
    rows.push_back(std::move(row));
  }
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& acc = rows[i].metrics["accuracy"].mean;
    if (acc && (!best || *acc > *rows[*best].metrics["accuracy"].mean)) best = i;
  }
  if (best) rows[*best].best = true;
  return rows;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "model,topology,role,partition,repetitions";
  for (const char* m : kMetricNames) out += std::string(",") + m + "_mean," + m + "_std";
  out += ",trainable_params,params_mb,seconds_per_epoch,best\n";
  for (const auto& r : rows) {
    check_csv_safe(r.model);
    out += r.model + "," + r.topology + "," + r.role + "," + r.partition + "," + std::to_string(r.repetitions);
    for (const char* m : kMetricNames) {
      const Stat& s = r.metrics.at(m);
      out += "," + opt_g17(s.mean) + "," + opt_g17(s.std);
    }
    out += "," + std::to_string(r.trainable_params) + "," + g17(r.params_mb) + "," + opt_g17(r.seconds_per_epoch) +
           "," + (r.best ? "1" : "0") + "\n";
  }
  return out;
}

std::vector<SummaryRow> parse_summary_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("summary.csv is empty");
  const std::size_t columns = 5 + 2 * kMetricNames.size() + 4;
  std::vector<SummaryRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != columns) throw DataError("summary.csv: expected " + std::to_string(columns) + " columns");
    SummaryRow r;
    r.model = cells[0];
    r.topology = cells[1];
    r.role = cells[2];
    r.partition = cells[3];
    r.repetitions = std::stoi(cells[4]);
    std::size_t c = 5;
    for (const char* m : kMetricNames) {
      Stat s;
      s.mean = parse_opt(cells[c++]);
      s.std = parse_opt(cells[c++]);
      r.metrics[m] = s;
    }
    r.trainable_params = std::stoll(cells[c++]);
    r.params_mb = *parse_opt(cells[c++]);
    r.seconds_per_epoch = parse_opt(cells[c++]);
    r.best = cells[c] == "1";
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string summary_markdown(const std::vector<SummaryRow>& rows) {
  std::string out =
      "| Model | Role | Partition | Reps | Accuracy | Precision | Sensitivity | F1 | Specificity | FDR | Params | MB | "
      "s/epoch |\n";
  out += "|---|---|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n";
  for (const auto& r : rows) {
    out += "| " + r.model + " | " + r.role + " | " + r.partition + " | " + std::to_string(r.repetitions) + " |";
    for (const char* m : kMetricNames) {
      const Stat& s = r.metrics.at(m);
      std::string cell = s.mean ? fixed4(*s.mean) : "undefined";
      cell += " ± " + (s.std ? fixed4(*s.std) : std::string("n/a"));
      if (r.best && std::string_view(m) == "accuracy") cell = "**" + cell + "**";
      out += " " + cell + " |";
    }
    out += " " + std::to_string(r.trainable_params) + " | " + fixed4(r.params_mb) + " | " +
           (r.seconds_per_epoch ? fixed4(*r.seconds_per_epoch) : std::string("n/a")) + " |\n";
  }
  return out;
}

void write_summary(const fs::path& dir, const std::vector<SummaryRow>& rows) {
  write_text(dir / "summary.csv", summary_csv(rows));
  write_text(dir / "summary.md", summary_markdown(rows));
}

}  // namespace mednc::eval
