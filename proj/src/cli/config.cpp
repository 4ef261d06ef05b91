#include "mednc/cli/config.hpp"

#include <cctype>
#include <set>

#include "mednc/core/errors.hpp"
#include "mednc/eval/report.hpp"

namespace mednc::cli {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& message) {
  throw ConfigError(path + ": " + message);
}

/// Reads one JSON object, remembering which keys were consumed so that
/// unknown keys can be reported with their full path.
class Section {
 public:
  Section(const json& value, std::string path) : value_(value), path_(std::move(path)) {
    if (!value_.is_object()) fail(label(), "expected an object");
  }

  std::string path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    auto it = value_.find(key);
    if (it == value_.end() || it->is_null()) return fallback;
    return convert<T>(*it, path(key));
  }

  bool has(const std::string& key) const {
    auto it = value_.find(key);
    return it != value_.end() && !it->is_null();
  }

  void mark(const std::string& key) { seen_.insert(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return value_.at(key);
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    auto it = value_.find(key);
    if (it == value_.end() || it->is_null()) return Section(empty(), path(key));
    return Section(*it, path(key));
  }

  void finish() const {
    for (const auto& [key, v] : value_.items()) {
      if (!seen_.count(key)) fail(path(key), "unknown key");
    }
  }

  template <typename T>
  static T convert(const json& v, const std::string& where) {
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) fail(where, "expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) fail(where, "expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
            fail(where, "expected a non-negative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) fail(where, "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) fail(where, "expected a string");
      }
      return v.get<T>();
    } catch (const json::exception& e) {
      fail(where, e.what());
    }
  }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }

  std::string label() const { return path_.empty() ? "<root>" : path_; }

  const json& value_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename T>
std::vector<T> list(Section& s, const std::string& key, std::vector<T> fallback) {
  if (!s.has(key)) {
    s.mark(key);
    return fallback;
  }
  const json& v = s.raw(key);
  if (!v.is_array()) fail(s.path(key), "expected an array");
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.push_back(Section::convert<T>(v[i], s.path(key) + "[" + std::to_string(i) + "]"));
  }
  return out;
}

/// Runs a domain validator and re-labels its ConfigError with a JSON path.
template <typename F>
void at(const std::string& path, F&& check) {
  try {
    check();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    if (what.rfind(path, 0) == 0) throw;
    fail(path, what);
  }
}

SourceKind source_from_string(const std::string& s, const std::string& path) {
  if (s == "synthetic") return SourceKind::synthetic;
  if (s == "directory") return SourceKind::directory;
  if (s == "tables") return SourceKind::tables;
  fail(path, "unknown source '" + s + "' (expected synthetic, directory or tables)");
}

void check_name(const std::string& name, const std::string& path) {
  if (name.empty()) fail(path, "must not be empty");
  for (char c : name) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) {
      fail(path, "'" + name + "' may only contain letters, digits, '_', '-' and '.'");
    }
  }
}

}  // namespace

std::string_view to_string(SourceKind k) {
  switch (k) {
    case SourceKind::synthetic:
      return "synthetic";
    case SourceKind::directory:
      return "directory";
    case SourceKind::tables:
      return "tables";
  }
  return "?";
}

std::vector<std::string> extractor_ids(const RunConfig& c) {
  std::vector<std::string> ids;
  if (c.dataset.source == SourceKind::tables) {
    for (const auto& p : c.dataset.tables) ids.push_back(p.stem().string());
  } else {
    for (int i = 0; i < c.extractors.count; ++i) ids.push_back("toy" + std::to_string(i));
  }
  return ids;
}

std::vector<std::string> model_members(const RunConfig& c) {
  if (!c.model.members.empty()) return c.model.members;
  auto ids = extractor_ids(c);
  if (c.model.topology == nn::Topology::single && !ids.empty()) ids.resize(1);
  return ids;
}

void validate(const RunConfig& c) {
  check_name(c.run_id, "run_id");
  if (c.output_dir.empty()) fail("output_dir", "must not be empty");

  const auto& d = c.dataset;
  if (d.channels != 1 && d.channels != 3) fail("dataset.channels", "must be 1 or 3");
  if (d.source == SourceKind::synthetic) {
    if (d.synthetic.classes < 2) fail("dataset.synthetic.classes", "needs at least 2 classes");
    if (d.synthetic.per_class < 4) fail("dataset.synthetic.per_class", "needs at least 4 samples per class");
    if (d.synthetic.noise < 0.0) fail("dataset.synthetic.noise", "must be >= 0");
    if (d.synthetic.jitter < 0) fail("dataset.synthetic.jitter", "must be >= 0");
    if (d.positive_class >= d.synthetic.classes) fail("dataset.positive_class", "outside the class range");
  }
  if (d.source == SourceKind::directory && d.directory.empty()) fail("dataset.directory", "required for source directory");
  if (d.source == SourceKind::tables) {
    if (d.tables.empty()) fail("dataset.tables", "required for source tables");
    std::set<std::string> stems;
    for (std::size_t i = 0; i < d.tables.size(); ++i) {
      const auto stem = d.tables[i].stem().string();
      check_name(stem, "dataset.tables[" + std::to_string(i) + "]");
      if (!stems.insert(stem).second) fail("dataset.tables[" + std::to_string(i) + "]", "duplicate table id '" + stem + "'");
    }
    if (!d.class_names.empty() && d.class_names.size() < 2) fail("dataset.class_names", "needs at least 2 names");
  }
  if (d.positive_class < 0) fail("dataset.positive_class", "must be >= 0");

  const auto& pre = c.preprocessing;
  if (pre.height < 1) fail("preprocessing.height", "must be >= 1");
  if (pre.width < 1) fail("preprocessing.width", "must be >= 1");
  at("preprocessing.augment", [&] { data::validate(pre.augment); });
  if (!pre.augment.empty() && d.source == SourceKind::tables) {
    fail("preprocessing.augment", "augmentation needs image sources, not feature tables");
  }

  if (d.source != SourceKind::tables) {
    const auto& e = c.extractors;
    if (e.count < 1) fail("extractors.count", "must be >= 1");
    if (e.channels.empty()) fail("extractors.channels", "needs at least one block");
    for (std::size_t i = 0; i < e.channels.size(); ++i) {
      if (e.channels[i] < 1) fail("extractors.channels[" + std::to_string(i) + "]", "must be >= 1");
    }
    if (e.kernel < 1 || e.kernel % 2 == 0) fail("extractors.kernel", "must be an odd number >= 1");
    if (e.pool < 1) fail("extractors.pool", "must be >= 1");
    at("extractors", [&] {
      nn::toy_output_shape(nn::ToyBackboneConfig{e.channels, e.kernel, e.pool, d.channels, pre.height, pre.width});
    });
    if (e.pretext) {
      if (e.pretext_config.epochs < 0) fail("extractors.pretext.epochs", "must be >= 0");
      if (e.pretext_config.batch_size < 1) fail("extractors.pretext.batch_size", "must be >= 1");
      if (!(e.pretext_config.lr > 0.0)) fail("extractors.pretext.lr", "must be > 0");
      if (pre.height != pre.width) fail("extractors.pretext", "rotation pretext needs square images");
    }
  }

  const auto ids = extractor_ids(c);
  const std::set<std::string> known(ids.begin(), ids.end());
  const auto members = model_members(c);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < c.model.members.size(); ++i) {
    const auto& m = c.model.members[i];
    const std::string path = "model.members[" + std::to_string(i) + "]";
    if (!known.count(m)) fail(path, "unknown extractor '" + m + "'");
    if (!seen.insert(m).second) fail(path, "duplicate member '" + m + "'");
  }
  at("model.head", [&] { nn::validate(c.model.head); });
  if (c.model.topology == nn::Topology::single) {
    if (members.size() != 1) fail("model.members", "topology single needs exactly one member");
    if (c.model.grouping) fail("model.grouping", "not used by topology single");
  } else if (c.model.grouping) {
    at("model.grouping", [&] { nn::validate_grouping(c.model.topology, *c.model.grouping, members); });
  } else {
    at("model", [&] {
      nn::default_grouping(c.model.topology, members, c.model.group_size, c.model.fc_group_size);
    });
  }

  const auto& t = c.training;
  if (t.epochs < 0) fail("training.epochs", "must be >= 0, got " + std::to_string(t.epochs));
  if (t.batch_size < 1) fail("training.batch_size", "must be >= 1, got " + std::to_string(t.batch_size));
  if (!(t.optimizer.lr > 0.0)) fail("training.lr", "must be > 0");
  if (!(t.optimizer.beta1 >= 0.0 && t.optimizer.beta1 < 1.0)) fail("training.beta1", "must lie in [0, 1)");
  if (!(t.optimizer.beta2 >= 0.0 && t.optimizer.beta2 < 1.0)) fail("training.beta2", "must lie in [0, 1)");
  if (!(t.optimizer.eps > 0.0)) fail("training.eps", "must be > 0");
  if (c.mccv.repetitions < 1) fail("mccv.repetitions", "must be >= 1, got " + std::to_string(c.mccv.repetitions));
  if (c.mccv.threads < 0) fail("mccv.threads", "must be >= 0");
  at("mccv.ratios", [&] { data::validate(data::SplitSpec{c.mccv.ratios, 0}); });
  at("training", [&] { eval::validate(c.training); });
  at("mccv", [&] { eval::validate(c.mccv); });
}

RunConfig parse_config(const json& doc) {
  RunConfig c;
  Section root(doc, "");
  c.run_id = root.get<std::string>("run_id", c.run_id);
  c.output_dir = root.get<std::string>("output_dir", c.output_dir.string());
  c.seed = root.get<std::uint64_t>("seed", c.seed);

  {
    Section s = root.child("dataset");
    auto& d = c.dataset;
    d.source = source_from_string(s.get<std::string>("source", "synthetic"), s.path("source"));
    {
      Section syn = s.child("synthetic");
      d.synthetic.classes = syn.get<int>("classes", d.synthetic.classes);
      d.synthetic.per_class = syn.get<int>("per_class", d.synthetic.per_class);
      const auto pattern = syn.get<std::string>("pattern", std::string(data::to_string(d.synthetic.pattern)));
      at(syn.path("pattern"), [&] { d.synthetic.pattern = data::pattern_from_string(pattern); });
      d.synthetic.noise = syn.get<double>("noise", d.synthetic.noise);
      d.synthetic.jitter = syn.get<int>("jitter", d.synthetic.jitter);
      syn.finish();
    }
    d.directory = s.get<std::string>("directory", "");
    d.channels = s.get<Index>("channels", d.channels);
    for (const auto& t : list<std::string>(s, "tables", {})) d.tables.emplace_back(t);
    d.class_names = list<std::string>(s, "class_names", {});
    d.balance = s.get<bool>("balance", d.balance);
    d.positive_class = s.get<int>("positive_class", d.positive_class);
    s.finish();
  }
  {
    Section s = root.child("preprocessing");
    auto& p = c.preprocessing;
    p.height = s.get<Index>("height", p.height);
    p.width = s.get<Index>("width", p.width);
    Section a = s.child("augment");
    p.augment.horizontal_flip = a.get<bool>("horizontal_flip", false);
    p.augment.vertical_flip = a.get<bool>("vertical_flip", false);
    p.augment.rotations = list<int>(a, "rotations", {});
    a.finish();
    s.finish();
  }
  {
    Section s = root.child("extractors");
    auto& e = c.extractors;
    e.count = s.get<int>("count", e.count);
    e.channels = list<Index>(s, "channels", e.channels);
    e.kernel = s.get<Index>("kernel", e.kernel);
    e.pool = s.get<Index>("pool", e.pool);
    Section pt = s.child("pretext");
    e.pretext = pt.get<bool>("enabled", e.pretext);
    e.pretext_config.epochs = pt.get<int>("epochs", e.pretext_config.epochs);
    e.pretext_config.batch_size = pt.get<Index>("batch_size", e.pretext_config.batch_size);
    e.pretext_config.lr = pt.get<double>("lr", e.pretext_config.lr);
    pt.finish();
    s.finish();
  }
  {
    Section s = root.child("model");
    auto& m = c.model;
    const auto topo = s.get<std::string>("topology", std::string(nn::to_string(m.topology)));
    at(s.path("topology"), [&] { m.topology = nn::topology_from_string(topo); });
    m.members = list<std::string>(s, "members", {});
    if (s.has("grouping")) {
      Section g = s.child("grouping");
      nn::Grouping grouping;
      const json& fg = g.has("feature_groups") ? g.raw("feature_groups") : json::array();
      if (!fg.is_array()) fail(g.path("feature_groups"), "expected an array of arrays");
      for (std::size_t i = 0; i < fg.size(); ++i) {
        const std::string path = g.path("feature_groups") + "[" + std::to_string(i) + "]";
        if (!fg[i].is_array()) fail(path, "expected an array");
        std::vector<std::string> group;
        for (std::size_t j = 0; j < fg[i].size(); ++j) {
          group.push_back(Section::convert<std::string>(fg[i][j], path + "[" + std::to_string(j) + "]"));
        }
        grouping.feature_groups.push_back(group);
      }
      const json& fc = g.has("fc_groups") ? g.raw("fc_groups") : json::array();
      if (!fc.is_array()) fail(g.path("fc_groups"), "expected an array of arrays");
      for (std::size_t i = 0; i < fc.size(); ++i) {
        const std::string path = g.path("fc_groups") + "[" + std::to_string(i) + "]";
        if (!fc[i].is_array()) fail(path, "expected an array");
        std::vector<std::size_t> group;
        for (std::size_t j = 0; j < fc[i].size(); ++j) {
          group.push_back(Section::convert<std::size_t>(fc[i][j], path + "[" + std::to_string(j) + "]"));
        }
        grouping.fc_groups.push_back(group);
      }
      g.finish();
      m.grouping = grouping;
    } else {
      s.mark("grouping");
    }
    m.group_size = s.get<std::size_t>("group_size", m.group_size);
    m.fc_group_size = s.get<std::size_t>("fc_group_size", m.fc_group_size);
    Section h = s.child("head");
    m.head.fc_width = h.get<Index>("fc_width", m.head.fc_width);
    m.head.dropout_rate = h.get<double>("dropout", m.head.dropout_rate);
    m.head.hidden_layers = h.get<int>("hidden_layers", m.head.hidden_layers);
    h.finish();
    const auto signal = s.get<std::string>("combine_signal", std::string(nn::to_string(m.combine_signal)));
    at(s.path("combine_signal"), [&] { m.combine_signal = nn::combine_signal_from_string(signal); });
    m.evaluate_members = s.get<bool>("evaluate_members", m.evaluate_members);
    s.finish();
  }
  {
    Section s = root.child("training");
    auto& t = c.training;
    t.epochs = s.get<int>("epochs", t.epochs);
    t.batch_size = s.get<Index>("batch_size", t.batch_size);
    const auto algo = s.get<std::string>("optimizer", std::string(to_string(t.optimizer.algorithm)));
    at(s.path("optimizer"), [&] { t.optimizer.algorithm = algorithm_from_string(algo); });
    t.optimizer.lr = s.get<double>("lr", t.optimizer.lr);
    t.optimizer.beta1 = s.get<double>("beta1", t.optimizer.beta1);
    t.optimizer.beta2 = s.get<double>("beta2", t.optimizer.beta2);
    t.optimizer.eps = s.get<double>("eps", t.optimizer.eps);
    t.standardize = s.get<bool>("standardize", t.standardize);
    const auto mode = s.get<std::string>("mode", std::string(eval::to_string(t.mode)));
    at(s.path("mode"), [&] { t.mode = eval::train_mode_from_string(mode); });
    s.finish();
  }
  {
    Section s = root.child("mccv");
    auto& m = c.mccv;
    m.repetitions = s.get<int>("repetitions", m.repetitions);
    m.base_seed = s.get<std::uint64_t>("base_seed", c.seed);
    const auto ratios = list<double>(s, "ratios", {m.ratios.begin(), m.ratios.end()});
    if (ratios.size() != 4) fail(s.path("ratios"), "expected four ratios (train, val, testA, testB)");
    std::copy(ratios.begin(), ratios.end(), m.ratios.begin());
    m.threads = s.get<int>("threads", m.threads);
    s.finish();
  }
  root.finish();

  c.mccv.train = c.training;
  c.mccv.augment = c.preprocessing.augment;
  c.mccv.positive = c.dataset.positive_class;
  validate(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file '" + path.string() + "' does not exist");
  json doc;
  try {
    doc = json::parse(eval::read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(doc);
}

json to_json(const RunConfig& c) {
  json tables = json::array();
  for (const auto& t : c.dataset.tables) tables.push_back(t.string());
  json grouping = nullptr;
  if (c.model.grouping) {
    grouping = {{"feature_groups", c.model.grouping->feature_groups}, {"fc_groups", c.model.grouping->fc_groups}};
  }
  const auto& d = c.dataset;
  const auto& e = c.extractors;
  const auto& t = c.training;
  return {
      {"run_id", c.run_id},
      {"output_dir", c.output_dir.string()},
      {"seed", c.seed},
      {"dataset",
       {{"source", std::string(to_string(d.source))},
        {"synthetic",
         {{"classes", d.synthetic.classes},
          {"per_class", d.synthetic.per_class},
          {"pattern", std::string(data::to_string(d.synthetic.pattern))},
          {"noise", d.synthetic.noise},
          {"jitter", d.synthetic.jitter}}},
        {"directory", d.directory.string()},
        {"channels", d.channels},
        {"tables", tables},
        {"class_names", d.class_names},
        {"balance", d.balance},
        {"positive_class", d.positive_class}}},
      {"preprocessing",
       {{"height", c.preprocessing.height},
        {"width", c.preprocessing.width},
        {"augment",
         {{"horizontal_flip", c.preprocessing.augment.horizontal_flip},
          {"vertical_flip", c.preprocessing.augment.vertical_flip},
          {"rotations", c.preprocessing.augment.rotations}}}}},
      {"extractors",
       {{"count", e.count},
        {"channels", e.channels},
        {"kernel", e.kernel},
        {"pool", e.pool},
        {"pretext",
         {{"enabled", e.pretext},
          {"epochs", e.pretext_config.epochs},
          {"batch_size", e.pretext_config.batch_size},
          {"lr", e.pretext_config.lr}}}}},
      {"model",
       {{"topology", std::string(nn::to_string(c.model.topology))},
        {"members", c.model.members},
        {"grouping", grouping},
        {"group_size", c.model.group_size},
        {"fc_group_size", c.model.fc_group_size},
        {"head",
         {{"fc_width", c.model.head.fc_width},
          {"dropout", c.model.head.dropout_rate},
          {"hidden_layers", c.model.head.hidden_layers}}},
        {"combine_signal", std::string(nn::to_string(c.model.combine_signal))},
        {"evaluate_members", c.model.evaluate_members}}},
      {"training",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"optimizer", std::string(to_string(t.optimizer.algorithm))},
        {"lr", t.optimizer.lr},
        {"beta1", t.optimizer.beta1},
        {"beta2", t.optimizer.beta2},
        {"eps", t.optimizer.eps},
        {"mode", std::string(eval::to_string(t.mode))},
        {"standardize", t.standardize}}},
      {"mccv",
       {{"repetitions", c.mccv.repetitions},
        {"base_seed", c.mccv.base_seed},
        {"ratios", c.mccv.ratios},
        {"threads", c.mccv.threads}}},
  };
}

json default_config_json() { return to_json(parse_config(json::object())); }

void apply_paper_mode(RunConfig& c) {
  c.preprocessing.height = c.preprocessing.width = 224;
  c.model.head.dropout_rate = 0.5;
  c.mccv.repetitions = 10;
  c.mccv.ratios = {0.6, 0.2, 0.1, 0.1};
}

}  // namespace mednc::cli
