#include "mednc/nn/serialize.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "mednc/core/errors.hpp"

namespace mednc::nn {

using nlohmann::json;

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct Cursor {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;

  std::uint64_t read(int width, const char* what) {
    if (bytes.size() - pos < static_cast<std::size_t>(width)) {
      throw FormatError(std::string("parameter file truncated while reading ") + what, pos);
    }
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += static_cast<std::size_t>(width);
    return v;
  }
};

json shape_json(const Shape& s) {
  json j = json::array();
  for (Index d : s) j.push_back(d);
  return j;
}

Shape shape_from(const json& j) {
  Shape s;
  for (const auto& d : j) s.push_back(d.get<Index>());
  return s;
}

}  // namespace

std::vector<std::uint8_t> encode_params(const ParameterStore<double>& store) {
  std::vector<std::uint8_t> out{'M', 'E', 'D', 'P'};
  put_u32(out, kParamFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& e : store) {
    put_u32(out, static_cast<std::uint32_t>(e.tensor.rank()));
    for (Index d : e.tensor.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    for (Index i = 0; i < e.tensor.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(e.tensor[i]));
  }
  return out;
}

void decode_params(std::span<const std::uint8_t> bytes, ParameterStore<double>& store) {
  Cursor c{bytes};
  if (bytes.size() < 4 || std::string(bytes.begin(), bytes.begin() + 4) != "MEDP") {
    throw FormatError("bad parameter file magic", 0);
  }
  c.pos = 4;
  const auto version = c.read(4, "version");
  if (version != kParamFormatVersion) throw FormatError("unsupported parameter file version " + std::to_string(version), 4);
  const auto count = c.read(4, "count");
  if (count != store.size()) {
    throw FormatError("parameter file holds " + std::to_string(count) + " tensors, model expects " +
                      std::to_string(store.size()), 8);
  }
  for (ParamId p = 0; p < store.size(); ++p) {
    const std::size_t at = c.pos;
    const auto rank = c.read(4, "rank");
    Shape shape;
    for (std::uint64_t d = 0; d < rank; ++d) shape.push_back(static_cast<Index>(c.read(8, "extent")));
    auto& t = store.tensor(p);
    if (shape != t.shape()) {
      throw FormatError("parameter '" + store.entry(p).name + "' has shape " + shape_string(shape) + ", expected " +
                        shape_string(t.shape()), at);
    }
    for (Index i = 0; i < t.size(); ++i) t[i] = std::bit_cast<double>(c.read(8, "value"));
  }
  if (c.pos != bytes.size()) throw FormatError("trailing bytes in parameter file", c.pos);
}

void save_model(const Model& m, const std::filesystem::path& json_path) {
  json j;
  j["format"] = "mednc-model";
  j["version"] = kModelFormatVersion;
  j["name"] = m.name;
  j["topology"] = std::string(to_string(m.topology));
  j["combine_signal"] = std::string(to_string(m.combine_signal));
  j["head"] = {{"fc_width", m.head.fc_width},
               {"dropout_rate", m.head.dropout_rate},
               {"num_classes", m.head.num_classes},
               {"hidden_layers", m.head.hidden_layers}};
  j["grouping"] = {{"feature_groups", m.grouping.feature_groups}, {"fc_groups", m.grouping.fc_groups}};

  json extractors = json::array();
  for (const auto& e : m.extractors) {
    json x{{"id", e.id}, {"source", std::string(to_string(e.source))}, {"output_shape", shape_json(e.output_shape)}};
    if (e.source == ExtractorSource::toy_conv) {
      x["toy"] = {{"channels", e.toy.channels}, {"kernel", e.toy.kernel},       {"pool", e.toy.pool},
                  {"in_channels", e.toy.in_channels}, {"height", e.toy.height}, {"width", e.toy.width}};
    } else if (e.table) {
      x["table"] = {{"backbone_id", e.table->backbone_id()}, {"dim", e.table->dim()}};
    }
    extractors.push_back(std::move(x));
  }
  j["extractors"] = std::move(extractors);

  json nodes = json::array();
  for (const auto& n : m.graph.nodes()) {
    json x{{"kind", std::string(to_string(n.kind))},
           {"name", n.name},
           {"inputs", n.inputs},
           {"params", n.params},
           {"role", std::string(to_string(n.role))}};
    if (!n.tag.empty()) x["tag"] = n.tag;
    if (n.kind == OpKind::input) x["sample_shape"] = shape_json(n.sample_shape);
    switch (n.kind) {
      case OpKind::conv2d:
        x["attrs"] = {{"stride", n.attrs.stride}, {"padding", n.attrs.padding}};
        break;
      case OpKind::maxpool2d:
        x["attrs"] = {{"window", n.attrs.window}, {"stride", n.attrs.stride}};
        break;
      case OpKind::dropout:
        x["attrs"] = {{"rate", n.attrs.rate}};
        break;
      case OpKind::softmax:
      case OpKind::concatenate:
        x["attrs"] = {{"axis", n.attrs.axis}};
        break;
      default:
        break;
    }
    nodes.push_back(std::move(x));
  }
  j["nodes"] = std::move(nodes);

  json params = json::array();
  for (const auto& e : m.params) {
    params.push_back({{"name", e.name},
                      {"shape", shape_json(e.tensor.shape())},
                      {"frozen", e.frozen},
                      {"init", std::string(to_string(e.init))}});
  }
  j["params"] = std::move(params);
  j["symbols"] = m.symbols;

  auto side = json_path;
  side.replace_extension(".params");
  j["params_file"] = side.filename().string();

  std::ofstream out(json_path);
  if (!out) throw DataError("cannot write model file '" + json_path.string() + "'");
  out << j.dump(2) << '\n';

  const auto bytes = encode_params(m.params);
  std::ofstream bin(side, std::ios::binary);
  bin.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out || !bin) throw DataError("failed writing model '" + json_path.string() + "'");
}

Model load_model(const std::filesystem::path& json_path, const TableMap& tables) {
  std::ifstream in(json_path);
  if (!in) throw DataError("cannot open model file '" + json_path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("model file is not valid JSON: " + std::string(e.what()), e.byte);
  }
  try {
    if (j.at("format") != "mednc-model") throw DataError("not a mednc model file");
    if (j.at("version").get<int>() != kModelFormatVersion) {
      throw DataError("unsupported model format version " + j.at("version").dump());
    }
    Model m;
    m.name = j.at("name").get<std::string>();
    m.topology = topology_from_string(j.at("topology").get<std::string>());
    m.combine_signal = combine_signal_from_string(j.at("combine_signal").get<std::string>());
    const auto& h = j.at("head");
    m.head = {h.at("fc_width").get<Index>(), h.at("dropout_rate").get<double>(), h.at("num_classes").get<Index>(),
              h.at("hidden_layers").get<int>()};
    m.grouping.feature_groups = j.at("grouping").at("feature_groups").get<std::vector<std::vector<std::string>>>();
    m.grouping.fc_groups = j.at("grouping").at("fc_groups").get<std::vector<std::vector<std::size_t>>>();

    for (const auto& p : j.at("params")) {
      m.params.add(p.at("name").get<std::string>(), Tensord(shape_from(p.at("shape"))),
                   init_scheme_from_string(p.at("init").get<std::string>()), p.at("frozen").get<bool>());
    }
    auto side = json_path.parent_path() / j.at("params_file").get<std::string>();
    std::ifstream bin(side, std::ios::binary);
    if (!bin) throw DataError("cannot open parameter file '" + side.string() + "'");
    const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(bin), std::istreambuf_iterator<char>()};
    decode_params(bytes, m.params);

    for (const auto& x : j.at("nodes")) {
      OpNode n;
      n.kind = op_kind_from_string(x.at("kind").get<std::string>());
      n.name = x.at("name").get<std::string>();
      n.inputs = x.at("inputs").get<std::vector<NodeId>>();
      n.params = x.at("params").get<std::vector<ParamId>>();
      n.role = node_role_from_string(x.at("role").get<std::string>());
      n.tag = x.value("tag", std::string{});
      if (x.contains("sample_shape")) n.sample_shape = shape_from(x.at("sample_shape"));
      if (x.contains("attrs")) {
        const auto& a = x.at("attrs");
        n.attrs.stride = a.value("stride", n.attrs.stride);
        n.attrs.padding = a.value("padding", n.attrs.padding);
        n.attrs.window = a.value("window", n.attrs.window);
        n.attrs.rate = a.value("rate", n.attrs.rate);
        n.attrs.axis = a.value("axis", n.attrs.axis);
      }
      for (ParamId p : n.params) {
        if (p >= m.params.size()) throw DataError("node '" + n.name + "' references missing parameter");
      }
      const auto shapes = param_shapes(m.params, n);
      m.graph.add(std::move(n), shapes);
    }

    for (const auto& x : j.at("extractors")) {
      ExtractorSpec e;
      e.id = x.at("id").get<std::string>();
      e.source = extractor_source_from_string(x.at("source").get<std::string>());
      e.output_shape = shape_from(x.at("output_shape"));
      e.output_dim = shape_size(e.output_shape);
      e.frozen = true;
      if (e.source == ExtractorSource::toy_conv) {
        const auto& t = x.at("toy");
        e.toy = {t.at("channels").get<std::vector<Index>>(), t.at("kernel").get<Index>(), t.at("pool").get<Index>(),
                 t.at("in_channels").get<Index>(), t.at("height").get<Index>(), t.at("width").get<Index>()};
        for (std::size_t i = 0; i < e.toy.channels.size(); ++i) {
          const auto node = m.graph.find(e.id + "/conv" + std::to_string(i + 1));
          if (!node) throw DataError("model graph lacks convolution " + std::to_string(i + 1) + " of '" + e.id + "'");
          e.kernels.push_back(m.params.tensor(m.graph.node(*node).params.at(0)));
        }
      } else if (auto it = tables.find(e.id); it != tables.end()) {
        e.table = it->second;
      }
      m.extractors.push_back(std::move(e));
    }

    m.image = m.graph.find("image");
    for (const auto& e : m.extractors) {
      bool found = false;
      for (NodeId id : m.graph.with_role(NodeRole::extractor)) {
        if (m.graph.node(id).tag == e.id) {
          m.extractor_nodes.push_back(id);
          found = true;
        }
      }
      if (!found) throw DataError("model graph lacks extractor '" + e.id + "'");
    }
    auto require = [&](const std::string& name) {
      const auto id = m.graph.find(name);
      if (!id) throw DataError("model graph lacks node '" + name + "'");
      return *id;
    };
    m.target = require("target");
    m.output = require("output");
    m.loss = require("loss");
    m.combiner_params = m.graph.node(require("output/logits")).params;
    m.group_outputs = m.graph.with_role(NodeRole::group_output);
    m.auxiliary_losses = m.graph.with_role(NodeRole::auxiliary_loss);
    m.symbols = j.at("symbols").get<std::map<std::string, std::vector<NodeId>>>();
    return m;
  } catch (const json::exception& e) {
    throw DataError("malformed model file '" + json_path.string() + "': " + e.what());
  }
}

}  // namespace mednc::nn
