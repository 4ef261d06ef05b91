#include "mednc/data/feature_table.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "mednc/core/errors.hpp"

namespace mednc::data {


FeatureTable::FeatureTable(std::string backbone_id, Index dim, std::uint32_t num_classes)
    : backbone_id_(std::move(backbone_id)), dim_(dim), num_classes_(num_classes) {
  if (dim < 1) throw DataError("feature table '" + backbone_id_ + "': dim must be positive");
}

void FeatureTable::add(std::string id, std::uint32_t label, std::span<const float> row) {
  if (static_cast<Index>(row.size()) != dim_) {
    throw DataError("feature table '" + backbone_id_ + "': row '" + id + "' has " + std::to_string(row.size()) +
                    " values, expected " + std::to_string(dim_));
  }
  if (label >= num_classes_) {
    throw DataError("feature table '" + backbone_id_ + "': row '" + id + "' label " + std::to_string(label) +
                    " outside [0, " + std::to_string(num_classes_) + ")");
  }
  if (!index_.emplace(id, ids_.size()).second) {
    throw DataError("feature table '" + backbone_id_ + "': duplicate id '" + id + "'");
  }
  ids_.push_back(std::move(id));
  labels_.push_back(label);
  values_.insert(values_.end(), row.begin(), row.end());
}

std::span<const float> FeatureTable::row(std::size_t i) const {
  if (i >= ids_.size()) throw LookupError("feature table row " + std::to_string(i) + " out of range");
  return {values_.data() + i * static_cast<std::size_t>(dim_), static_cast<std::size_t>(dim_)};
}

std::size_t FeatureTable::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) {
    throw LookupError("sample id '" + id + "' not present in feature table '" + backbone_id_ + "'");
  }
  return it->second;
}

Tensord FeatureTable::lookup(std::span<const std::string> ids) const {
  Tensord out(Shape{static_cast<Index>(ids.size()), dim_});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto src = row_of(ids[r]);
    for (Index j = 0; j < dim_; ++j) out[static_cast<Index>(r) * dim_ + j] = static_cast<double>(src[static_cast<std::size_t>(j)]);
  }
  return out;
}

bool operator==(const FeatureTable& a, const FeatureTable& b) {
  if (a.dim_ != b.dim_ || a.num_classes_ != b.num_classes_ || a.ids_ != b.ids_ || a.labels_ != b.labels_) return false;
  return a.values_.size() == b.values_.size() &&
         std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(float)) == 0;
}

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("MEDF truncated while reading ") + what, pos_);
    }
  }

  std::uint16_t u16(const char* what) {
    need(2, what);
    const auto v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature table '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<std::uint8_t> encode_medf(const FeatureTable& table) {
  std::vector<std::uint8_t> out{'M', 'E', 'D', 'F'};
  put_u32(out, kMedfVersion);
  put_u32(out, static_cast<std::uint32_t>(table.size()));
  put_u32(out, static_cast<std::uint32_t>(table.dim()));
  put_u32(out, table.num_classes());
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& id = table.ids()[i];
    if (id.size() > 0xffff) throw DataError("sample id longer than 65535 bytes");
    put_u16(out, static_cast<std::uint16_t>(id.size()));
    out.insert(out.end(), id.begin(), id.end());
    put_u32(out, table.label(i));
    for (float f : table.row(i)) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

FeatureTable decode_medf(std::span<const std::uint8_t> bytes, std::string backbone_id) {
  Reader r(bytes);
  if (r.str(4, "magic") != "MEDF") throw FormatError("bad MEDF magic", 0);
  const std::uint64_t version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kMedfVersion) {
    throw FormatError("unsupported MEDF version " + std::to_string(version), version_at);
  }
  const auto n = r.u32("sample count");
  const std::uint64_t dim_at = r.offset();
  const auto dim = r.u32("dim");
  const auto classes = r.u32("class count");
  if (dim == 0) throw FormatError("MEDF dim must be positive", dim_at);

  FeatureTable table(std::move(backbone_id), static_cast<Index>(dim), classes);
  std::vector<float> row(dim);
  for (std::uint32_t s = 0; s < n; ++s) {
    const std::uint64_t sample_at = r.offset();
    const auto len = r.u16("id length");
    std::string id = r.str(len, "id");
    const std::uint64_t label_at = r.offset();
    const auto label = r.u32("label");
    if (label >= classes) {
      throw FormatError("label " + std::to_string(label) + " of sample '" + id + "' exceeds class count " +
                        std::to_string(classes), label_at);
    }
    r.need(static_cast<std::size_t>(dim) * 4, "feature row");
    for (auto& f : row) f = std::bit_cast<float>(r.u32("feature"));
    try {
      table.add(std::move(id), label, row);
    } catch (const DataError& e) {
      throw FormatError(e.what(), sample_at);
    }
  }
  if (!r.at_end()) {
    throw FormatError("trailing bytes after " + std::to_string(n) + " samples (dim " + std::to_string(dim) +
                      " inconsistent with file size?)", r.offset());
  }
  return table;
}

void write_feature_table(const FeatureTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write feature table '" + path.string() + "'");
  if (path.extension() == ".csv") {
    out << encode_feature_csv(table);
  } else {
    const auto bytes = encode_medf(table);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw DataError("failed writing feature table '" + path.string() + "'");
}

FeatureTable read_feature_table(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  if (path.extension() == ".csv") {
    return decode_feature_csv(std::string(bytes.begin(), bytes.end()), path.stem().string());
  }
  return decode_medf(bytes, path.stem().string());
}

std::string encode_feature_csv(const FeatureTable& table) {
  std::string out = "id,label";
  for (Index j = 0; j < table.dim(); ++j) out += ",f" + std::to_string(j);
  out += '\n';
  char buf[64];
  for (std::size_t i = 0; i < table.size(); ++i) {
    out += table.ids()[i];
    out += ',' + std::to_string(table.label(i));
    for (float f : table.row(i)) {
      const auto res = std::to_chars(buf, buf + sizeof(buf), f);
      out += ',';
      out.append(buf, res.ptr);
    }
    out += '\n';
  }
  return out;
}

FeatureTable decode_feature_csv(const std::string& text, std::string backbone_id, std::uint32_t num_classes) {
  std::vector<std::string> lines;
  std::vector<std::uint64_t> offsets;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) {
      lines.push_back(std::move(line));
      offsets.push_back(pos);
    }
    pos = end + 1;
  }
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  if (lines.empty()) throw FormatError("feature CSV is missing its header row", 0);
  const auto header = split(lines[0]);
  if (header.size() < 3 || header[0] != "id" || header[1] != "label") {
    throw FormatError("feature CSV header must be id,label,f0,...", 0);
  }
  for (std::size_t j = 2; j < header.size(); ++j) {
    if (header[j] != "f" + std::to_string(j - 2)) {
      throw FormatError("feature CSV header column " + std::to_string(j) + " should be f" + std::to_string(j - 2), 0);
    }
  }
  const std::size_t dim = header.size() - 2;

  struct Parsed {
    std::string id;
    std::uint32_t label;
    std::vector<float> row;
  };
  std::vector<Parsed> rows;
  std::uint32_t max_label = 0;
  for (std::size_t l = 1; l < lines.size(); ++l) {
    const auto cells = split(lines[l]);
    if (cells.size() != dim + 2) {
      throw FormatError("feature CSV line " + std::to_string(l + 1) + " has " + std::to_string(cells.size()) +
                        " cells, expected " + std::to_string(dim + 2), offsets[l]);
    }
    Parsed p{cells[0], 0, std::vector<float>(dim)};
    auto bad = [&](const std::string& c) {
      return FormatError("feature CSV line " + std::to_string(l + 1) + ": cannot parse '" + c + "'", offsets[l]);
    };
    {
      const auto& c = cells[1];
      auto res = std::from_chars(c.data(), c.data() + c.size(), p.label);
      if (res.ec != std::errc() || res.ptr != c.data() + c.size()) throw bad(c);
    }
    for (std::size_t j = 0; j < dim; ++j) {
      const auto& c = cells[j + 2];
      auto res = std::from_chars(c.data(), c.data() + c.size(), p.row[j]);
      if (res.ec != std::errc() || res.ptr != c.data() + c.size()) throw bad(c);
    }
    max_label = std::max(max_label, p.label);
    rows.push_back(std::move(p));
  }
  if (num_classes == 0) num_classes = rows.empty() ? 2 : std::max<std::uint32_t>(2, max_label + 1);
  FeatureTable table(std::move(backbone_id), static_cast<Index>(dim), num_classes);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    try {
      table.add(std::move(rows[i].id), rows[i].label, rows[i].row);
    } catch (const DataError& e) {
      throw FormatError(e.what(), offsets[i + 1]);
    }
  }
  return table;
}

}  // namespace mednc::data
