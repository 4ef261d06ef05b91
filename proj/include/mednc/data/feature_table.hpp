#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mednc/core/tensor.hpp"

namespace mednc::data {

/// Precomputed backbone features keyed by sample id. Rows are stored in
/// file order as 32-bit floats, exactly as they travel in MEDF.
class FeatureTable {
 public:
  FeatureTable() = default;
  FeatureTable(std::string backbone_id, Index dim, std::uint32_t num_classes);

  void add(std::string id, std::uint32_t label, std::span<const float> row);

  const std::string& backbone_id() const noexcept { return backbone_id_; }
  void set_backbone_id(std::string id) { backbone_id_ = std::move(id); }
  Index dim() const noexcept { return dim_; }
  std::uint32_t num_classes() const noexcept { return num_classes_; }
  std::size_t size() const noexcept { return ids_.size(); }

  const std::vector<std::string>& ids() const noexcept { return ids_; }
  std::uint32_t label(std::size_t row) const { return labels_.at(row); }
  std::uint32_t label_of(const std::string& id) const { return labels_.at(index_of(id)); }
  std::span<const float> row(std::size_t i) const;
  std::span<const float> row_of(const std::string& id) const { return row(index_of(id)); }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  /// Throws LookupError naming the id.
  std::size_t index_of(const std::string& id) const;

  /// (ids.size(), dim) matrix of the requested rows, widened to double.
  Tensord lookup(std::span<const std::string> ids) const;

  friend bool operator==(const FeatureTable& a, const FeatureTable& b);

 private:
  std::string backbone_id_;
  Index dim_ = 0;
  std::uint32_t num_classes_ = 0;
  std::vector<std::string> ids_;
  std::vector<std::uint32_t> labels_;
  std::vector<float> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// MEDF binary layout (little-endian, unpadded):
///   "MEDF" | u32 version = 1 | u32 n_samples | u32 dim | u32 n_classes
///   then per sample: u16 id_len | id bytes | u32 label | dim x f32
inline constexpr std::uint32_t kMedfVersion = 1;

std::vector<std::uint8_t> encode_medf(const FeatureTable& table);
FeatureTable decode_medf(std::span<const std::uint8_t> bytes, std::string backbone_id);

void write_feature_table(const FeatureTable& table, const std::filesystem::path& path);

/// Reads MEDF, or CSV when the extension is .csv. backbone_id is the file stem.
FeatureTable read_feature_table(const std::filesystem::path& path);

/// CSV alternative: header `id,label,f0,...,f{dim-1}`, one row per sample.
std::string encode_feature_csv(const FeatureTable& table);
FeatureTable decode_feature_csv(const std::string& text, std::string backbone_id,
                                std::uint32_t num_classes = 0);

}  // namespace mednc::data
