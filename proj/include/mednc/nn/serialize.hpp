#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include "mednc/nn/model.hpp"

namespace mednc::nn {

inline constexpr int kModelFormatVersion = 1;

/// Parameter side-car layout (little-endian): "MEDP" | u32 version | u32 count,
/// then per parameter: u32 rank | rank x u64 extents | f64 values.
inline constexpr std::uint32_t kParamFormatVersion = 1;

std::vector<std::uint8_t> encode_params(const ParameterStore<double>& store);
/// Replaces the tensors of `store` in order; shapes must match.
void decode_params(std::span<const std::uint8_t> bytes, ParameterStore<double>& store);

/// Writes `json_path` (topology, grouping, graph, parameter metadata) and a
/// side-car "<stem>.params" next to it.
void save_model(const Model& model, const std::filesystem::path& json_path);

using TableMap = std::map<std::string, std::shared_ptr<const data::FeatureTable>>;

/// Inverse of save_model. Feature-table extractors are re-attached from
/// `tables` by extractor id when present.
Model load_model(const std::filesystem::path& json_path, const TableMap& tables = {});

}  // namespace mednc::nn
