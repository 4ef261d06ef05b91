#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mednc/core/graph.hpp"
#include "mednc/data/dataset.hpp"
#include "mednc/data/feature_table.hpp"

namespace mednc::nn {

enum class ExtractorSource { toy_conv, feature_table };
std::string_view to_string(ExtractorSource s);
ExtractorSource extractor_source_from_string(std::string_view name);

/// conv -> relu -> maxpool per entry of `channels`. Convolutions use "same"
/// padding ((kernel - 1) / 2) and stride 1; pooling uses window = stride = pool.
struct ToyBackboneConfig {
  std::vector<Index> channels{8, 16};
  Index kernel = 3;
  Index pool = 2;
  Index in_channels = 1;
  Index height = 32;
  Index width = 32;
};

/// Per-sample output shape of the toy backbone; throws ConfigError naming the
/// block whose pooled extent reaches zero.
Shape toy_output_shape(const ToyBackboneConfig& config);

struct ExtractorSpec {
  std::string id;
  ExtractorSource source = ExtractorSource::toy_conv;
  ToyBackboneConfig toy;
  std::vector<Tensord> kernels;  // toy_conv: (c_out, c_in, k, k) per block
  std::shared_ptr<const data::FeatureTable> table;
  Shape output_shape;  // per-sample, before flattening
  Index output_dim = 0;
  bool frozen = false;
};

/// Random He-uniform kernels drawn from `rng`, then frozen.
ExtractorSpec build_toy_backbone(std::string id, const ToyBackboneConfig& config, Rng& rng);

/// Extractor whose forward pass is a lookup by sample id.
ExtractorSpec wrap_feature_table(std::shared_ptr<const data::FeatureTable> table, std::string id = {});

/// Throws ConfigError unless the extractor is frozen and internally consistent.
void validate(const ExtractorSpec& spec);

/// Stacks the pixels of the listed records into (n, C, H, W).
Tensord stack_images(const data::Dataset& dataset, std::span<const std::size_t> indices);

/// Toy backbone forward on an image batch (B, C, H, W) -> (B, output_shape...).
Tensord toy_forward(const ExtractorSpec& spec, const Tensord& images);

/// Features for the listed records, (n, output_shape...). Toy backbones run
/// in chunks of `chunk` images; tables are looked up by record id.
Tensord extract(const ExtractorSpec& spec, const data::Dataset& dataset, std::span<const std::size_t> indices,
                Index chunk = 256);

/// Adds the extractor's layers to a graph under construction. Toy backbones
/// consume `image`; tables become input nodes named "<id>/features". The
/// returned node carries role `extractor` and the extractor id as tag.
NodeId attach_extractor(GraphBuilder<double>& builder, const ExtractorSpec& spec, std::optional<NodeId> image);

struct PretextConfig {
  int epochs = 3;
  Index batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Optional warm start: trains the toy kernels (unfrozen) to predict which of
/// four 90-degree rotations was applied to each image, then freezes them.
/// Needs square images.
void pretrain_on_rotations(ExtractorSpec& spec, const data::Dataset& dataset, std::span<const std::size_t> indices,
                           const PretextConfig& config);

}  // namespace mednc::nn
