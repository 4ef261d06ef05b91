#include "mednc/nn/extractor.hpp"

#include <cmath>

#include "mednc/core/errors.hpp"
#include "mednc/core/ops.hpp"
#include "mednc/core/optimizer.hpp"

namespace mednc::nn {

std::string_view to_string(ExtractorSource s) { return s == ExtractorSource::toy_conv ? "toy_conv" : "feature_table"; }

ExtractorSource extractor_source_from_string(std::string_view name) {
  if (name == "toy_conv") return ExtractorSource::toy_conv;
  if (name == "feature_table") return ExtractorSource::feature_table;
  throw ConfigError("unknown extractor source '" + std::string(name) + "'");
}

namespace {

Index same_padding(Index kernel) { return (kernel - 1) / 2; }

}  // namespace

Shape toy_output_shape(const ToyBackboneConfig& cfg) {
  if (cfg.channels.empty()) throw ConfigError("toy backbone needs at least one block");
  if (cfg.kernel < 1 || cfg.pool < 1) throw ConfigError("toy backbone kernel and pool must be positive");
  if (cfg.in_channels < 1 || cfg.height < 1 || cfg.width < 1) throw ConfigError("toy backbone input extents must be positive");
  Index h = cfg.height, w = cfg.width;
  for (std::size_t b = 0; b < cfg.channels.size(); ++b) {
    const std::string block = "block " + std::to_string(b + 1);
    if (cfg.channels[b] < 1) throw ConfigError("toy backbone " + block + " has no output channels");
    const Index pad = same_padding(cfg.kernel);
    h = ops::conv_output_extent(h, cfg.kernel, 1, pad);
    w = ops::conv_output_extent(w, cfg.kernel, 1, pad);
    if (h < 1 || w < 1) throw ConfigError("toy backbone " + block + ": convolution output is empty");
    h = h < cfg.pool ? 0 : ops::pool_output_extent(h, cfg.pool, cfg.pool);
    w = w < cfg.pool ? 0 : ops::pool_output_extent(w, cfg.pool, cfg.pool);
    if (h < 1 || w < 1) {
      throw ConfigError("toy backbone " + block + ": pooled size reaches zero (" + std::to_string(h) + "x" +
                        std::to_string(w) + ")");
    }
  }
  return {cfg.channels.back(), h, w};
}

ExtractorSpec build_toy_backbone(std::string id, const ToyBackboneConfig& config, Rng& rng) {
  ExtractorSpec spec;
  spec.id = std::move(id);
  spec.source = ExtractorSource::toy_conv;
  spec.toy = config;
  spec.output_shape = toy_output_shape(config);
  spec.output_dim = shape_size(spec.output_shape);
  Index c_in = config.in_channels;
  for (Index c_out : config.channels) {
    Tensord k(Shape{c_out, c_in, config.kernel, config.kernel});
    const double limit = std::sqrt(6.0 / static_cast<double>(c_in * config.kernel * config.kernel));
    for (Index i = 0; i < k.size(); ++i) k[i] = rng.uniform(-limit, limit);
    spec.kernels.push_back(std::move(k));
    c_in = c_out;
  }
  spec.frozen = true;
  return spec;
}

ExtractorSpec wrap_feature_table(std::shared_ptr<const data::FeatureTable> table, std::string id) {
  if (!table) throw ConfigError("wrap_feature_table: null table");
  ExtractorSpec spec;
  spec.id = id.empty() ? table->backbone_id() : std::move(id);
  spec.source = ExtractorSource::feature_table;
  spec.output_shape = {table->dim()};
  spec.output_dim = table->dim();
  spec.table = std::move(table);
  spec.frozen = true;
  return spec;
}

void validate(const ExtractorSpec& spec) {
  if (spec.id.empty()) throw ConfigError("extractor id must not be empty");
  if (!spec.frozen) throw ConfigError("extractor '" + spec.id + "' is not finalized (frozen)");
  if (spec.source == ExtractorSource::feature_table) {
    if (!spec.table) throw ConfigError("extractor '" + spec.id + "' has no feature table attached");
    if (spec.output_dim != spec.table->dim()) throw ConfigError("extractor '" + spec.id + "' output_dim mismatch");
    return;
  }
  if (spec.kernels.size() != spec.toy.channels.size()) {
    throw ConfigError("extractor '" + spec.id + "' has " + std::to_string(spec.kernels.size()) + " kernels for " +
                      std::to_string(spec.toy.channels.size()) + " blocks");
  }
  if (toy_output_shape(spec.toy) != spec.output_shape || shape_size(spec.output_shape) != spec.output_dim) {
    throw ConfigError("extractor '" + spec.id + "' output shape is inconsistent with its configuration");
  }
}

Tensord stack_images(const data::Dataset& dataset, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("no images to stack");
  const auto& first = dataset.records.at(indices[0]);
  if (!first.has_pixels()) throw DataError("sample '" + first.id + "' has no pixels");
  Shape shape{static_cast<Index>(indices.size())};
  shape.insert(shape.end(), first.pixels.shape().begin(), first.pixels.shape().end());
  Tensord out(shape);
  const Index per = first.pixels.size();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& rec = dataset.records.at(indices[r]);
    if (rec.pixels.shape() != first.pixels.shape()) {
      throw DataError("image '" + rec.id + "' has shape " + shape_string(rec.pixels.shape()) + ", expected " +
                      shape_string(first.pixels.shape()) + " (resize first)");
    }
    out.values().segment(static_cast<Index>(r) * per, per) = rec.pixels.values();
  }
  return out;
}

Tensord toy_forward(const ExtractorSpec& spec, const Tensord& images) {
  if (spec.source != ExtractorSource::toy_conv) throw ConfigError("toy_forward on a table extractor");
  const Shape expected{spec.toy.in_channels, spec.toy.height, spec.toy.width};
  if (images.rank() != 4 || !std::equal(expected.begin(), expected.end(), images.shape().begin() + 1)) {
    throw DimensionError("extractor '" + spec.id + "' expects images (B, " + std::to_string(expected[0]) + ", " +
                         std::to_string(expected[1]) + ", " + std::to_string(expected[2]) + "), got " +
                         shape_string(images.shape()));
  }
  Tensord x = images;
  const Index pad = same_padding(spec.toy.kernel);
  for (const auto& k : spec.kernels) {
    x = ops::relu(ops::conv2d(x, k, 1, pad));
    x = ops::maxpool2d(x, spec.toy.pool, spec.toy.pool).output;
  }
  return x;
}

Tensord extract(const ExtractorSpec& spec, const data::Dataset& dataset, std::span<const std::size_t> indices,
                Index chunk) {
  if (spec.source == ExtractorSource::feature_table) {
    std::vector<std::string> ids;
    ids.reserve(indices.size());
    for (auto i : indices) ids.push_back(dataset.records.at(i).id);
    return spec.table->lookup(ids);
  }
  Shape shape{static_cast<Index>(indices.size())};
  shape.insert(shape.end(), spec.output_shape.begin(), spec.output_shape.end());
  Tensord out(shape);
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t n = std::min(indices.size() - start, static_cast<std::size_t>(chunk));
    const auto feats = toy_forward(spec, stack_images(dataset, indices.subspan(start, n)));
    out.values().segment(static_cast<Index>(start) * spec.output_dim, feats.size()) = feats.values();
  }
  return out;
}

NodeId attach_extractor(GraphBuilder<double>& b, const ExtractorSpec& spec, std::optional<NodeId> image) {
  validate(spec);
  NodeId x;
  if (spec.source == ExtractorSource::feature_table) {
    x = b.input(spec.id + "/features", spec.output_shape, NodeRole::extractor, spec.id);
    return x;
  }
  if (!image) throw ConfigError("toy extractor '" + spec.id + "' needs an image input");
  x = *image;
  const Index pad = same_padding(spec.toy.kernel);
  for (std::size_t i = 0; i < spec.kernels.size(); ++i) {
    const std::string n = std::to_string(i + 1);
    x = b.conv2d(x, spec.kernels[i], 1, pad, spec.id + "/conv" + n, true);
    x = b.relu(x, spec.id + "/relu" + n);
    x = b.maxpool2d(x, spec.toy.pool, spec.toy.pool, spec.id + "/pool" + n);
  }
  auto& node = b.graph().node(x);
  node.role = NodeRole::extractor;
  node.tag = spec.id;
  return x;
}

void pretrain_on_rotations(ExtractorSpec& spec, const data::Dataset& dataset, std::span<const std::size_t> indices,
                           const PretextConfig& config) {
  if (spec.source != ExtractorSource::toy_conv) throw ConfigError("only toy backbones can be pretrained");
  if (spec.toy.height != spec.toy.width) throw ConfigError("rotation pretext needs square images");
  if (indices.empty()) throw ConfigError("rotation pretext needs at least one image");

  Graph graph;
  ParameterStore<double> store;
  Rng rng(config.seed);
  GraphBuilder<double> b(graph, store, rng);
  const NodeId image = b.input("image", {spec.toy.in_channels, spec.toy.height, spec.toy.width});
  const NodeId target = b.input("target", {4}, NodeRole::target);
  NodeId x = image;
  const Index pad = same_padding(spec.toy.kernel);
  std::vector<ParamId> kernel_ids;
  for (std::size_t i = 0; i < spec.kernels.size(); ++i) {
    x = b.conv2d(x, spec.kernels[i], 1, pad, "conv" + std::to_string(i + 1), false);
    kernel_ids.push_back(graph.node(x).params[0]);
    x = b.relu(x, "relu" + std::to_string(i + 1));
    x = b.maxpool2d(x, spec.toy.pool, spec.toy.pool, "pool" + std::to_string(i + 1));
  }
  x = b.flatten(x, "flat");
  x = b.dense(x, 4, false, "rotation");
  const NodeId probs = b.softmax(x, "probs");
  const NodeId loss = b.cross_entropy(probs, target, "loss");

  const Tensord images = stack_images(dataset, indices);
  const Index n = images.dim(0), per = images.size() / n;
  Optimizer<double> opt(OptimizerConfig{Algorithm::adam, config.lr});
  Session<double> session(graph, store);
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index bs = std::min(config.batch_size, n - start);
      Tensord batch(Shape{bs, spec.toy.in_channels, spec.toy.height, spec.toy.width});
      Tensord onehot(Shape{bs, 4});
      for (Index r = 0; r < bs; ++r) {
        const Index src = order[static_cast<std::size_t>(start + r)];
        Tensord img(Shape{spec.toy.in_channels, spec.toy.height, spec.toy.width},
                    images.values().segment(src * per, per));
        const auto turn = static_cast<int>(rng.below(4));
        batch.values().segment(r * per, per) = data::rotate(img, 90 * turn).values();
        onehot[r * 4 + turn] = 1.0;
      }
      session.bind(image, std::move(batch));
      session.bind(target, std::move(onehot));
      session.forward(loss, ops::Mode::train, &rng);
      session.backward(loss);
      opt.step(store);
    }
  }
  for (std::size_t i = 0; i < kernel_ids.size(); ++i) {
    spec.kernels[i] = store.tensor(kernel_ids[i]);
    spec.kernels[i].clear_grad();
  }
  spec.frozen = true;
}

}  // namespace mednc::nn
