#include "mednc/nn/verify.hpp"

#include "mednc/core/gradcheck.hpp"

namespace mednc::nn {

double ensemble_gradient_check(Topology topology, std::uint64_t seed, Index feature_dim, Index fc_width, Index batch) {
  Rng rng(seed);
  const std::size_t members = topology == Topology::single ? 1 : 4;
  std::vector<ExtractorSpec> specs;
  for (std::size_t i = 0; i < members; ++i) {
    auto table = std::make_shared<data::FeatureTable>("m" + std::to_string(i), feature_dim, 2);
    std::vector<float> row(static_cast<std::size_t>(feature_dim));
    for (Index r = 0; r < batch; ++r) {
      for (auto& f : row) f = static_cast<float>(rng.uniform(-1, 1));
      table->add("s" + std::to_string(r), static_cast<std::uint32_t>(r % 2), row);
    }
    specs.push_back(wrap_feature_table(table));
  }
  HeadSpec head{fc_width, 0.5, 2, 1};
  Model m = topology == Topology::single ? build_single_model(specs[0], head, seed)
                                         : build_ensemble(specs, EnsembleSpec{topology, {}, head}, seed);

  gradcheck::Case<double> c;
  c.graph = m.graph;
  c.store = m.params;
  // Biases start at zero; perturb them so every term of the check is generic.
  for (auto& e : c.store) {
    if (!e.frozen) {
      for (Index i = 0; i < e.tensor.size(); ++i) e.tensor[i] += rng.uniform(-0.1, 0.1);
    }
  }
  std::vector<std::string> ids;
  for (Index r = 0; r < batch; ++r) ids.push_back("s" + std::to_string(r));
  for (std::size_t i = 0; i < specs.size(); ++i) {
    c.bindings.emplace_back(m.extractor_nodes[i], specs[i].table->lookup(ids));
    c.check_inputs.push_back(m.extractor_nodes[i]);
  }
  Tensord onehot(Shape{batch, 2});
  for (Index r = 0; r < batch; ++r) onehot[r * 2 + r % 2] = 1.0;
  c.bindings.emplace_back(m.target, onehot);
  c.objective = m.loss;
  c.mode = ops::Mode::train;
  c.dropout_seed = seed + 1;
  return gradcheck::check_case(c);
}

}  // namespace mednc::nn
