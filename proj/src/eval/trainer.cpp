#include "mednc/eval/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "mednc/core/errors.hpp"

namespace mednc::eval {

namespace {

constexpr Index kEvalChunk = 256;

Tensord one_hot(const std::vector<int>& labels, Index k) {
  Tensord t(Shape{static_cast<Index>(labels.size()), k});
  for (std::size_t i = 0; i < labels.size(); ++i) t[static_cast<Index>(i) * k + labels[i]] = 1.0;
  return t;
}

std::vector<Index> as_rows(std::span<const std::size_t> indices) {
  return {indices.begin(), indices.end()};
}

Tensord concat_rows(const Tensord& a, const Tensord& b) {
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  Tensord out(shape);
  out.values().head(a.size()) = a.values();
  out.values().tail(b.size()) = b.values();
  return out;
}

void bind_inputs(Session<double>& s, const nn::Model& model, const FeatureSet& set, const std::vector<Index>& rows) {
  for (std::size_t i = 0; i < model.extractor_nodes.size(); ++i) {
    s.bind(model.extractor_nodes[i], slice_rows(set.inputs[i], rows));
  }
}

std::vector<Index> range_rows(Index begin, Index end) {
  std::vector<Index> rows(static_cast<std::size_t>(end - begin));
  std::iota(rows.begin(), rows.end(), begin);
  return rows;
}

struct FreezeGuard {
  explicit FreezeGuard(ParameterStore<double>& s) : store(s) {
    for (const auto& e : store) was_frozen.push_back(e.frozen);
  }
  ~FreezeGuard() {
    for (ParamId p = 0; p < store.size(); ++p) {
      if (was_frozen[p]) {
        store.freeze(p);
      } else {
        store.unfreeze(p);
      }
    }
  }
  ParameterStore<double>& store;
  std::vector<bool> was_frozen;
};

struct Stage {
  std::vector<NodeId> losses;
  std::vector<ParamId> trainable;
};

}  // namespace

void cache_features(FeatureCache& cache, std::span<const nn::ExtractorSpec> extractors, const data::Dataset& dataset) {
  std::vector<std::size_t> all(dataset.records.size());
  std::iota(all.begin(), all.end(), 0);
  for (const auto& e : extractors) {
    if (cache.count(e.id)) continue;
    cache.emplace(e.id, nn::extract(e, dataset, all));
  }
}

FeatureSet gather(const nn::Model& model, const FeatureCache& cache, const data::Dataset& dataset,
                  std::span<const std::size_t> indices) {
  FeatureSet set;
  const auto rows = as_rows(indices);
  for (const auto& e : model.extractors) {
    auto it = cache.find(e.id);
    if (it == cache.end()) throw LookupError("no cached features for extractor '" + e.id + "'");
    if (it->second.dim(0) != static_cast<Index>(dataset.records.size())) {
      throw ContractError("cached features for '" + e.id + "' do not cover the dataset");
    }
    set.inputs.push_back(slice_rows(it->second, rows));
  }
  for (std::size_t i : indices) set.labels.push_back(dataset.records.at(i).label);
  set.targets = one_hot(set.labels, model.head.num_classes);
  return set;
}

FeatureSet gather_augmented(const nn::Model& model, const FeatureCache& cache, const data::Dataset& dataset,
                            std::span<const std::size_t> indices, const data::AugmentSpec& augment) {
  FeatureSet set = gather(model, cache, dataset, indices);
  if (augment.empty()) return set;
  data::validate(augment);
  for (const auto& e : model.extractors) {
    if (e.source != nn::ExtractorSource::toy_conv) {
      throw ConfigError("augmentation needs image extractors; '" + e.id + "' is a feature table");
    }
  }
  std::vector<data::ImageRecord> originals;
  for (std::size_t i : indices) originals.push_back(dataset.records.at(i));
  auto all = data::augment(originals, augment);
  data::Dataset extra{dataset.class_names, {}};
  extra.records.assign(std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(originals.size())),
                       std::make_move_iterator(all.end()));
  std::vector<std::size_t> idx(extra.records.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t m = 0; m < model.extractors.size(); ++m) {
    set.inputs[m] = concat_rows(set.inputs[m], nn::extract(model.extractors[m], extra, idx));
  }
  for (const auto& r : extra.records) set.labels.push_back(r.label);
  set.targets = one_hot(set.labels, model.head.num_classes);
  return set;
}

FeatureSet select(const FeatureSet& set, const std::vector<Index>& rows) {
  FeatureSet out;
  for (const auto& t : set.inputs) out.inputs.push_back(slice_rows(t, rows));
  out.targets = slice_rows(set.targets, rows);
  for (Index r : rows) out.labels.push_back(set.labels.at(static_cast<std::size_t>(r)));
  return out;
}

namespace {

Eigen::Map<RowMatrix<double>> as_rows(Tensord& t, Index n) {
  return {t.values().data(), n, n == 0 ? 0 : t.size() / n};
}

}  // namespace

Standardizer fit_standardizer(const FeatureSet& set) {
  Standardizer s;
  const auto n = static_cast<Index>(set.size());
  if (n == 0) return s;
  for (const auto& t : set.inputs) {
    const Eigen::Map<const RowMatrix<double>> m(t.values().data(), n, t.size() / n);
    const Vector<double> mean = m.colwise().mean().transpose();
    const Vector<double> sd = (m.rowwise() - mean.transpose()).array().square().colwise().mean().sqrt().transpose();
    s.mean.push_back(mean);
    s.scale.push_back(sd.unaryExpr([](double v) { return v > 1e-8 ? v : 1.0; }));
  }
  return s;
}

void Standardizer::apply(FeatureSet& set) const {
  if (empty()) return;
  if (set.inputs.size() != mean.size()) throw ContractError("standardizer fitted on a different input layout");
  const auto n = static_cast<Index>(set.size());
  for (std::size_t i = 0; i < set.inputs.size(); ++i) {
    auto m = as_rows(set.inputs[i], n);
    if (m.cols() != mean[i].size()) throw ContractError("standardizer fitted on a different input width");
    m = ((m.rowwise() - mean[i].transpose()).array().rowwise() / scale[i].transpose().array()).matrix();
  }
}

std::string_view to_string(TrainMode m) { return m == TrainMode::joint ? "joint" : "staged"; }

TrainMode train_mode_from_string(std::string_view name) {
  if (name == "joint") return TrainMode::joint;
  if (name == "staged") return TrainMode::staged;
  throw ConfigError("unknown training mode '" + std::string(name) + "' (expected joint or staged)");
}

void validate(const TrainConfig& c) {
  if (c.epochs < 0) throw ConfigError("epochs must be >= 0, got " + std::to_string(c.epochs));
  if (c.batch_size < 1) throw ConfigError("batch size must be >= 1, got " + std::to_string(c.batch_size));
  validate(c.optimizer);
}

double LearningCurve::mean_seconds() const {
  if (epochs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : epochs) s += e.seconds;
  return s / static_cast<double>(epochs.size());
}

Tensord predict(nn::Model& model, const FeatureSet& set, std::optional<NodeId> output) {
  const NodeId out = output.value_or(model.output);
  const Index n = static_cast<Index>(set.size());
  const Index k = model.head.num_classes;
  Tensord probs(Shape{n, k});
  Session<double> s(model.graph, model.params);
  for (Index begin = 0; begin < n; begin += kEvalChunk) {
    const Index end = std::min(n, begin + kEvalChunk);
    bind_inputs(s, model, set, range_rows(begin, end));
    s.forward(out, ops::Mode::eval);
    probs.values().segment(begin * k, (end - begin) * k) = s.value(out).values();
  }
  return probs;
}

Evaluation evaluate(nn::Model& model, const FeatureSet& set, int positive, std::optional<NodeId> output) {
  if (set.size() == 0) throw ConfigError("cannot evaluate an empty partition");
  const Tensord probs = predict(model, set, output);
  Evaluation ev{confusion(argmax_rows(probs), set.labels, static_cast<int>(model.head.num_classes)), {}, 0.0};
  ev.metrics = compute_metrics(ev.confusion, positive);
  ev.loss = ops::cross_entropy(probs, set.targets);
  return ev;
}

LearningCurve train(nn::Model& model, const FeatureSet& train_set, const FeatureSet& val, const TrainConfig& config) {
  validate(config);
  if (train_set.size() == 0) throw ConfigError("training partition is empty");
  LearningCurve curve;
  if (config.epochs == 0) return curve;

  FreezeGuard guard(model.params);
  const auto& was_frozen = guard.was_frozen;
  auto trainable_where = [&](auto keep) {
    std::vector<ParamId> ids;
    for (ParamId p = 0; p < model.params.size(); ++p) {
      if (!was_frozen[p] && keep(p)) ids.push_back(p);
    }
    return ids;
  };
  auto is_combiner = [&](ParamId p) {
    return std::find(model.combiner_params.begin(), model.combiner_params.end(), p) != model.combiner_params.end();
  };

  std::vector<Stage> stages;
  if (config.mode == TrainMode::staged && !model.auxiliary_losses.empty()) {
    stages.push_back({model.auxiliary_losses, trainable_where([&](ParamId p) { return !is_combiner(p); })});
    stages.push_back({{model.loss}, trainable_where(is_combiner)});
  } else {
    stages.push_back({{model.loss}, trainable_where([](ParamId) { return true; })});
  }

  Rng rng(derive_seed(config.seed, "train"));
  const Index n = static_cast<Index>(train_set.size());
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  int epoch = 0;
  Session<double> s(model.graph, model.params);
  for (const auto& stage : stages) {
    for (ParamId p = 0; p < model.params.size(); ++p) {
      const bool train_now = std::find(stage.trainable.begin(), stage.trainable.end(), p) != stage.trainable.end();
      if (train_now) {
        model.params.unfreeze(p);
      } else {
        model.params.freeze(p);
      }
    }
    Optimizer<double> opt(config.optimizer);
    for (int e = 0; e < config.epochs; ++e) {
      ++epoch;
      const auto start = std::chrono::steady_clock::now();
      rng.shuffle(order.begin(), order.end());
      for (Index begin = 0; begin < n; begin += config.batch_size) {
        const Index end = std::min(n, begin + config.batch_size);
        const std::vector<Index> rows(order.begin() + begin, order.begin() + end);
        bind_inputs(s, model, train_set, rows);
        s.bind(model.target, slice_rows(train_set.targets, rows));
        s.forward(stage.losses, ops::Mode::train, &rng);
        for (NodeId l : stage.losses) {
          if (!std::isfinite(s.value(l)[0])) {
            throw NumericError("non-finite training loss at epoch " + std::to_string(epoch), epoch);
          }
        }
        s.backward(stage.losses);
        opt.step(model.params);
      }
      EpochRecord rec;
      rec.epoch = epoch;
      const auto tr = evaluate(model, train_set);
      rec.train_loss = tr.loss;
      rec.train_acc = compat(tr.metrics.accuracy);
      if (val.size() > 0) {
        const auto va = evaluate(model, val);
        rec.val_loss = va.loss;
        rec.val_acc = compat(va.metrics.accuracy);
      } else {
        rec.val_loss = rec.val_acc = std::numeric_limits<double>::quiet_NaN();
      }
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (!std::isfinite(rec.train_loss)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch), epoch);
      }
      curve.epochs.push_back(rec);
    }
  }
  return curve;
}

}  // namespace mednc::eval
