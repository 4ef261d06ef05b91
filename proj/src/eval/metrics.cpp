#include "mednc/eval/metrics.hpp"

#include "mednc/core/errors.hpp"

namespace mednc::eval {

ConfusionMatrix::ConfusionMatrix(int k) : k_(k), counts_(static_cast<std::size_t>(k * k), 0) {
  if (k < 2) throw ContractError("confusion matrix needs at least two classes");
}

std::uint64_t ConfusionMatrix::at(int actual, int predicted) const {
  if (actual < 0 || actual >= k_ || predicted < 0 || predicted >= k_) {
    throw ContractError("confusion matrix index out of range");
  }
  return counts_[static_cast<std::size_t>(actual * k_ + predicted)];
}

void ConfusionMatrix::add(int actual, int predicted, std::uint64_t n) {
  if (actual < 0 || actual >= k_ || predicted < 0 || predicted >= k_) {
    throw ContractError("label (" + std::to_string(actual) + ", " + std::to_string(predicted) + ") outside [0, " +
                        std::to_string(k_) + ")");
  }
  counts_[static_cast<std::size_t>(actual * k_ + predicted)] += n;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (auto c : counts_) n += c;
  return n;
}

std::uint64_t ConfusionMatrix::correct() const {
  std::uint64_t n = 0;
  for (int c = 0; c < k_; ++c) n += at(c, c);
  return n;
}

std::uint64_t ConfusionMatrix::tp(int p) const { return at(p, p); }

std::uint64_t ConfusionMatrix::fp(int p) const {
  std::uint64_t n = 0;
  for (int a = 0; a < k_; ++a) {
    if (a != p) n += at(a, p);
  }
  return n;
}

std::uint64_t ConfusionMatrix::fn(int p) const {
  std::uint64_t n = 0;
  for (int q = 0; q < k_; ++q) {
    if (q != p) n += at(p, q);
  }
  return n;
}

std::uint64_t ConfusionMatrix::tn(int p) const { return total() - tp(p) - fp(p) - fn(p); }

ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> actual, int k) {
  if (predicted.size() != actual.size()) {
    throw ContractError("confusion: " + std::to_string(predicted.size()) + " predictions for " +
                        std::to_string(actual.size()) + " labels");
  }
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < actual.size(); ++i) cm.add(actual[i], predicted[i]);
  return cm;
}

std::vector<int> argmax_rows(const Tensord& probs) {
  if (probs.rank() != 2) throw DimensionError("argmax_rows expects (batch, k), got " + shape_string(probs.shape()));
  const Index n = probs.dim(0), k = probs.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    Index best = 0;
    for (Index c = 1; c < k; ++c) {
      if (probs[r * k + c] > probs[r * k + best]) best = c;
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

namespace {

Metric ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

void check_positive(const ConfusionMatrix& cm, int p) {
  if (p < 0 || p >= cm.k()) throw ConfigError("positive class " + std::to_string(p) + " outside [0, k)");
}

Metric macro(const std::vector<MetricsReport>& per, Metric MetricsReport::*field) {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : per) {
    if (r.*field) {
      sum += *(r.*field);
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

}  // namespace

Metric accuracy(const ConfusionMatrix& cm) { return ratio(cm.correct(), cm.total()); }

Metric precision(const ConfusionMatrix& cm, int p) {
  check_positive(cm, p);
  return ratio(cm.tp(p), cm.tp(p) + cm.fp(p));
}

Metric sensitivity(const ConfusionMatrix& cm, int p) {
  check_positive(cm, p);
  return ratio(cm.tp(p), cm.tp(p) + cm.fn(p));
}

Metric specificity(const ConfusionMatrix& cm, int p) {
  check_positive(cm, p);
  return ratio(cm.tn(p), cm.tn(p) + cm.fp(p));
}

Metric fdr(const ConfusionMatrix& cm, int p) {
  check_positive(cm, p);
  return ratio(cm.fp(p), cm.tp(p) + cm.fp(p));
}

Metric f1(const Metric& p, const Metric& r) {
  if (!p || !r || *p + *r == 0.0) return std::nullopt;
  return *p * *r * 2 / (*p + *r);
}

Metric metric_by_name(const MetricsReport& r, std::string_view name) {
  if (name == "accuracy") return r.accuracy;
  if (name == "precision") return r.precision;
  if (name == "sensitivity") return r.sensitivity;
  if (name == "f1") return r.f1;
  if (name == "specificity") return r.specificity;
  if (name == "fdr") return r.fdr;
  throw LookupError("unknown metric '" + std::string(name) + "'");
}

MetricsReport compute_metrics(const ConfusionMatrix& cm, int positive) {
  MetricsReport r;
  r.accuracy = accuracy(cm);
  if (cm.k() == 2) {
    r.precision = precision(cm, positive);
    r.sensitivity = sensitivity(cm, positive);
    r.specificity = specificity(cm, positive);
    r.fdr = fdr(cm, positive);
    r.f1 = f1(r.precision, r.sensitivity);
    return r;
  }
  for (int c = 0; c < cm.k(); ++c) {
    MetricsReport one;
    one.precision = precision(cm, c);
    one.sensitivity = sensitivity(cm, c);
    one.specificity = specificity(cm, c);
    one.fdr = fdr(cm, c);
    one.f1 = f1(one.precision, one.sensitivity);
    one.accuracy = ratio(cm.tp(c) + cm.tn(c), cm.total());
    r.per_class.push_back(one);
  }
  r.precision = macro(r.per_class, &MetricsReport::precision);
  r.sensitivity = macro(r.per_class, &MetricsReport::sensitivity);
  r.specificity = macro(r.per_class, &MetricsReport::specificity);
  r.fdr = macro(r.per_class, &MetricsReport::fdr);
  r.f1 = f1(r.precision, r.sensitivity);
  return r;
}

}  // namespace mednc::eval
