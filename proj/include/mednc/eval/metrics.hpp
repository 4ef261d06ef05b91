#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mednc/core/tensor.hpp"

namespace mednc::eval {

/// k x k counts, rows = actual class, columns = predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int k = 2);

  int k() const noexcept { return k_; }
  std::uint64_t at(int actual, int predicted) const;
  void add(int actual, int predicted, std::uint64_t n = 1);
  std::uint64_t total() const;
  std::uint64_t correct() const;

  /// One-vs-rest counts for `positive`; for k = 2 and positive = 1 these are
  /// the usual TP/FP/FN/TN.
  std::uint64_t tp(int positive = 1) const;
  std::uint64_t fp(int positive = 1) const;
  std::uint64_t fn(int positive = 1) const;
  std::uint64_t tn(int positive = 1) const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  int k_;
  std::vector<std::uint64_t> counts_;
};

/// Throws ContractError on length mismatch or labels outside [0, k).
ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> actual, int k);

/// Row-wise argmax of a (batch, k) distribution; ties go to the lowest index.
std::vector<int> argmax_rows(const Tensord& probabilities);

/// Metric value or the undefined marker (zero denominator).
using Metric = std::optional<double>;

struct MetricsReport {
  Metric accuracy;
  Metric precision;
  Metric sensitivity;
  Metric f1;
  Metric specificity;
  Metric fdr;
  std::vector<MetricsReport> per_class;  // k > 2 only: one-vs-rest values
};

inline constexpr std::array<const char*, 6> kMetricNames{"accuracy", "precision", "sensitivity", "f1", "specificity",
                                                         "fdr"};

Metric metric_by_name(const MetricsReport& r, std::string_view name);

/// Undefined collapsed to 0, as in tables that print such cells as zero.
inline double compat(const Metric& m) { return m.value_or(0.0); }

Metric accuracy(const ConfusionMatrix& cm);
Metric precision(const ConfusionMatrix& cm, int positive = 1);
Metric sensitivity(const ConfusionMatrix& cm, int positive = 1);
Metric specificity(const ConfusionMatrix& cm, int positive = 1);
Metric fdr(const ConfusionMatrix& cm, int positive = 1);
/// Precision x recall x 2 / (precision + recall).
Metric f1(const Metric& precision, const Metric& sensitivity);

/// k = 2: direct formulas for `positive`. k > 2: per-class one-vs-rest,
/// macro-averaged over the classes where each value is defined; macro F1 is
/// the harmonic mean of macro precision and macro sensitivity.
MetricsReport compute_metrics(const ConfusionMatrix& cm, int positive = 1);

}  // namespace mednc::eval
