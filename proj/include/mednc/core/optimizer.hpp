#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "mednc/core/errors.hpp"
#include "mednc/core/graph.hpp"

namespace mednc {

enum class Algorithm { sgd, adam };

struct OptimizerConfig {
  Algorithm algorithm = Algorithm::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline std::string_view to_string(Algorithm a) { return a == Algorithm::sgd ? "sgd" : "adam"; }

inline Algorithm algorithm_from_string(std::string_view s) {
  if (s == "sgd") return Algorithm::sgd;
  if (s == "adam") return Algorithm::adam;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected sgd or adam)");
}

inline void validate(const OptimizerConfig& c) {
  if (!(c.lr > 0.0)) throw ConfigError("learning rate must be > 0, got " + std::to_string(c.lr));
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(c.eps > 0.0)) throw ConfigError("adam eps must be > 0");
}

/// SGD or bias-corrected Adam over the non-frozen entries of a store.
/// Frozen entries are never touched, not even rewritten with equal values.
template <typename Scalar>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) { validate(config_); }

  const OptimizerConfig& config() const noexcept { return config_; }
  long steps() const noexcept { return t_; }

  void step(ParameterStore<Scalar>& store) {
    for (const auto& e : store) {
      if (!e.frozen && !e.tensor.has_grad()) {
        throw StateError("optimizer step: trainable parameter '" + e.name + "' has no gradient");
      }
    }
    if (config_.algorithm == Algorithm::adam && m_.size() < store.size()) {
      m_.resize(store.size());
      v_.resize(store.size());
    }
    ++t_;
    const Scalar lr = static_cast<Scalar>(config_.lr);
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (ParamId id = 0; id < store.size(); ++id) {
      auto& e = store.entry(id);
      if (e.frozen) continue;
      auto& w = e.tensor.values();
      const auto& g = e.tensor.grad();
      if (config_.algorithm == Algorithm::sgd) {
        w -= lr * g;
        continue;
      }
      if (m_[id].size() != w.size()) {
        m_[id] = Vector<Scalar>::Zero(w.size());
        v_[id] = Vector<Scalar>::Zero(w.size());
      }
      const auto b1 = static_cast<Scalar>(config_.beta1);
      const auto b2 = static_cast<Scalar>(config_.beta2);
      m_[id] = b1 * m_[id] + (Scalar(1) - b1) * g;
      v_[id] = b2 * v_[id] + (Scalar(1) - b2) * g.cwiseProduct(g);
      const auto m_hat = m_[id].array() / static_cast<Scalar>(c1);
      const auto v_hat = v_[id].array() / static_cast<Scalar>(c2);
      w.array() -= lr * m_hat / (v_hat.sqrt() + static_cast<Scalar>(config_.eps));
    }
  }

 private:
  OptimizerConfig config_;
  long t_ = 0;
  std::vector<Vector<Scalar>> m_;
  std::vector<Vector<Scalar>> v_;
};

}  // namespace mednc
