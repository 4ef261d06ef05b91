#include "mednc/eval/mccv.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <thread>

#include "mednc/core/errors.hpp"

namespace mednc::eval {

namespace {

[[noreturn]] void rethrow_with_repetition(std::exception_ptr error, int r) {
  const std::string prefix = "repetition " + std::to_string(r) + ": ";
  try {
    std::rethrow_exception(error);
  } catch (const NumericError& e) {
    throw NumericError(prefix + e.what(), e.epoch());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const DataError& e) {
    throw DataError(prefix + e.what());
  } catch (const LookupError& e) {
    throw LookupError(prefix + e.what());
  } catch (const std::exception& e) {
    throw Error(prefix + e.what());
  }
}

std::vector<RunResult> run_repetition(const std::vector<Candidate>& candidates, const data::Dataset& dataset,
                                      const FeatureCache& cache, const MccvConfig& config, int r) {
  const auto split = data::split_mccv(dataset, data::SplitSpec{config.ratios, data::repetition_seed(config.base_seed, r)});
  std::vector<RunResult> out;
  for (const auto& c : candidates) {
    out.push_back(run_candidate(c, dataset, split, cache, config, r, scored_parts(c, config.train.mode)).run);
  }
  return out;
}

}  // namespace

void validate(const MccvConfig& c) {
  if (c.repetitions < 1) throw ConfigError("repetitions must be >= 1, got " + std::to_string(c.repetitions));
  if (c.threads < 0) throw ConfigError("threads must be >= 0");
  data::validate(data::SplitSpec{c.ratios, c.base_seed});
  data::validate(c.augment);
  validate(c.train);
}

int worker_count(int requested, int tasks) {
  int n = requested;
  if (n == 0) {
    n = 1;
    if (const char* env = std::getenv("MEDNC_THREADS")) {
      const int v = std::atoi(env);
      if (v > 0) n = v;
    }
  }
  return std::max(1, std::min(n, tasks));
}

Stat summarize(const std::vector<Metric>& values) {
  Stat s;
  double sum = 0.0, compat_sum = 0.0;
  for (const auto& v : values) {
    compat_sum += compat(v);
    if (v) {
      sum += *v;
      ++s.defined;
    }
  }
  if (!values.empty()) s.compat_mean = compat_sum / static_cast<double>(values.size());
  if (s.defined == 0) return s;
  const double mean = sum / s.defined;
  s.mean = mean;
  if (s.defined >= 2) {
    double ss = 0.0;
    for (const auto& v : values) {
      if (v) ss += (*v - mean) * (*v - mean);
    }
    s.std = std::sqrt(ss / (s.defined - 1));
  }
  return s;
}

Stat MCCVResult::stat(data::Part part, std::string_view metric) const {
  std::vector<Metric> values;
  for (const auto& r : repetitions) {
    auto it = r.partitions.find(part);
    if (it == r.partitions.end()) throw LookupError(name + " was not scored on " + std::string(data::to_string(part)));
    values.push_back(metric_by_name(it->second.metrics, metric));
  }
  return summarize(values);
}

double MCCVResult::seconds_per_epoch() const {
  double s = 0.0;
  for (const auto& r : repetitions) s += r.curve.mean_seconds();
  return repetitions.empty() ? 0.0 : s / static_cast<double>(repetitions.size());
}

TrainedCandidate run_candidate(const Candidate& c, const data::Dataset& dataset, const data::DatasetSplit& split,
                               const FeatureCache& cache, const MccvConfig& config, int r,
                               const std::vector<data::Part>& parts) {
  RunResult run;
  run.repetition = r;
  run.split_seed = split.spec.seed;
  run.model_seed = derive_seed(split.spec.seed, "model:" + c.name);
  run.train_seed = derive_seed(split.spec.seed, "train:" + c.name);
  nn::Model model = c.factory(run.model_seed);
  run.trainable_params = model.trainable_params();
  run.topology = model.topology;

  auto train_set = gather_augmented(model, cache, dataset, split.part(data::Part::train), config.augment);
  Standardizer standardizer;
  if (config.train.standardize) standardizer = fit_standardizer(train_set);
  standardizer.apply(train_set);
  auto val_set = gather(model, cache, dataset, split.part(data::Part::val));
  standardizer.apply(val_set);
  TrainConfig tc = config.train;
  tc.seed = run.train_seed;
  run.curve = train(model, train_set, val_set, tc);

  for (data::Part p : parts) {
    if (p == data::Part::val) {
      run.partitions.emplace(p, evaluate(model, val_set, config.positive));
      continue;
    }
    auto set = gather(model, cache, dataset, split.part(p));
    standardizer.apply(set);
    run.partitions.emplace(p, evaluate(model, set, config.positive));
  }
  return {std::move(run), std::move(model), std::move(standardizer)};
}

std::vector<data::Part> scored_parts(const Candidate& candidate, TrainMode mode) {
  if (mode == TrainMode::joint) return {data::kParts.begin(), data::kParts.end()};
  return {data::Part::train, data::Part::val, candidate.member ? data::Part::test_a : data::Part::test_b};
}

std::vector<MCCVResult> run_mccv(const std::vector<Candidate>& candidates, const data::Dataset& dataset,
                                 const FeatureCache& cache, const MccvConfig& config) {
  validate(config);
  if (candidates.empty()) throw ConfigError("no models to evaluate");
  const int reps = config.repetitions;
  std::vector<std::vector<RunResult>> per_rep(static_cast<std::size_t>(reps));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(reps));
  std::atomic<int> next{0};
  auto work = [&] {
    for (int r = next++; r < reps; r = next++) {
      try {
        per_rep[static_cast<std::size_t>(r)] = run_repetition(candidates, dataset, cache, config, r);
      } catch (...) {
        errors[static_cast<std::size_t>(r)] = std::current_exception();
      }
    }
  };
  const int workers = worker_count(config.threads, reps);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (int r = 0; r < reps; ++r) {
    if (errors[static_cast<std::size_t>(r)]) rethrow_with_repetition(errors[static_cast<std::size_t>(r)], r);
  }

  std::vector<MCCVResult> results;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    MCCVResult res;
    res.name = candidates[c].name;
    res.member = candidates[c].member;
    for (auto& rep : per_rep) res.repetitions.push_back(std::move(rep[c]));
    res.trainable_params = res.repetitions.front().trainable_params;
    res.topology = res.repetitions.front().topology;
    results.push_back(std::move(res));
  }
  return results;
}

}  // namespace mednc::eval
