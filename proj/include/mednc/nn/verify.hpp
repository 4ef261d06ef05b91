#pragma once

#include <cstdint>

#include "mednc/nn/model.hpp"

namespace mednc::nn {

/// Finite-difference check of a whole miniature ensemble: table extractors of
/// dimension `feature_dim`, pairs of members per group, train-mode dropout
/// with a fixed mask. Checks every trainable parameter and the extractor
/// features; returns the largest relative error.
double ensemble_gradient_check(Topology topology, std::uint64_t seed, Index feature_dim = 6, Index fc_width = 3,
                               Index batch = 4);

}  // namespace mednc::nn
