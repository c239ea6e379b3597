#pragma once

#include "kvcore/model.hpp"

#include <cstdint>
#include <vector>

namespace kvcore {

/// Short Adam run on next-token cross-entropy. Not meant to converge; a few
/// hundred steps are enough for attention to carry signal.
struct TrainSpec {
    std::uint32_t steps = 0;
    std::uint32_t batch = 4;
    double learning_rate = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
};

/// Mean next-token NLL over `batch` (natural log). When `grad` is non-null
/// it is overwritten with the gradient, shaped like `weights`.
double loss_and_gradient(const ModelConfig& cfg, const ModelWeights& weights, const Corpus& batch,
                         ModelWeights* grad);

ModelWeights zeros_like(const ModelWeights& w);

/// Trains in place and returns the per-step batch losses. Sequences are drawn
/// with a seeded RNG; weights are rounded to binary32 afterwards.
std::vector<double> train(const ModelConfig& cfg, ModelWeights& weights, const Corpus& corpus, const TrainSpec& spec);

} // namespace kvcore
