#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sevdet/nn/tensor.hpp"

namespace sevdet::nn {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Per-parameter moments. Moment vectors are sized lazily on the first step.
struct OptimizerState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

/// One bias-corrected Adam update of every tensor in `params` from its grad.
/// Throws InvalidArgument (before touching anything) on a non-finite gradient
/// or when the parameter list no longer matches the state.
void adam_step(std::span<Tensor* const> params, OptimizerState& state);

void zero_grads(std::span<Tensor* const> params);

}  // namespace sevdet::nn
