#pragma once

#include <cstdint>
#include <stdexcept>

#include "sepvqa/num/graph.hpp"

namespace sepvqa::num {

class OptimizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment accumulators keyed by parameter name, created on first use.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  TensorMap first_moment;
  TensorMap second_moment;
};

/// Bias-corrected Adam update of every parameter in `params`. A parameter without an entry
/// in `grads` is updated as if its gradient were zero.
void adam_step(AdamState& state, TensorMap& params, const TensorMap& grads);

}  // namespace sepvqa::num
