#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sepvqa/num/graph.hpp"

namespace sepvqa::num {

struct GradCheckOptions {
  double tolerance = 1e-4;
  /// Central-difference step.
  double step = 1e-5;
  /// Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-5;
  /// 0 checks every entry; otherwise this many entries per parameter, sampled with `seed`.
  std::size_t max_entries_per_parameter = 0;
  std::uint64_t seed = 0;
};

struct ParameterCheck {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t entries_checked = 0;
};

struct GradCheckReport {
  bool passed = false;
  /// Every checked analytic and numeric gradient was zero; reported as a pass that proves nothing.
  bool vacuous = false;
  /// Sorted by descending max_relative_error.
  std::vector<ParameterCheck> parameters;

  const ParameterCheck* worst() const { return parameters.empty() ? nullptr : &parameters.front(); }
};

/// Compares analytic gradients of `output` against central finite differences over every
/// parameter of the graph. `bindings` must bind all leaves.
GradCheckReport grad_check(const Graph& graph, const TensorMap& bindings, Var output, const GradCheckOptions& options = {});

double relative_error(double analytic, double numeric, double floor);

}  // namespace sepvqa::num
