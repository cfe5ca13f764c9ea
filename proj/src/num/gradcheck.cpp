#include "sepvqa/num/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sepvqa/num/random.hpp"

namespace sepvqa::num {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckReport grad_check(const Graph& graph, const TensorMap& bindings, Var output, const GradCheckOptions& options) {
  const Evaluation base = evaluate(graph, bindings);
  const TensorMap analytic = gradients(graph, base, output);

  TensorMap perturbed = bindings;
  Rng rng(options.seed);
  GradCheckReport report;
  bool any_nonzero = false;

  auto loss_at = [&]() { return evaluate(graph, perturbed).value(output.id()).item(); };

  for (NodeId pid : graph.parameters()) {
    const std::string& name = graph.node(pid).label;
    Tensor& value = perturbed.at(name);
    const Tensor& grad = analytic.at(name);

    std::vector<std::size_t> entries(value.size());
    std::iota(entries.begin(), entries.end(), 0);
    if (options.max_entries_per_parameter && entries.size() > options.max_entries_per_parameter) {
      rng.shuffle(entries);
      entries.resize(options.max_entries_per_parameter);
      std::sort(entries.begin(), entries.end());
    }

    ParameterCheck check;
    check.name = name;
    for (std::size_t i : entries) {
      const double original = value[i];
      value[i] = original + options.step;
      const double plus = loss_at();
      value[i] = original - options.step;
      const double minus = loss_at();
      value[i] = original;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double err = relative_error(grad[i], numeric, options.floor);
      if (grad[i] != 0.0 || numeric != 0.0) any_nonzero = true;
      if (err >= check.max_relative_error) {
        if (err > check.max_relative_error || check.entries_checked == 0) {
          check.worst_index = i;
          check.analytic = grad[i];
          check.numeric = numeric;
        }
        check.max_relative_error = err;
      }
      ++check.entries_checked;
    }
    report.parameters.push_back(check);
  }

  std::stable_sort(report.parameters.begin(), report.parameters.end(),
                   [](const ParameterCheck& a, const ParameterCheck& b) { return a.max_relative_error > b.max_relative_error; });
  report.vacuous = !any_nonzero;
  report.passed = std::all_of(report.parameters.begin(), report.parameters.end(),
                              [&](const ParameterCheck& p) { return p.max_relative_error <= options.tolerance; });
  return report;
}

}  // namespace sepvqa::num
