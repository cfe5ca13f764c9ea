#include "sepvqa/num/adam.hpp"

#include <cmath>

namespace sepvqa::num {

void adam_step(AdamState& state, TensorMap& params, const TensorMap& grads) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw OptimizerError("gradient for unknown parameter '" + name + "'");
    if (it->second.shape() != g.shape()) {
      throw OptimizerError("gradient shape " + shape_string(g.shape()) + " does not match parameter '" + name + "' " +
                           shape_string(it->second.shape()));
    }
  }

  ++state.step;
  const AdamConfig& c = state.config;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);

  for (auto& [name, param] : params) {
    auto [m_it, m_new] = state.first_moment.try_emplace(name, param.shape());
    auto [v_it, v_new] = state.second_moment.try_emplace(name, param.shape());
    Tensor& m = m_it->second;
    Tensor& v = v_it->second;
    if (m.shape() != param.shape() || v.shape() != param.shape()) {
      throw OptimizerError("moment shape does not match parameter '" + name + "'");
    }
    auto g_it = grads.find(name);
    const double* g = g_it == grads.end() ? nullptr : g_it->second.data().data();
    double* p = param.data().data();
    double* md = m.data().data();
    double* vd = v.data().data();
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double gi = g ? g[i] : 0.0;
      md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
      vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
      const double m_hat = md[i] / correct1;
      const double v_hat = vd[i] / correct2;
      p[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

}  // namespace sepvqa::num
