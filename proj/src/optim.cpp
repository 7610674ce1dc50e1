#include "lyaprobe/optim.hpp"

#include <cmath>

#include "lyaprobe/error.hpp"

namespace lyaprobe::ad {

AdamState AdamState::for_params(const std::vector<NamedParam>& params, double learning_rate) {
  AdamState s;
  s.learning_rate = learning_rate;
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.tensor.numel(), 0.0);
    s.second_moment.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

void adam_step(std::vector<NamedParam>& params, AdamState& state) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw DimensionError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (state.first_moment[p].size() != params[p].tensor.numel()) {
      throw DimensionError("adam_step: moment shape mismatch for " + params[p].name);
    }
    const auto& node = params[p].tensor.node();
    for (double g : node->grad) {
      if (!std::isfinite(g)) {
        throw NumericalError("adam_step: non-finite gradient in parameter '" + params[p].name +
                             "' at step " + std::to_string(state.step + 1));
      }
    }
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& node = *params[p].tensor.node();
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    const bool has_grad = !node.grad.empty();
    for (std::size_t i = 0; i < node.data.size(); ++i) {
      const double g = has_grad ? node.grad[i] : 0.0;
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      node.data[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

}  // namespace lyaprobe::ad
