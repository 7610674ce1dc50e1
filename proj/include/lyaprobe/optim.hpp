#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lyaprobe/autodiff.hpp"

namespace lyaprobe::ad {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  // Zero moments shaped like params.
  static AdamState for_params(const std::vector<NamedParam>& params, double learning_rate);
};

// One bias-corrected Adam update using each parameter's accumulated gradient.
// Throws NumericalError naming the first parameter with a non-finite gradient;
// no parameter is modified in that case.
void adam_step(std::vector<NamedParam>& params, AdamState& state);

}  // namespace lyaprobe::ad
