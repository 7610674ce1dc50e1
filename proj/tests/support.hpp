#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unistd.h>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lyaprobe/autodiff.hpp"
#include "lyaprobe/random.hpp"

namespace lyaprobe::testing {

// Average precision by direct definition: each positive contributes the
// precision among all items scoring at least as high as it does.
inline double brute_force_ap(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t positives = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    ++positives;
    std::size_t above = 0, above_pos = 0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (scores[j] >= scores[i]) {
        ++above;
        above_pos += labels[j];
      }
    }
    total += static_cast<double>(above_pos) / static_cast<double>(above);
  }
  return total / static_cast<double>(positives);
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

inline constexpr double kGradFloor = 1e-4;

// Compares backward() gradients of `loss_fn` against central differences for
// every element of `leaves`. Relative error uses max(|a|, |n|, kGradFloor).
inline GradCheck check_gradients(const std::function<ad::Tensor()>& loss_fn,
                                 std::vector<ad::Tensor> leaves, double step = 1e-5) {
  for (auto& l : leaves) l.zero_grad();
  ad::backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) analytic.push_back(l.grad());
  GradCheck out;
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    auto data = leaves[t].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      const double up = loss_fn().item();
      data[i] = saved - step;
      const double down = loss_fn().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[t][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradFloor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / denom);
      ++out.checked;
    }
  }
  return out;
}

inline ad::Tensor random_tensor(Rng& rng, ad::Shape shape, bool requires_grad = true,
                                double scale = 1.0) {
  std::vector<double> data(ad::shape_numel(shape));
  for (double& v : data) v = scale * rng.normal();
  return ad::Tensor::from(std::move(shape), std::move(data), requires_grad);
}

// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("lyaprobe_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace lyaprobe::testing
