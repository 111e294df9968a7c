#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>

#include "dualprompt/autodiff.hpp"

namespace dualprompt {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over the unfrozen parameters of a registry.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// Applies one update to every unfrozen parameter, then clears all
  /// gradients (frozen ones included).
  void step(ParamRegistry& registry);

  std::uint64_t steps() const noexcept { return step_; }
  const AdamConfig& config() const noexcept { return config_; }

 private:
  struct Moments {
    Matrix m;
    Matrix v;
  };
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

}  // namespace dualprompt
