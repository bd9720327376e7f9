#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace pbl {

struct OptimizerConfig {
  int iterations = 2000;
  double learning_rate = 1e-3;
  /// Learning rate at the last iteration relative to the first; the schedule
  /// decays exponentially in between. 1 disables decay.
  double final_lr_fraction = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0x5eed;
  int workers = 1;
};

/// Adaptive-moment gradient descent over a flat parameter vector.
class Adam {
 public:
  Adam(std::size_t n, const OptimizerConfig& config);

  /// Learning rate used for the next step.
  double current_lr() const;

  /// One descent step. `lr_scale`, when non-empty, multiplies the learning
  /// rate per parameter; a scale of 0 freezes that entry.
  void step(std::span<double> params, std::span<const double> grad,
            std::span<const double> lr_scale = {});

  int steps_taken() const { return t_; }

 private:
  OptimizerConfig config_;
  std::vector<double> m_;
  std::vector<double> v_;
  int t_ = 0;
};

}  // namespace pbl
