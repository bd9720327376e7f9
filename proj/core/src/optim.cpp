#include "pbl/optim.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>

namespace pbl {

Adam::Adam(std::size_t n, const OptimizerConfig& config)
    : config_(config), m_(n, 0.0), v_(n, 0.0) {}

double Adam::current_lr() const {
  if (config_.iterations <= 1 || config_.final_lr_fraction == 1.0) return config_.learning_rate;
  const double progress =
      std::min(1.0, static_cast<double>(t_) / static_cast<double>(config_.iterations - 1));
  return config_.learning_rate * std::pow(config_.final_lr_fraction, progress);
}

void Adam::step(std::span<double> params, std::span<const double> grad,
                std::span<const double> lr_scale) {
  assert(params.size() == m_.size() && grad.size() == m_.size());
  assert(lr_scale.empty() || lr_scale.size() == m_.size());
  const double lr = current_lr();
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, t_);
  const double c2 = 1.0 - std::pow(b2, t_);
  for (std::size_t k = 0; k < m_.size(); ++k) {
    const double scale = lr_scale.empty() ? 1.0 : lr_scale[k];
    if (scale == 0.0) continue;
    m_[k] = b1 * m_[k] + (1.0 - b1) * grad[k];
    v_[k] = b2 * v_[k] + (1.0 - b2) * grad[k] * grad[k];
    const double m_hat = m_[k] / c1;
    const double v_hat = v_[k] / c2;
    params[k] -= lr * scale * m_hat / (std::sqrt(v_hat) + config_.epsilon);
  }
}

}  // namespace pbl
