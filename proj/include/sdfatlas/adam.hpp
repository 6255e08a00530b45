#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace sdfatlas {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Plain Adam over one parameter group. Every parameter is updated each step
// (dense moments), so sparse gradients behave identically to a dense run.
class Adam {
 public:
  Adam() = default;
  Adam(std::size_t size, AdamConfig cfg = {})
      : cfg_(cfg), m_(size, 0.0), v_(size, 0.0) {}

  void step(std::span<double> values, std::span<const double> grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const std::size_t n = values.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = grads[i];
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m_[i] / bc1;
      const double vhat = v_[i] / bc2;
      values[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
    }
  }

  long t() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

}  // namespace sdfatlas
