#pragma once

#include <cmath>
#include <vector>

#include "ndqfn/net.hpp"

namespace ndqfn {

struct AdamConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 3.125e-4;
};

// Adaptive moment estimation over the flat parameter vector.
class Adam {
 public:
  Adam(const Architecture& arch, AdamConfig config)
      : config_(config), first_(Gradients(arch).size(), 0.0), second_(first_.size(), 0.0) {}

  const AdamConfig& config() const { return config_; }
  long steps() const { return steps_; }

  void step(NetworkParams& params, const Gradients& grad) {
    if (params.size() != first_.size() || grad.size() != first_.size()) {
      throw ConfigError("Adam: parameter size mismatch");
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    auto p = params.values();
    auto g = grad.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      first_[i] = config_.beta1 * first_[i] + (1.0 - config_.beta1) * g[i];
      second_[i] = config_.beta2 * second_[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double m_hat = first_[i] / c1;
      const double v_hat = second_[i] / c2;
      p[i] -= config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.epsilon);
    }
  }

 private:
  AdamConfig config_;
  std::vector<double> first_;
  std::vector<double> second_;
  long steps_ = 0;
};

}  // namespace ndqfn
