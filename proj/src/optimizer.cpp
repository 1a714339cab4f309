#include "marlhf/optimizer.hpp"

#include <cmath>

namespace marlhf {

void Sgd::step(PolicyParams& params, const PolicyParams& grad, double lr) {
  if (momentum_ == 0.0) {
    params.axpy(-lr, grad);
    return;
  }
  if (velocity_.tensors().empty()) velocity_ = PolicyParams::zeros_like(params);
  velocity_.scale(momentum_);
  velocity_.axpy(1.0, grad);
  params.axpy(-lr, velocity_);
}

void Adam::step(PolicyParams& params, const PolicyParams& grad, double lr) {
  if (m_.tensors().empty()) {
    m_ = PolicyParams::zeros_like(params);
    v_ = PolicyParams::zeros_like(params);
  }
  ++step_count_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  auto& p = params.tensors();
  auto& m = m_.tensors();
  auto& v = v_.tensors();
  const auto& g = grad.tensors();
  for (std::size_t k = 0; k < p.size(); ++k) {
    for (std::size_t i = 0; i < p[k].data.size(); ++i) {
      const double gi = g[k].data[i];
      m[k].data[i] = beta1_ * m[k].data[i] + (1.0 - beta1_) * gi;
      v[k].data[i] = beta2_ * v[k].data[i] + (1.0 - beta2_) * gi * gi;
      p[k].data[i] -= lr * (m[k].data[i] / c1) / (std::sqrt(v[k].data[i] / c2) + eps_);
    }
  }
}

}  // namespace marlhf
