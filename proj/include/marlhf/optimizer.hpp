#pragma once

#include "marlhf/policy_model.hpp"

namespace marlhf {

// Gradient descent with optional heavy-ball momentum.
class Sgd {
 public:
  Sgd(double momentum = 0.0) : momentum_(momentum) {}
  // params -= lr * v, v = momentum * v + grad.
  void step(PolicyParams& params, const PolicyParams& grad, double lr);

 private:
  double momentum_;
  PolicyParams velocity_;
};

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(PolicyParams& params, const PolicyParams& grad, double lr);

 private:
  double beta1_, beta2_, eps_;
  long step_count_ = 0;
  PolicyParams m_, v_;
};

}  // namespace marlhf
