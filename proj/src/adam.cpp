#include "dualprompt/adam.hpp"

#include <cmath>

namespace dualprompt {

void Adam::step(ParamRegistry& registry) {
  ++step_;
  const double t = static_cast<double>(step_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (Parameter& p : registry) {
    if (p.frozen) continue;
    auto [it, inserted] = moments_.try_emplace(p.name);
    Moments& mo = it->second;
    if (inserted || !mo.m.same_shape(p.value)) {
      mo.m = Matrix(p.value.rows(), p.value.cols());
      mo.v = Matrix(p.value.rows(), p.value.cols());
    }
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad.empty() ? 0.0 : p.grad[k];
      mo.m[k] = config_.beta1 * mo.m[k] + (1.0 - config_.beta1) * g;
      mo.v[k] = config_.beta2 * mo.v[k] + (1.0 - config_.beta2) * g * g;
      const double mhat = mo.m[k] / bc1;
      const double vhat = mo.v[k] / bc2;
      p.value[k] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
  registry.zero_grad();
}

}  // namespace dualprompt
