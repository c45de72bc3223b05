#pragma once

// Parameter updates. Weight decay enters as an L2 term added to the gradient
// for both optimizers. Gradients are consumed: after a step they are cleared
// so the next pass starts fresh.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "das1d/tape.hpp"

namespace das1d {

enum class OptimizerKind { GradientDescent, Adam };

struct AdamConstants {
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double eps = 1e-8;
};

inline void optimizer_step(OptimizerKind kind,
                           std::span<Parameter* const> params, double lr,
                           double weight_decay) {
  if (lr < 0.0) throw std::invalid_argument("optimizer_step: negative lr");
  if (weight_decay < 0.0)
    throw std::invalid_argument("optimizer_step: negative weight decay");
  for (Parameter* p : params) {
    if (p == nullptr || p->empty()) continue;
    if (p->frozen) continue;
    if (!p->has_grad)
      throw std::logic_error(
          "optimizer_step: parameter has no gradient from a backward pass");
    auto& val = *p->value.data;
    const std::size_t n = val.size();
    if (kind == OptimizerKind::GradientDescent) {
      for (std::size_t i = 0; i < n; ++i)
        val[i] -= lr * (p->grad[i] + weight_decay * val[i]);
    } else {
      if (p->m.size() != n) p->m.assign(n, 0.0);
      if (p->v.size() != n) p->v.assign(n, 0.0);
      p->step += 1;
      const double b1 = AdamConstants::beta1, b2 = AdamConstants::beta2;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(p->step));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(p->step));
      for (std::size_t i = 0; i < n; ++i) {
        const double g = p->grad[i] + weight_decay * val[i];
        p->m[i] = b1 * p->m[i] + (1.0 - b1) * g;
        p->v[i] = b2 * p->v[i] + (1.0 - b2) * g * g;
        const double mhat = p->m[i] / c1;
        const double vhat = p->v[i] / c2;
        val[i] -= lr * mhat / (std::sqrt(vhat) + AdamConstants::eps);
      }
    }
    p->zero_grad();
  }
}

inline void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params)
    if (p != nullptr && !p->empty()) p->zero_grad();
}

}  // namespace das1d
