#pragma once

// Central-difference gradient verification. The model function must be
// deterministic: it is evaluated twice up front and the two loss values must
// agree bit-for-bit before any comparison happens (stochastic layers have to
// be run with frozen noise).

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "das1d/tape.hpp"

namespace das1d {

// fn builds the forward graph on the given tape and returns the scalar loss.
using LossFn = std::function<Tensor(Tape&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  long worst_param = -1;
  long worst_coord = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

inline GradCheckReport grad_check_report(const LossFn& fn,
                                         std::span<Parameter* const> params,
                                         double eps) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");

  auto eval = [&fn]() {
    Tape t;
    NoGradGuard guard(t);
    return fn(t).item();
  };
  const double v1 = eval();
  const double v2 = eval();
  if (v1 != v2)
    throw std::logic_error("grad_check: model function is not deterministic");

  for (Parameter* p : params) p->zero_grad();
  Tape tape;
  Tensor loss = fn(tape);
  tape.backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckReport rep;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    auto& vals = *p->value.data;
    for (std::size_t ci = 0; ci < vals.size(); ++ci) {
      const double keep = vals[ci];
      vals[ci] = keep + eps;
      const double fp = eval();
      vals[ci] = keep - eps;
      const double fm = eval();
      vals[ci] = keep;
      const double num = (fp - fm) / (2.0 * eps);
      const double ana = analytic[pi][ci];
      const double denom =
          std::max({std::abs(num), std::abs(ana), 1e-8});
      const double rel = std::abs(num - ana) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = static_cast<long>(pi);
        rep.worst_coord = static_cast<long>(ci);
        rep.analytic = ana;
        rep.numeric = num;
      }
    }
  }
  for (Parameter* p : params) p->zero_grad();
  return rep;
}

inline double grad_check(const LossFn& fn, std::span<Parameter* const> params,
                         double eps = 1e-5) {
  return grad_check_report(fn, params, eps).max_rel_err;
}

}  // namespace das1d
