#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "matl/tensor.hpp"

namespace matl {

// Central-difference gradient verification. `make_loss` rebuilds the scalar
// graph from the current values of `inputs` on a fresh tape each call; every
// input tensor with requires_grad participates in the check. Returns the max
// over coordinates of |analytic - numeric| / max(1, |analytic|).
template <typename MakeLoss>
double grad_check(MakeLoss&& make_loss, std::vector<Tensor<double>>& inputs, double epsilon = 1e-4) {
  auto evaluate = [&]() -> double {
    Tape<double> tape;
    Tensor<double> loss = make_loss(tape, inputs);
    if (!loss.defined() || loss.numel() != 1) throw UsageError("grad_check: function must return a scalar");
    return loss.item();
  };

  // Analytic pass.
  std::vector<std::vector<double>> analytic(inputs.size());
  {
    Tape<double> tape;
    Tensor<double> loss = make_loss(tape, inputs);
    if (!loss.defined() || loss.numel() != 1) throw UsageError("grad_check: function must return a scalar");
    if (!std::isfinite(loss.item())) throw Error("grad_check: non-finite loss at the base point");
    for (auto& t : inputs) t.zero_grad();
    tape.backward(loss);
    for (std::size_t i = 0; i < inputs.size(); ++i)
      if (inputs[i].requires_grad()) analytic[i] = inputs[i].grad();
  }

  double max_err = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    auto& vals = inputs[i].values();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double keep = vals[j];
      vals[j] = keep + epsilon;
      const double up = evaluate();
      vals[j] = keep - epsilon;
      const double dn = evaluate();
      vals[j] = keep;
      if (!std::isfinite(up) || !std::isfinite(dn))
        throw Error("grad_check: non-finite evaluation at input " + std::to_string(i) + " coordinate " +
                    std::to_string(j));
      const double numeric = (up - dn) / (2.0 * epsilon);
      const double a = analytic[i][j];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace matl
