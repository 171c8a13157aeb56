// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "laser/graph.hpp"
#include "laser/tensor.hpp"

namespace laser {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
template <Real T, class F>
Tensor<T> finite_difference_gradient(F&& f, const Tensor<T>& x, T h) {
  if (!(h > T(0))) throw ContractError("finite_difference_gradient: step must be positive");
  Tensor<T> grad(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + h;
    const T fp = f(static_cast<const Tensor<T>&>(probe));
    probe[i] = orig - h;
    const T fm = f(static_cast<const Tensor<T>&>(probe));
    probe[i] = orig;
    grad[i] = (fp - fm) / (T(2) * h);
  }
  return grad;
}

/// Builds a scalar loss from leaves placed on a fresh graph.
template <Real T>
using LossBuilder = std::function<Var<T>(Graph<T>&, const std::vector<Var<T>>&)>;

template <Real T>
struct GradientComparison {
  std::vector<T> rel_err;      // per input tensor, infinity-norm relative error
  std::vector<bool> vanishing;  // both gradients below the absolute floor
  T max_rel_err = 0;
};

/// Compares backward() against central differences for every input tensor.
/// A tensor whose analytic and numeric gradients both stay within `abs_floor`
/// in infinity norm is reported as vanishing with error 0.
template <Real T>
GradientComparison<T> compare_with_finite_differences(const LossBuilder<T>& build,
                                                       const std::vector<Tensor<T>>& inputs, T h, T abs_floor = 0) {
  Graph<T> g;
  std::vector<Var<T>> leaves;
  for (const auto& t : inputs) leaves.push_back(g.leaf(t));
  const Var<T> loss = build(g, leaves);
  const GradientMap<T> grads = g.backward(loss);

  GradientComparison<T> out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const Tensor<T>& xk) {
      Graph<T> g2;
      std::vector<Var<T>> l2;
      for (std::size_t m = 0; m < inputs.size(); ++m) l2.push_back(g2.leaf(m == k ? xk : inputs[m]));
      return build(g2, l2).value()[0];
    };
    const Tensor<T> numeric = finite_difference_gradient<T>(f, inputs[k], h);
    const Tensor<T>& analytic = grads.at(leaves[k]);
    const bool vanishing = std::max(max_abs(analytic), max_abs(numeric)) <= abs_floor;
    const T err = vanishing ? T(0) : rel_err_inf(analytic, numeric);
    out.vanishing.push_back(vanishing);
    out.rel_err.push_back(err);
    out.max_rel_err = std::max(out.max_rel_err, err);
  }
  return out;
}

}  // namespace laser
