#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "evq/tensor.hpp"

namespace evq {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.  Relative error per coordinate is
/// |a - n| / max(|a|, |n|, floor); the floor keeps coordinates whose true
/// gradient is zero from dividing by rounding noise.
template <typename T = double>
GradCheckResult grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T eps = T(1e-5),
                           T floor = T(1e-4)) {
  GradCheckResult r;
  Tensor<T> leaf = x.as_leaf(true);
  Tensor<T> y = f(leaf);
  if (y.size() != 1) throw DimensionError("grad_check: function must return a scalar");
  y.backward();
  r.analytic.assign(leaf.size(), 0.0);
  if (leaf.has_grad())
    for (std::size_t i = 0; i < leaf.size(); ++i) r.analytic[i] = static_cast<double>(leaf.grad()[i]);

  NoGradGuard ng;
  std::vector<T> base(x.data().begin(), x.data().end());
  r.numeric.assign(base.size(), 0.0);
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<T> p = base, m = base;
    p[i] += eps;
    m[i] -= eps;
    const T fp = f(Tensor<T>::from(x.shape(), p)).item();
    const T fm = f(Tensor<T>::from(x.shape(), m)).item();
    r.numeric[i] = static_cast<double>((fp - fm) / (T(2) * eps));
  }
  for (std::size_t i = 0; i < base.size(); ++i) {
    const double a = r.analytic[i], n = r.numeric[i];
    const double abs_err = std::abs(a - n);
    const double denom = std::max({std::abs(a), std::abs(n), static_cast<double>(floor)});
    r.max_abs_error = std::max(r.max_abs_error, abs_err);
    r.max_rel_error = std::max(r.max_rel_error, abs_err / denom);
  }
  return r;
}

}  // namespace evq
