#pragma once

#include <algorithm>
#include <cmath>

#include "revcs/tensor.hpp"

namespace testutil {

// central finite differences of a scalar-valued function, h = 1e-5 at 64-bit
template <typename F>
revcs::Tensor<double> fd_grad(const revcs::Tensor<double>& x, F f, double h = 1e-5) {
  revcs::Tensor<double> g(x.shape());
  revcs::Tensor<double> xp = x.clone();
  for (int64_t i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + h;
    double fp = f(xp);
    xp[i] = x[i] - h;
    double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

template <typename T>
double max_rel_err(const revcs::Tensor<T>& a, const revcs::Tensor<T>& b, double floor = 1e-6) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    double d = std::abs(double(a[i]) - double(b[i]));
    double m = std::max({std::abs(double(a[i])), std::abs(double(b[i])), floor});
    worst = std::max(worst, d / m);
  }
  return worst;
}

template <typename T>
bool bitwise_equal(const revcs::Tensor<T>& a, const revcs::Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.size(); ++i)
    if (std::memcmp(&a[i], &b[i], sizeof(T)) != 0) return false;
  return true;
}

}  // namespace testutil
