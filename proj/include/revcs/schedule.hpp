#pragma once

#include <cmath>
#include <vector>

#include "revcs/cs_operator.hpp"
#include "revcs/tape.hpp"

namespace revcs {

// Per-step diffusion parameters. Each alpha_t is learnable through an
// unconstrained raw value mapped by sigmoid into (0.01, 1.0), which keeps the
// sqrt terms and the Eq-style divisions well defined throughout training.
// alpha_bar_t is the running product with alpha_0 = 1 fixed (beta_0 = 0).
template <typename T>
class DiffusionSchedule {
 public:
  explicit DiffusionSchedule(int64_t steps = 3, T alpha_init = T(0.5)) : steps_(steps) {
    require(steps >= 1, Errc::bad_argument, "schedule needs at least one step");
    raw_.resize(size_t(steps));
    T r = raw_from_alpha(alpha_init);
    for (auto& p : raw_) {
      p.value = Tensor<T>::full(Shape{}, r);
    }
  }

  int64_t steps() const { return steps_; }

  static T alpha_from_raw(T raw) { return T(0.01) + T(0.99) * kernels::sigmoid(raw); }
  static T raw_from_alpha(T alpha) {
    T p = (alpha - T(0.01)) / T(0.99);
    require(p > T(0) && p < T(1), Errc::bad_argument, "alpha outside (0.01, 1.0)");
    return std::log(p / (T(1) - p));
  }

  T alpha(int64_t t) const {
    require(t >= 0 && t <= steps_, Errc::bad_argument, "step index out of range");
    if (t == 0) return T(1);
    return alpha_from_raw(raw_[size_t(t - 1)].value[0]);
  }

  T alpha_bar(int64_t t) const {
    require(t >= 0 && t <= steps_, Errc::bad_argument,
            "alpha_bar: t=" + std::to_string(t) + " outside [0," + std::to_string(steps_) + "]");
    T prod = T(1);
    for (int64_t i = 1; i <= t; ++i) prod *= alpha(i);
    return prod;
  }

  // differentiable alpha_bar_t from the raw leaves
  Var alpha_bar_on(Tape<T>& tp, int64_t t) {
    require(t >= 0 && t <= steps_, Errc::bad_argument, "alpha_bar: step index out of range");
    Var prod = tp.constant_scalar(T(1));
    for (int64_t i = 1; i <= t; ++i) {
      Var a = tp.affine(tp.sigmoid(tp.leaf(raw_[size_t(i - 1)])), T(0.99), T(0.01));
      prod = tp.mul(prod, a);
    }
    return prod;
  }

  // x_hat_T = sqrt(alpha_bar_T) * A^T y  (deterministic back-projection init)
  Tensor<T> init_estimate(const SamplingOperator<T>& op, const Measurement<T>& meas) const {
    Tensor<T> bp = op.back_project(meas);
    T s = std::sqrt(alpha_bar(steps_));
    for (int64_t i = 0; i < bp.size(); ++i) bp[i] *= s;
    return bp;
  }

  // same quantity on tape so gradients reach alpha_T through the init
  Var init_estimate_on(Tape<T>& tp, const SamplingOperator<T>& op, Var y, const Shape& img_shape) {
    Var bp = op.backproject_on(tp, y, img_shape);
    Var s = tp.sqrt(alpha_bar_on(tp, steps_));
    return tp.scale(bp, s);
  }

  // Gaussian-noise initialization (ablation variant)
  Tensor<T> init_noise(const Shape& img_shape, Rng& rng) const {
    return Tensor<T>::randn(img_shape, rng);
  }

  // x_t = sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps, diagnostic / one-step pretraining
  Tensor<T> forward_noising(const Tensor<T>& x0, int64_t t, Rng& rng) const {
    T ab = alpha_bar(t);
    T sa = std::sqrt(ab);
    T sn = std::sqrt(T(1) - ab);
    Tensor<T> out(x0.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = sa * x0[i] + sn * T(rng.normal());
    return out;
  }

  ParamRefs<T> params() {
    ParamRefs<T> r;
    for (int64_t i = 0; i < steps_; ++i)
      r.add("schedule.alpha_raw_" + std::to_string(i + 1), &raw_[size_t(i)]);
    return r;
  }

  Param<T>& raw(int64_t t) { return raw_.at(size_t(t - 1)); }

 private:
  int64_t steps_;
  std::vector<Param<T>> raw_;
};

}  // namespace revcs
