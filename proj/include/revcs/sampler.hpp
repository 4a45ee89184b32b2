#pragma once

#include <utility>
#include <vector>

#include "revcs/estimator.hpp"
#include "revcs/schedule.hpp"

namespace revcs {

// T-step DDNM reconstruction network F = F_1 o ... o F_T. Each step runs the
// three substeps (denoise, range-nullspace projection, deterministic DDIM
// update) with a single noise-estimator evaluation reused by substeps 1 and 3.
// Steps are wired as invertible layers: x_{t-1} = u_t F_t(x_t) + v_t h_t,
// h_{t-1} = x_t, with boundary scalars h_T = w_T x_T and x = x_0 + w_0 h_0.
template <typename T>
class WiredFramework {
 public:
  WiredFramework() = default;

  WiredFramework(DiffusionSchedule<T>* sched, EstimatorGraph<T>* est, bool wired)
      : schedule_(sched), estimator_(est), wired_(wired) {
    v_raw_.resize(size_t(sched->steps()));
    for (auto& p : v_raw_) p.value = Tensor<T>::full(Shape{}, WiredGroup<T>::raw_from_v(T(0.5)));
    w_T_.value = Tensor<T>::full(Shape{}, T(1));
    w_0_.value = Tensor<T>::full(Shape{}, T(0));
  }

  int64_t steps() const { return schedule_->steps(); }
  bool wired() const { return wired_; }
  Param<T>& w_T() { return w_T_; }
  Param<T>& w_0() { return w_0_; }
  Param<T>& v_raw(int64_t t) { return v_raw_.at(size_t(t - 1)); }
  T v_value(int64_t t) const {
    return WiredGroup<T>::v_from_raw(v_raw_.at(size_t(t - 1)).value[0]);
  }

  // (u_t, v_t) = (1, 0) and w_0 = 0: wired graph degenerates to the plain
  // sequential composition (cached mode only; v = 0 has no inverse)
  void force_degenerate(bool on) { degenerate_ = on; }

  // Eqs. (1)-(3) for step t on the tape; one estimator call per step
  Var ddnm_step_on(Tape<T>& tp, Var xt, int64_t t, const SamplingOperator<T>& op, Var y,
                   Var bpy) {
    require(t >= 1 && t <= steps(), Errc::bad_argument, "sampling step out of range");
    Var ab_t = schedule_->alpha_bar_on(tp, t);
    require(tp.scalar_value(ab_t) > T(0), Errc::bad_argument, "alpha_bar_t must be positive");
    Var ab_p = schedule_->alpha_bar_on(tp, t - 1);
    Var sa_t = tp.sqrt(ab_t);
    Var s1_t = tp.sqrt(tp.one_minus(ab_t));
    Var sa_p = tp.sqrt(ab_p);
    Var s1_p = tp.sqrt(tp.one_minus(ab_p));

    Var eps = estimator_->estimate_noise_on(tp, xt, t, &op, bpy);
    Var inv_sa = tp.recip(sa_t);
    Var x0 = tp.axpby(inv_sa, xt, tp.neg(tp.mul(s1_t, inv_sa)), eps);
    Var xbar = op.rnd_project_on(tp, x0, y);
    return tp.axpby(sa_p, xbar, s1_p, eps);
  }

  Var forward_on(Tape<T>& tp, Var xT, const SamplingOperator<T>& op, Var y, Var bpy) {
    if (!wired_) {
      Var x = xT;
      for (int64_t t = steps(); t >= 1; --t) x = ddnm_step_on(tp, x, t, op, y, bpy);
      return x;
    }
    Var h = tp.scale(xT, tp.leaf(w_T_));
    Var x = xT;
    for (int64_t t = steps(); t >= 1; --t) {
      Var u, v;
      if (degenerate_) {
        u = tp.constant_scalar(T(1));
        v = tp.constant_scalar(T(0));
      } else {
        v = tp.affine(tp.sigmoid(tp.leaf(v_raw_[size_t(t - 1)])), T(0.90), T(0.05));
        u = tp.one_minus(v);
      }
      const SamplingOperator<T>* opp = &op;
      WiredFramework* self = this;
      CoupledFn<T> fn = [self, t, opp](Tape<T>& t2, Var xx, const std::vector<Var>& ex) {
        return self->ddnm_step_on(t2, xx, t, *opp, ex[0], ex[1]);
      };
      auto [xp, hp] = tp.coupled_step(x, h, u, v, std::move(fn), {y, bpy});
      x = xp;
      h = hp;
    }
    if (degenerate_) return x;
    return tp.add(x, tp.scale(h, tp.leaf(w_0_)));
  }

  // value-level F_t for the explicit inverse
  Tensor<T> step_value(const Tensor<T>& xt, int64_t t, const SamplingOperator<T>& op,
                       const Measurement<T>& meas) {
    Tape<T> tp(Mode::cached);
    Var xv = tp.input(xt);
    Var y = tp.constant(meas.y);
    Var bpy = tp.constant(op.back_project(meas));
    Var out = ddnm_step_on(tp, xv, t, op, y, bpy);
    return tp.value(out).clone();
  }

  // Eq.(5) at step t: recover (x_t, h_t) from (x_{t-1}, h_{t-1})
  std::pair<Tensor<T>, Tensor<T>> step_inverse(const Tensor<T>& x_tm1, const Tensor<T>& h_tm1,
                                               int64_t t, const SamplingOperator<T>& op,
                                               const Measurement<T>& meas) {
    T v = v_value(t);
    require(v >= T(0.05), Errc::bad_argument, "step inverse: v_t below safe bound");
    T u = T(1) - v;
    Tensor<T> xt = h_tm1.clone();
    Tensor<T> ft = step_value(xt, t, op, meas);
    Tensor<T> ht(xt.shape());
    kernels::axpby(ht.data(), T(1) / v, x_tm1.data(), -u / v, ft.data(), ht.size());
    return {std::move(xt), std::move(ht)};
  }

  // full chain inverse: reconstruct (x_T, h_T) from the retained (x_0, h_0)
  std::pair<Tensor<T>, Tensor<T>> invert_chain(const Tensor<T>& x0, const Tensor<T>& h0,
                                               const SamplingOperator<T>& op,
                                               const Measurement<T>& meas) {
    Tensor<T> x = x0.clone(), h = h0.clone();
    for (int64_t t = 1; t <= steps(); ++t) {
      auto [xt, ht] = step_inverse(x, h, t, op, meas);
      x = std::move(xt);
      h = std::move(ht);
    }
    return {std::move(x), std::move(h)};
  }

  ParamRefs<T> params() {
    ParamRefs<T> r;
    for (size_t i = 0; i < v_raw_.size(); ++i)
      r.add("sampler.v_raw_" + std::to_string(i + 1), &v_raw_[i]);
    r.add("sampler.w_T", &w_T_);
    r.add("sampler.w_0", &w_0_);
    return r;
  }

 private:
  DiffusionSchedule<T>* schedule_ = nullptr;
  EstimatorGraph<T>* estimator_ = nullptr;
  std::vector<Param<T>> v_raw_;
  Param<T> w_T_, w_0_;
  bool wired_ = true;
  bool degenerate_ = false;
};

enum class InitMode { backproj, noise };

struct IdmConfig {
  int64_t steps = 3;
  EstimatorConfig est;
  bool wired = true;  // both invertibility levels toggle together
  InitMode init = InitMode::backproj;
};

// schedule + shared estimator + wired sampling framework
template <typename T>
class IdmModel {
 public:
  IdmModel(const IdmConfig& cfg, uint64_t seed)
      : cfg_(cfg), seed_(seed), schedule_(cfg.steps) {
    Rng rng(derive_seed(seed, "model_init"));
    EstimatorConfig ec = cfg.est;
    ec.wired = cfg.wired;
    estimator_ = EstimatorGraph<T>(ec, rng);
    sampler_ = WiredFramework<T>(&schedule_, &estimator_, cfg.wired);
  }

  const IdmConfig& config() const { return cfg_; }
  uint64_t seed() const { return seed_; }
  DiffusionSchedule<T>& schedule() { return schedule_; }
  EstimatorGraph<T>& estimator() { return estimator_; }
  WiredFramework<T>& sampler() { return sampler_; }

  ParamRefs<T> params() {
    ParamRefs<T> r;
    ParamRefs<T> e = estimator_.params();
    ParamRefs<T> s = schedule_.params();
    ParamRefs<T> f = sampler_.params();
    r.items.insert(r.items.end(), e.items.begin(), e.items.end());
    r.items.insert(r.items.end(), s.items.begin(), s.items.end());
    r.items.insert(r.items.end(), f.items.begin(), f.items.end());
    return r;
  }

  // full reconstruction graph; x_T override lets tests choose the start point
  Var forward_on(Tape<T>& tp, const SamplingOperator<T>& op, Var y, const Shape& img_shape,
                 Var xT_override = Var{}) {
    Var bpy = op.backproject_on(tp, y, img_shape);
    Var xT;
    if (xT_override.ok()) {
      xT = xT_override;
    } else if (cfg_.init == InitMode::backproj) {
      Var s = tp.sqrt(schedule_.alpha_bar_on(tp, schedule_.steps()));
      xT = tp.scale(bpy, s);
    } else {
      Rng rng(derive_seed(seed_, "noise_init"));
      xT = tp.input(Tensor<T>::randn(img_shape, rng));
    }
    return sampler_.forward_on(tp, xT, op, y, bpy);
  }

  Tensor<T> reconstruct(const SamplingOperator<T>& op, const Measurement<T>& meas,
                        Mode mode = Mode::cached) {
    Tape<T> tp(mode);
    Var y = tp.constant(meas.y);
    Var out = forward_on(tp, op, y, meas.image_shape);
    return tp.value(out).clone();
  }

 private:
  IdmConfig cfg_;
  uint64_t seed_ = 0;
  DiffusionSchedule<T> schedule_;
  EstimatorGraph<T> estimator_;
  WiredFramework<T> sampler_;
};

}  // namespace revcs
