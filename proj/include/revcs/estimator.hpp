#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "revcs/cs_operator.hpp"
#include "revcs/tape.hpp"

namespace revcs {

template <typename T>
struct Conv2dLayer {
  Param<T> w, b;
  int64_t stride = 1;

  void init(int64_t cout, int64_t cin, int64_t k, int64_t s, Rng& rng, bool zero_init = false) {
    stride = s;
    w.value = Tensor<T>(Shape{cout, cin, k, k});
    b.value = Tensor<T>::zeros(Shape{cout});
    if (zero_init) {
      kernels::fill(w.value.data(), w.value.size(), T(0));
    } else {
      T stddev = std::sqrt(T(2) / T(cin * k * k));
      for (auto& v : w.value) v = T(rng.normal()) * stddev;
    }
  }

  Var on(Tape<T>& tp, Var x) { return tp.conv2d(x, tp.leaf(w), tp.leaf(b), stride); }

  void collect(ParamRefs<T>& r, const std::string& prefix) {
    r.add(prefix + ".w", &w);
    r.add(prefix + ".b", &b);
  }
};

// pre-activation residual block with 2x hidden expansion:
// x + conv2(silu(conv1(silu(x))))
template <typename T>
struct ResBlock {
  Conv2dLayer<T> conv1, conv2;

  void init(int64_t c, Rng& rng) {
    conv1.init(2 * c, c, 3, 1, rng);
    conv2.init(c, 2 * c, 3, 1, rng);
  }

  Var on(Tape<T>& tp, Var x) {
    Var a = conv2.on(tp, tp.silu(conv1.on(tp, tp.silu(x))));
    return tp.add(x, a);
  }

  void collect(ParamRefs<T>& r, const std::string& prefix) {
    conv1.collect(r, prefix + ".conv1");
    conv2.collect(r, prefix + ".conv2");
  }
};

// Measurement-physics injector:
//   f     = conv1((F_in) shuffled up by r)            image-space map
//   F_out = F_in + (conv2([f, At A f, At y])) shuffled down by r
// conv2 starts at zero so training begins from the uninjected function.
template <typename T>
struct Injector {
  Conv2dLayer<T> conv1, conv2;
  int64_t r = 1;
  int64_t feat_c = 0;

  void init(int64_t feature_channels, int64_t img_channels, int64_t ratio, Rng& rng) {
    r = ratio;
    feat_c = feature_channels;
    require(feature_channels % (r * r) == 0, Errc::bad_argument,
            "injector: feature channels not divisible by r^2");
    conv1.init(img_channels, feature_channels / (r * r), 3, 1, rng);
    conv2.init(feature_channels / (r * r), 3 * img_channels, 3, 1, rng, /*zero_init=*/true);
  }

  Var on(Tape<T>& tp, Var fin, const SamplingOperator<T>& op, Var bpy) {
    Var up = r > 1 ? tp.pixel_shuffle(fin, r) : fin;
    Var f = conv1.on(tp, up);
    Var aaf = op.backproject_on(tp, op.measure_on(tp, f), tp.shape(f));
    Var cat = tp.concat_channels({f, aaf, bpy});
    Var d = conv2.on(tp, cat);
    Var down = r > 1 ? tp.pixel_unshuffle(d, r) : d;
    return tp.add(fin, down);
  }

  // stand-alone value-level form (computes At y itself)
  Tensor<T> inject(const Tensor<T>& fin, const SamplingOperator<T>& op,
                   const Measurement<T>& meas) {
    Tape<T> tp(Mode::cached);
    Var fv = tp.input(fin);
    Var bpy = tp.constant(op.back_project(meas));
    Var out = on(tp, fv, op, bpy);
    return tp.value(out).clone();
  }

  void collect(ParamRefs<T>& r_, const std::string& prefix) {
    conv1.collect(r_, prefix + ".conv1");
    conv2.collect(r_, prefix + ".conv2");
  }
};

// one wired unit: residual block followed by its injector
template <typename T>
struct InjectedBlock {
  ResBlock<T> res;
  Injector<T> inj;
  bool has_injector = false;

  Var apply(Tape<T>& tp, Var x, const SamplingOperator<T>* op, Var bpy) {
    Var a = res.on(tp, x);
    if (has_injector && op && bpy.ok()) a = inj.on(tp, a, *op, bpy);
    return a;
  }

  void collect(ParamRefs<T>& r, const std::string& prefix) {
    res.collect(r, prefix + ".res");
    if (has_injector) inj.collect(r, prefix + ".inj");
  }
  void collect_injector(ParamRefs<T>& r, const std::string& prefix) {
    if (has_injector) inj.collect(r, prefix + ".inj");
  }
};

// Equidimensional block group wired for invertibility. The auxiliary stream
// enters as h = w_in * x and leaves as out = x + w_out * h, mirroring the
// framework-level boundary scalars; every block shares the group's (u, v).
template <typename T>
struct WiredGroup {
  std::vector<InjectedBlock<T>> blocks;
  Param<T> v_raw;
  Param<T> w_in;
  Param<T> w_out;
  bool wired = true;

  void init_scalars() {
    v_raw.value = Tensor<T>::full(Shape{}, raw_from_v(T(0.5)));
    w_in.value = Tensor<T>::full(Shape{}, T(1));
    w_out.value = Tensor<T>::full(Shape{}, T(0));
  }

  static T v_from_raw(T raw) { return T(0.05) + T(0.90) * kernels::sigmoid(raw); }
  static T raw_from_v(T v) {
    T p = (v - T(0.05)) / T(0.90);
    require(p > T(0) && p < T(1), Errc::bad_argument, "v outside (0.05, 0.95)");
    return std::log(p / (T(1) - p));
  }

  T v_value() const { return v_from_raw(v_raw.value[0]); }

  Var on(Tape<T>& tp, Var x, const SamplingOperator<T>* op, Var bpy) {
    if (!wired) {
      for (auto& b : blocks) x = b.apply(tp, x, op, bpy);
      return x;
    }
    Var v = tp.affine(tp.sigmoid(tp.leaf(v_raw)), T(0.90), T(0.05));
    Var u = tp.one_minus(v);
    Var h = tp.scale(x, tp.leaf(w_in));
    std::vector<Var> extras;
    if (bpy.ok()) extras.push_back(bpy);
    for (auto& b : blocks) {
      InjectedBlock<T>* bp = &b;
      const SamplingOperator<T>* opp = op;
      CoupledFn<T> fn = [bp, opp](Tape<T>& t2, Var xx, const std::vector<Var>& ex) {
        return bp->apply(t2, xx, opp, ex.empty() ? Var{} : ex[0]);
      };
      auto [xp, hp] = tp.coupled_step(x, h, u, v, std::move(fn), extras);
      x = xp;
      h = hp;
    }
    return tp.add(x, tp.scale(h, tp.leaf(w_out)));
  }

  // value-level block application (used by the explicit inverse)
  Tensor<T> block_value(size_t i, const Tensor<T>& x, const SamplingOperator<T>* op,
                        const Tensor<T>& bpy) {
    Tape<T> tp(Mode::cached);
    Var xv = tp.input(x);
    Var bv = bpy.valid() ? tp.constant(bpy) : Var{};
    Var out = blocks[i].apply(tp, xv, op, bv);
    return tp.value(out).clone();
  }

  // Eq.(4) over the block chain, value level
  std::pair<Tensor<T>, Tensor<T>> forward_values(const Tensor<T>& x_in, const Tensor<T>& h_in,
                                                 const SamplingOperator<T>* op,
                                                 const Tensor<T>& bpy) {
    T v = v_value(), u = T(1) - v;
    Tensor<T> x = x_in.clone(), h = h_in.clone();
    for (size_t i = 0; i < blocks.size(); ++i) {
      Tensor<T> gx = block_value(i, x, op, bpy);
      Tensor<T> xp(x.shape());
      kernels::axpby(xp.data(), u, gx.data(), v, h.data(), x.size());
      h = x;
      x = std::move(xp);
    }
    return {std::move(x), std::move(h)};
  }

  // Eq.(5): exact algebraic inverse of forward_values
  std::pair<Tensor<T>, Tensor<T>> inverse_values(const Tensor<T>& x_out, const Tensor<T>& h_out,
                                                 const SamplingOperator<T>* op,
                                                 const Tensor<T>& bpy) {
    T v = v_value(), u = T(1) - v;
    require(v >= T(0.05), Errc::bad_argument, "group inverse: v below safe bound");
    Tensor<T> xp = x_out.clone(), hp = h_out.clone();
    for (size_t i = blocks.size(); i-- > 0;) {
      Tensor<T> x = hp;
      Tensor<T> gx = block_value(i, x, op, bpy);
      Tensor<T> h(x.shape());
      kernels::axpby(h.data(), T(1) / v, xp.data(), -u / v, gx.data(), x.size());
      xp = std::move(x);
      hp = std::move(h);
    }
    return {std::move(xp), std::move(hp)};
  }

  void collect(ParamRefs<T>& r, const std::string& prefix) {
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(r, prefix + ".block" + std::to_string(i));
    r.add(prefix + ".v_raw", &v_raw);
    r.add(prefix + ".w_in", &w_in);
    r.add(prefix + ".w_out", &w_out);
  }
  void collect_injectors(ParamRefs<T>& r, const std::string& prefix) {
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect_injector(r, prefix + ".block" + std::to_string(i));
  }
};

// single-head spatial self-attention with zero-init output projection
template <typename T>
struct AttentionBlock {
  Conv2dLayer<T> q, k, v, proj;
  int64_t c = 0;

  void init(int64_t channels, Rng& rng) {
    c = channels;
    q.init(c, c, 1, 1, rng);
    k.init(c, c, 1, 1, rng);
    v.init(c, c, 1, 1, rng);
    proj.init(c, c, 1, 1, rng, /*zero_init=*/true);
  }

  Var on(Tape<T>& tp, Var x) {
    const Shape& s = tp.shape(x);
    int64_t hw = s[1] * s[2];
    Var qm = tp.reshape(q.on(tp, x), Shape{c, hw});
    Var km = tp.reshape(k.on(tp, x), Shape{c, hw});
    Var vm = tp.reshape(v.on(tp, x), Shape{c, hw});
    Var logits = tp.affine(tp.matmul(tp.transpose2d(qm), km), T(1) / std::sqrt(T(c)), T(0));
    Var attn = tp.softmax_rows(logits);
    Var out = tp.matmul(vm, tp.transpose2d(attn));
    Var y = proj.on(tp, tp.reshape(out, s));
    return tp.add(x, y);
  }

  void collect(ParamRefs<T>& r, const std::string& prefix) {
    q.collect(r, prefix + ".q");
    k.collect(r, prefix + ".k");
    v.collect(r, prefix + ".v");
    proj.collect(r, prefix + ".proj");
  }
};

struct EstimatorConfig {
  int64_t img_channels = 1;
  int64_t c0 = 16;  // channels at full resolution
  int64_t c1 = 32;  // channels at half resolution
  int64_t blocks_per_group = 2;
  bool injectors = true;
  bool wired = true;
  bool attention = false;
};

// Toy noise-estimation U-Net: two spatial scales, four wired groups
// (down @ c0, two mid @ c1, up @ c0), additive skip, shared across all
// sampling steps. The step index changes nothing architecturally.
template <typename T>
class EstimatorGraph {
 public:
  EstimatorGraph() = default;

  EstimatorGraph(const EstimatorConfig& cfg, Rng& rng) : cfg_(cfg) {
    require(cfg.c0 >= 1 && cfg.c1 % 4 == 0, Errc::bad_argument,
            "estimator: c1 must be divisible by 4 for the r=2 injector");
    conv_in_.init(cfg.c0, cfg.img_channels, 3, 1, rng);
    init_group(g_down_, cfg.c0, 1, rng);
    down_.init(cfg.c1, cfg.c0, 3, 2, rng);
    init_group(g_mid1_, cfg.c1, 2, rng);
    init_group(g_mid2_, cfg.c1, 2, rng);
    if (cfg.attention) attn_.init(cfg.c1, rng);
    up_.init(cfg.c0, cfg.c1, 3, 1, rng);
    init_group(g_up_, cfg.c0, 1, rng);
    conv_out_.init(cfg.img_channels, cfg.c0, 3, 1, rng, /*zero_init=*/true);
  }

  const EstimatorConfig& config() const { return cfg_; }

  Var estimate_noise_on(Tape<T>& tp, Var x, int64_t /*t_index*/, const SamplingOperator<T>* op,
                        Var bpy) {
    const Shape& s = tp.shape(x);
    require(s.size() == 3 && s[0] == cfg_.img_channels, Errc::shape_mismatch,
            "estimator input " + shape_str(s));
    require(s[1] % 2 == 0 && s[2] % 2 == 0, Errc::shape_mismatch,
            "estimator input spatial dims must be even");
    Var a = conv_in_.on(tp, x);
    a = g_down_.on(tp, a, op, bpy);
    Var skip = a;
    a = down_.on(tp, a);
    a = g_mid1_.on(tp, a, op, bpy);
    if (cfg_.attention) a = attn_.on(tp, a);
    a = g_mid2_.on(tp, a, op, bpy);
    a = tp.upsample_nearest(a, 2);
    a = up_.on(tp, a);
    a = tp.add(a, skip);
    a = g_up_.on(tp, a, op, bpy);
    return conv_out_.on(tp, a);
  }

  Tensor<T> estimate_noise(const Tensor<T>& x, int64_t t, const SamplingOperator<T>* op,
                           const Measurement<T>* meas) {
    Tape<T> tp(Mode::cached);
    Var xv = tp.input(x);
    Var bpy;
    if (op && meas && cfg_.injectors) bpy = tp.constant(op->back_project(*meas));
    Var out = estimate_noise_on(tp, xv, t, op, bpy);
    return tp.value(out).clone();
  }

  ParamRefs<T> params() {
    ParamRefs<T> r;
    conv_in_.collect(r, "estimator.conv_in");
    g_down_.collect(r, "estimator.g_down");
    down_.collect(r, "estimator.down");
    g_mid1_.collect(r, "estimator.g_mid1");
    g_mid2_.collect(r, "estimator.g_mid2");
    if (cfg_.attention) attn_.collect(r, "estimator.attn");
    up_.collect(r, "estimator.up");
    g_up_.collect(r, "estimator.g_up");
    conv_out_.collect(r, "estimator.conv_out");
    return r;
  }

  ParamRefs<T> injector_params() {
    ParamRefs<T> r;
    g_down_.collect_injectors(r, "estimator.g_down");
    g_mid1_.collect_injectors(r, "estimator.g_mid1");
    g_mid2_.collect_injectors(r, "estimator.g_mid2");
    g_up_.collect_injectors(r, "estimator.g_up");
    return r;
  }

  int64_t total_param_count() { return params().total_count(); }
  int64_t injector_param_count() { return injector_params().total_count(); }

  WiredGroup<T>& group(int i) {
    WiredGroup<T>* gs[4] = {&g_down_, &g_mid1_, &g_mid2_, &g_up_};
    return *gs[i];
  }
  static constexpr int group_count() { return 4; }

 private:
  void init_group(WiredGroup<T>& g, int64_t c, int64_t r, Rng& rng) {
    g.wired = cfg_.wired;
    g.blocks.resize(size_t(cfg_.blocks_per_group));
    for (auto& b : g.blocks) {
      b.res.init(c, rng);
      b.has_injector = cfg_.injectors;
      if (cfg_.injectors) b.inj.init(c, cfg_.img_channels, r, rng);
    }
    g.init_scalars();
  }

  EstimatorConfig cfg_;
  Conv2dLayer<T> conv_in_, down_, up_, conv_out_;
  WiredGroup<T> g_down_, g_mid1_, g_mid2_, g_up_;
  AttentionBlock<T> attn_;
};

}  // namespace revcs
