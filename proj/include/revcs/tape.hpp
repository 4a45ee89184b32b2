#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "revcs/kernels.hpp"
#include "revcs/tensor.hpp"

namespace revcs {

// cached: every activation retained during forward, standard backprop.
// recompute: activations inside invertible coupled regions are freed during
// forward and regenerated layer-by-layer during backward via the inverse map.
enum class Mode { cached, recompute };

struct Var {
  int id = -1;
  bool ok() const { return id >= 0; }
};

// Persistent learnable tensor. Gradients accumulate across tapes (and across
// the recompute sub-passes of one backward) until zero_grad().
template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  explicit Param(Tensor<T> v) : value(std::move(v)) {}

  void ensure_grad() {
    if (!grad.valid()) grad = Tensor<T>::zeros(value.shape());
  }
  void zero_grad() {
    if (grad.valid()) kernels::fill(grad.data(), grad.size(), T(0));
  }
};

template <typename T>
struct ParamRefs {
  std::vector<std::pair<std::string, Param<T>*>> items;

  void add(const std::string& name, Param<T>* p) { items.emplace_back(name, p); }
  void merge(const std::string& prefix, const ParamRefs& other) {
    for (const auto& [n, p] : other.items) items.emplace_back(prefix + n, p);
  }
  Param<T>* find(const std::string& name) const {
    for (const auto& [n, p] : items)
      if (n == name) return p;
    return nullptr;
  }
  int64_t total_count() const {
    int64_t n = 0;
    for (const auto& [_, p] : items) n += p->value.size();
    return n;
  }
};

struct MemoryReport {
  int64_t peak_bytes = 0;
  int64_t live_bytes = 0;
  int64_t retained_tensor_count = 0;
};

template <typename T>
class Tape;

template <typename T>
using CoupledFn = std::function<Var(Tape<T>&, Var, const std::vector<Var>&)>;

namespace detail {

template <typename T>
struct CoupledRec {
  CoupledFn<T> fn;
  int x_in = -1, h_in = -1, u_in = -1, v_in = -1;
  std::vector<int> extra_in;
  int xp_id = -1, hp_id = -1;
  Buffer<T> gh_stash;
};

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> value;
  std::vector<int> inputs;
  std::function<void(Tape<T>&, int)> backward;
  Param<T>* param = nullptr;
  std::shared_ptr<CoupledRec<T>> coupled;
  int8_t coupled_role = 0;  // 1 = fused output x', 2 = carry output h'
  bool requires_grad = false;
  bool keep_grad = false;  // external inputs: grad readable after backward
  const char* op = "";
};

}  // namespace detail

// Reverse-mode tape. Single-threaded per instance; sub-tapes spawned during
// coupled recompute share the root ledger so byte accounting spans the whole
// execution.
template <typename T>
class Tape {
 public:
  explicit Tape(Mode mode = Mode::cached, std::shared_ptr<MemLedger> ledger = nullptr)
      : mode_(mode), ledger_(ledger ? std::move(ledger) : std::make_shared<MemLedger>()) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Mode mode() const { return mode_; }
  MemLedger& ledger() { return *ledger_; }
  const std::shared_ptr<MemLedger>& ledger_ptr() const { return ledger_; }

  // ---- graph inputs ----------------------------------------------------

  Var leaf(Param<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{it->second};
    int id = add_node(p.value.shape(), p.value.buffer(), {}, nullptr, "leaf");
    nodes_[id].param = &p;
    nodes_[id].requires_grad = true;
    param_nodes_[&p] = id;
    return Var{id};
  }

  Var input(const Tensor<T>& t, bool requires_grad = false) {
    int id = add_node(t.shape(), t.buffer(), {}, nullptr, "input");
    nodes_[id].requires_grad = requires_grad;
    nodes_[id].keep_grad = requires_grad;
    return Var{id};
  }

  Var constant(const Tensor<T>& t) { return input(t, false); }

  Var constant_scalar(T v) {
    Tensor<T> t(Shape{}, ledger_.get());
    t[0] = v;
    int id = add_node(t.shape(), t.buffer(), {}, nullptr, "const");
    return Var{id};
  }

  // ---- access ------------------------------------------------------------

  const Shape& shape(Var v) const { return node(v).shape; }

  Tensor<T> value(Var v) const {
    const auto& n = node(v);
    require(n.value.valid(), Errc::bad_argument, "node value has been freed");
    return Tensor<T>(n.shape, n.value);
  }

  T scalar_value(Var v) const {
    const auto& n = node(v);
    require(n.value.valid() && n.value.size() == 1, Errc::bad_argument, "scalar value");
    return n.value[0];
  }

  // Gradient accumulated on an external input (valid after backward).
  Tensor<T> grad_of(Var v) const {
    auto it = kept_grads_.find(v.id);
    if (it == kept_grads_.end()) return Tensor<T>::zeros(node(v).shape);
    return it->second;
  }

  int node_count() const { return int(nodes_.size()); }

  MemoryReport report() const {
    MemoryReport r;
    r.peak_bytes = ledger_->peak_bytes();
    r.live_bytes = ledger_->live_bytes();
    std::unordered_set<const void*> seen;
    for (const auto& n : nodes_)
      if (n.value.valid() && n.value.tagged() && seen.insert(n.value.storage_id()).second)
        ++r.retained_tensor_count;
    return r;
  }

  // Debug walker: re-derive live bytes from node-reachable tagged buffers and
  // compare with the ledger counter. Valid at quiescent points (no backward in
  // flight, no sub-tapes alive).
  bool ledger_consistent() const {
    std::unordered_set<const void*> seen;
    int64_t bytes = 0;
    for (const auto& n : nodes_)
      if (n.value.valid() && n.value.tagged() && seen.insert(n.value.storage_id()).second)
        bytes += n.value.size() * int64_t(sizeof(T));
    return bytes == ledger_->live_bytes();
  }

  // ---- elementwise / scalar ops -------------------------------------------

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    return binary_map(
        a, b, "add", [](T x, T y) { return x + y; },
        [](Tape& tp, int id, int ia, int ib) {
          tp.accum_scaled(ia, tp.grad_buf(id), T(1));
          tp.accum_scaled(ib, tp.grad_buf(id), T(1));
        });
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    return binary_map(
        a, b, "sub", [](T x, T y) { return x - y; },
        [](Tape& tp, int id, int ia, int ib) {
          tp.accum_scaled(ia, tp.grad_buf(id), T(1));
          tp.accum_scaled(ib, tp.grad_buf(id), T(-1));
        });
  }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    return binary_map(
        a, b, "mul", [](T x, T y) { return x * y; },
        [](Tape& tp, int id, int ia, int ib) {
          tp.accum_product(ia, tp.grad_buf(id), tp.nodes_[ib].value);
          tp.accum_product(ib, tp.grad_buf(id), tp.nodes_[ia].value);
        });
  }

  // s * x with s a scalar node
  Var scale(Var x, Var s) {
    check_scalar(s, "scale");
    Tensor<T> out(shape(x), ledger_.get());
    kernels::scale(out.data(), data(x), scalar_value(s), out.size());
    int xi = x.id, si = s.id;
    return make_op(out, {xi, si}, "scale", [xi, si](Tape& tp, int id) {
      const Buffer<T>& g = tp.grad_buf(id);
      tp.accum_scaled(xi, g, tp.nodes_[si].value[0]);
      if (tp.nodes_[si].requires_grad)
        tp.accum_scalar(si, kernels::dot(g.data(), tp.data_of(xi), g.size()));
    });
  }

  // sa*a + sb*b with scalar nodes sa, sb; the coupling arithmetic
  Var axpby(Var sa, Var a, Var sb, Var b) {
    check_same(a, b, "axpby");
    check_scalar(sa, "axpby");
    check_scalar(sb, "axpby");
    Tensor<T> out(shape(a), ledger_.get());
    kernels::axpby(out.data(), scalar_value(sa), data(a), scalar_value(sb), data(b), out.size());
    int ia = a.id, ib = b.id, isa = sa.id, isb = sb.id;
    return make_op(out, {isa, ia, isb, ib}, "axpby", [ia, ib, isa, isb](Tape& tp, int id) {
      const Buffer<T>& g = tp.grad_buf(id);
      tp.accum_scaled(ia, g, tp.nodes_[isa].value[0]);
      tp.accum_scaled(ib, g, tp.nodes_[isb].value[0]);
      if (tp.nodes_[isa].requires_grad)
        tp.accum_scalar(isa, kernels::dot(g.data(), tp.data_of(ia), g.size()));
      if (tp.nodes_[isb].requires_grad)
        tp.accum_scalar(isb, kernels::dot(g.data(), tp.data_of(ib), g.size()));
    });
  }

  Var identity(Var x) {
    // view: shares storage, no copy
    int xi = x.id;
    int id = add_node(shape(x), node(x).value, {xi},
                      [xi](Tape& tp, int nid) { tp.accum_scaled(xi, tp.grad_buf(nid), T(1)); },
                      "identity");
    return Var{id};
  }

  Var neg(Var x) {
    return unary_map(
        x, "neg", [](T v) { return -v; },
        [](Tape& tp, int id, int ix) { tp.accum_scaled(ix, tp.grad_buf(id), T(-1)); });
  }

  Var one_minus(Var x) {
    return unary_map(
        x, "one_minus", [](T v) { return T(1) - v; },
        [](Tape& tp, int id, int ix) { tp.accum_scaled(ix, tp.grad_buf(id), T(-1)); });
  }

  // m*x + c with compile-time constants
  Var affine(Var x, T m, T c) {
    return unary_map(
        x, "affine", [m, c](T v) { return m * v + c; },
        [m](Tape& tp, int id, int ix) { tp.accum_scaled(ix, tp.grad_buf(id), m); });
  }

  Var sigmoid(Var x) {
    Tensor<T> out(shape(x), ledger_.get());
    const T* px = data(x);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = kernels::sigmoid(px[i]);
    int xi = x.id;
    return make_op(out, {xi}, "sigmoid", [xi](Tape& tp, int id) {
      const Buffer<T>& g = tp.grad_buf(id);
      const Buffer<T>& y = tp.nodes_[id].value;
      Tensor<T> gx(tp.nodes_[id].shape, tp.ledger_.get());
      for (int64_t i = 0; i < gx.size(); ++i) gx[i] = g[i] * y[i] * (T(1) - y[i]);
      tp.accum(xi, gx.buffer());
    });
  }

  Var sqrt(Var x) {
    Tensor<T> out(shape(x), ledger_.get());
    const T* px = data(x);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(px[i]);
    int xi = x.id;
    return make_op(out, {xi}, "sqrt", [xi](Tape& tp, int id) {
      const Buffer<T>& g = tp.grad_buf(id);
      const Buffer<T>& y = tp.nodes_[id].value;
      Tensor<T> gx(tp.nodes_[id].shape, tp.ledger_.get());
      for (int64_t i = 0; i < gx.size(); ++i) gx[i] = g[i] * T(0.5) / y[i];
      tp.accum(xi, gx.buffer());
    });
  }

  Var recip(Var x) {
    Tensor<T> out(shape(x), ledger_.get());
    const T* px = data(x);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = T(1) / px[i];
    int xi = x.id;
    return make_op(out, {xi}, "recip", [xi](Tape& tp, int id) {
      const Buffer<T>& g = tp.grad_buf(id);
      const Buffer<T>& y = tp.nodes_[id].value;
      Tensor<T> gx(tp.nodes_[id].shape, tp.ledger_.get());
      for (int64_t i = 0; i < gx.size(); ++i) gx[i] = -g[i] * y[i] * y[i];
      tp.accum(xi, gx.buffer());
    });
  }

  Var silu(Var x) {
    Tensor<T> out(shape(x), ledger_.get());
    kernels::silu(out.data(), data(x), out.size());
    int xi = x.id;
    return make_op(out, {xi}, "silu", [xi](Tape& tp, int id) {
      Tensor<T> gx(tp.nodes_[id].shape, tp.ledger_.get());
      kernels::fill(gx.data(), gx.size(), T(0));
      kernels::silu_grad(gx.data(), tp.data_of(xi), tp.grad_buf(id).data(), gx.size());
      tp.accum(xi, gx.buffer());
    });
  }

  // ---- reductions -----------------------------------------------------------

  Var sum(Var x) {
    Tensor<T> out(Shape{}, ledger_.get());
    out[0] = kernels::sum(data(x), node(x).value.size());
    int xi = x.id;
    return make_op(out, {xi}, "sum", [xi](Tape& tp, int id) {
      T g = tp.grad_buf(id)[0];
      Tensor<T> gx(tp.nodes_[xi].shape, tp.ledger_.get());
      kernels::fill(gx.data(), gx.size(), g);
      tp.accum(xi, gx.buffer());
    });
  }

  Var dot(Var a, Var b) {
    check_same(a, b, "dot");
    Tensor<T> out(Shape{}, ledger_.get());
    out[0] = kernels::dot(data(a), data(b), node(a).value.size());
    int ia = a.id, ib = b.id;
    return make_op(out, {ia, ib}, "dot", [ia, ib](Tape& tp, int id) {
      T g = tp.grad_buf(id)[0];
      tp.accum_scaled_value(ia, tp.nodes_[ib].value, g);
      tp.accum_scaled_value(ib, tp.nodes_[ia].value, g);
    });
  }

  // mean absolute error; subgradient at zero is 0
  Var l1_loss(Var a, Var b) {
    check_same(a, b, "l1_loss");
    Tensor<T> out(Shape{}, ledger_.get());
    out[0] = kernels::l1_mean(data(a), data(b), node(a).value.size());
    int ia = a.id, ib = b.id;
    return make_op(out, {ia, ib}, "l1_loss", [ia, ib](Tape& tp, int id) {
      T g = tp.grad_buf(id)[0];
      int64_t n = tp.nodes_[ia].value.size();
      Tensor<T> ga(tp.nodes_[ia].shape, tp.ledger_.get());
      Tensor<T> gb(tp.nodes_[ib].shape, tp.ledger_.get());
      kernels::fill(ga.data(), n, T(0));
      kernels::fill(gb.data(), n, T(0));
      kernels::l1_mean_grad(ga.data(), gb.data(), tp.data_of(ia), tp.data_of(ib), g, n);
      tp.accum(ia, ga.buffer());
      tp.accum(ib, gb.buffer());
    });
  }

  Var l2_loss(Var a, Var b) {
    check_same(a, b, "l2_loss");
    Tensor<T> out(Shape{}, ledger_.get());
    out[0] = kernels::l2_mean(data(a), data(b), node(a).value.size());
    int ia = a.id, ib = b.id;
    return make_op(out, {ia, ib}, "l2_loss", [ia, ib](Tape& tp, int id) {
      T g = tp.grad_buf(id)[0];
      int64_t n = tp.nodes_[ia].value.size();
      Tensor<T> ga(tp.nodes_[ia].shape, tp.ledger_.get());
      Tensor<T> gb(tp.nodes_[ib].shape, tp.ledger_.get());
      kernels::fill(ga.data(), n, T(0));
      kernels::fill(gb.data(), n, T(0));
      kernels::l2_mean_grad(ga.data(), gb.data(), tp.data_of(ia), tp.data_of(ib), g, n);
      tp.accum(ia, ga.buffer());
      tp.accum(ib, gb.buffer());
    });
  }

  // ---- linear algebra / image ops -------------------------------------------

  Var matmul(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    require(sa.size() == 2 && sb.size() == 2, Errc::shape_mismatch, "matmul expects 2-d inputs");
    require(sa[1] == sb[0], Errc::shape_mismatch,
            "matmul inner extents " + shape_str(sa) + " vs " + shape_str(sb));
    int64_t m = sa[0], k = sa[1], n = sb[1];
    Tensor<T> out(Shape{m, n}, ledger_.get());
    kernels::matmul(out.data(), data(a), data(b), m, k, n, false);
    int ia = a.id, ib = b.id;
    return make_op(out, {ia, ib}, "matmul", [ia, ib, m, k, n](Tape& tp, int id) {
      const T* g = tp.grad_buf(id).data();
      if (tp.nodes_[ia].requires_grad) {
        Tensor<T> ga(Shape{m, k}, tp.ledger_.get());
        kernels::matmul_a_bt(ga.data(), g, tp.data_of(ib), m, n, k, false);
        tp.accum(ia, ga.buffer());
      }
      if (tp.nodes_[ib].requires_grad) {
        Tensor<T> gb(Shape{k, n}, tp.ledger_.get());
        kernels::matmul_at_b(gb.data(), tp.data_of(ia), g, k, m, n, false);
        tp.accum(ib, gb.buffer());
      }
    });
  }

  Var conv2d(Var x, Var w, Var b, int64_t stride = 1) {
    const Shape& sx = shape(x);
    const Shape& sw = shape(w);
    require(sx.size() == 3 && sw.size() == 4, Errc::shape_mismatch, "conv2d expects CHW and OIkk");
    require(sw[1] == sx[0], Errc::shape_mismatch,
            "conv2d channels " + shape_str(sx) + " vs " + shape_str(sw));
    require(sw[2] == sw[3], Errc::shape_mismatch, "conv2d kernel must be square");
    auto d = kernels::conv_dims(sx[0], sx[1], sx[2], sw[0], sw[2], stride);
    if (b.ok())
      require(shape(b) == Shape{d.cout}, Errc::shape_mismatch, "conv2d bias shape");
    Tensor<T> out(Shape{d.cout, d.ho, d.wo}, ledger_.get());
    kernels::conv2d_forward(out.data(), data(x), data(w), b.ok() ? data(b) : nullptr, d);
    int ix = x.id, iw = w.id, ib = b.ok() ? b.id : -1;
    return make_op(out, ib >= 0 ? std::vector<int>{ix, iw, ib} : std::vector<int>{ix, iw},
                   "conv2d", [ix, iw, ib, d](Tape& tp, int id) {
                     const T* g = tp.grad_buf(id).data();
                     if (tp.nodes_[ix].requires_grad) {
                       Tensor<T> gx(tp.nodes_[ix].shape, tp.ledger_.get());
                       kernels::fill(gx.data(), gx.size(), T(0));
                       kernels::conv2d_grad_input(gx.data(), g, tp.data_of(iw), d);
                       tp.accum(ix, gx.buffer());
                     }
                     if (tp.nodes_[iw].requires_grad) {
                       Tensor<T> gw(tp.nodes_[iw].shape, tp.ledger_.get());
                       kernels::fill(gw.data(), gw.size(), T(0));
                       Tensor<T> gb;
                       if (ib >= 0 && tp.nodes_[ib].requires_grad) {
                         gb = Tensor<T>(tp.nodes_[ib].shape, tp.ledger_.get());
                         kernels::fill(gb.data(), gb.size(), T(0));
                       }
                       kernels::conv2d_grad_weight(gw.data(), gb.valid() ? gb.data() : nullptr,
                                                   tp.data_of(ix), g, d);
                       tp.accum(iw, gw.buffer());
                       if (gb.valid()) tp.accum(ib, gb.buffer());
                     }
                   });
  }

  Var pixel_shuffle(Var x, int64_t r) {
    const Shape& s = shape(x);
    require(s.size() == 3, Errc::shape_mismatch, "pixel_shuffle expects CHW");
    require(r >= 1 && s[0] % (r * r) == 0, Errc::bad_argument,
            "pixel_shuffle: channels " + std::to_string(s[0]) + " not divisible by r^2");
    int64_t c = s[0] / (r * r), h = s[1], w = s[2];
    Tensor<T> out(Shape{c, h * r, w * r}, ledger_.get());
    kernels::pixel_shuffle(out.data(), data(x), c, h, w, r);
    int ix = x.id;
    return make_op(out, {ix}, "pixel_shuffle", [ix, c, h, w, r](Tape& tp, int id) {
      Tensor<T> gx(tp.nodes_[ix].shape, tp.ledger_.get());
      kernels::pixel_unshuffle(gx.data(), tp.grad_buf(id).data(), c, h * r, w * r, r);
      tp.accum(ix, gx.buffer());
    });
  }

  Var pixel_unshuffle(Var x, int64_t r) {
    const Shape& s = shape(x);
    require(s.size() == 3, Errc::shape_mismatch, "pixel_unshuffle expects CHW");
    require(r >= 1 && s[1] % r == 0 && s[2] % r == 0, Errc::bad_argument,
            "pixel_unshuffle: spatial dims not divisible by r");
    int64_t c = s[0], h = s[1], w = s[2];
    Tensor<T> out(Shape{c * r * r, h / r, w / r}, ledger_.get());
    kernels::pixel_unshuffle(out.data(), data(x), c, h, w, r);
    int ix = x.id;
    return make_op(out, {ix}, "pixel_unshuffle", [ix, c, h, w, r](Tape& tp, int id) {
      Tensor<T> gx(tp.nodes_[ix].shape, tp.ledger_.get());
      kernels::pixel_shuffle(gx.data(), tp.grad_buf(id).data(), c, h / r, w / r, r);
      tp.accum(ix, gx.buffer());
    });
  }

  Var upsample_nearest(Var x, int64_t r) {
    const Shape& s = shape(x);
    require(s.size() == 3, Errc::shape_mismatch, "upsample expects CHW");
    Tensor<T> out(Shape{s[0], s[1] * r, s[2] * r}, ledger_.get());
    kernels::upsample_nearest(out.data(), data(x), s[0], s[1], s[2], r);
    int ix = x.id;
    int64_t c = s[0], h = s[1], w = s[2];
    return make_op(out, {ix}, "upsample", [ix, c, h, w, r](Tape& tp, int id) {
      Tensor<T> gx(tp.nodes_[ix].shape, tp.ledger_.get());
      kernels::fill(gx.data(), gx.size(), T(0));
      kernels::upsample_nearest_grad(gx.data(), tp.grad_buf(id).data(), c, h, w, r);
      tp.accum(ix, gx.buffer());
    });
  }

  Var concat_channels(const std::vector<Var>& parts) {
    require(!parts.empty(), Errc::bad_argument, "concat of nothing");
    const Shape& s0 = shape(parts[0]);
    require(s0.size() == 3, Errc::shape_mismatch, "concat expects CHW");
    int64_t ctot = 0;
    for (Var p : parts) {
      const Shape& s = shape(p);
      require(s.size() == 3 && s[1] == s0[1] && s[2] == s0[2], Errc::shape_mismatch,
              "concat spatial dims");
      ctot += s[0];
    }
    Tensor<T> out(Shape{ctot, s0[1], s0[2]}, ledger_.get());
    int64_t off = 0;
    std::vector<int> ids;
    for (Var p : parts) {
      int64_t n = node(p).value.size();
      kernels::copy(out.data() + off, data(p), n);
      off += n;
      ids.push_back(p.id);
    }
    return make_op(out, ids, "concat", [ids](Tape& tp, int id) {
      const T* g = tp.grad_buf(id).data();
      int64_t off = 0;
      for (int pid : ids) {
        int64_t n = numel(tp.nodes_[pid].shape);
        if (tp.nodes_[pid].requires_grad) {
          Tensor<T> gp(tp.nodes_[pid].shape, tp.ledger_.get());
          kernels::copy(gp.data(), g + off, n);
          tp.accum(pid, gp.buffer());
        }
        off += n;
      }
    });
  }

  Var softmax_rows(Var x) {
    const Shape& s = shape(x);
    require(s.size() == 2, Errc::shape_mismatch, "softmax_rows expects 2-d");
    Tensor<T> out(s, ledger_.get());
    kernels::softmax_rows(out.data(), data(x), s[0], s[1]);
    int ix = x.id;
    int64_t rows = s[0], cols = s[1];
    return make_op(out, {ix}, "softmax", [ix, rows, cols](Tape& tp, int id) {
      Tensor<T> gx(tp.nodes_[ix].shape, tp.ledger_.get());
      kernels::fill(gx.data(), gx.size(), T(0));
      kernels::softmax_rows_grad(gx.data(), tp.nodes_[id].value.data(), tp.grad_buf(id).data(),
                                 rows, cols);
      tp.accum(ix, gx.buffer());
    });
  }

  Var transpose2d(Var x) {
    const Shape& s = shape(x);
    require(s.size() == 2, Errc::shape_mismatch, "transpose expects 2-d");
    Tensor<T> out(Shape{s[1], s[0]}, ledger_.get());
    const T* px = data(x);
    for (int64_t i = 0; i < s[0]; ++i)
      for (int64_t j = 0; j < s[1]; ++j) out[j * s[0] + i] = px[i * s[1] + j];
    int ix = x.id;
    int64_t r = s[0], c = s[1];
    return make_op(out, {ix}, "transpose", [ix, r, c](Tape& tp, int id) {
      const T* g = tp.grad_buf(id).data();
      Tensor<T> gx(tp.nodes_[ix].shape, tp.ledger_.get());
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) gx[i * c + j] = g[j * r + i];
      tp.accum(ix, gx.buffer());
    });
  }

  Var reshape(Var x, Shape s) {
    require(numel(s) == numel(shape(x)), Errc::shape_mismatch, "reshape element count");
    int ix = x.id;
    int id = add_node(std::move(s), node(x).value, {ix},
                      [ix](Tape& tp, int nid) { tp.accum_scaled(ix, tp.grad_buf(nid), T(1)); },
                      "reshape");
    return Var{id};
  }

  // Custom linear op hook (used by the sampling-operator module): forward fn
  // fills the output from the input; adjoint fn maps output grads to input
  // grads. Both must be pure.
  Var linear_op(Var x, Shape out_shape, const char* name,
                std::function<void(const T*, T*)> fwd, std::function<void(const T*, T*)> adj) {
    Tensor<T> out(std::move(out_shape), ledger_.get());
    fwd(data(x), out.data());
    int ix = x.id;
    auto adj_fn = std::move(adj);
    return make_op(out, {ix}, name, [ix, adj_fn](Tape& tp, int id) {
      if (!tp.nodes_[ix].requires_grad) return;
      Tensor<T> gx(tp.nodes_[ix].shape, tp.ledger_.get());
      kernels::fill(gx.data(), gx.size(), T(0));
      adj_fn(tp.grad_buf(id).data(), gx.data());
      tp.accum(ix, gx.buffer());
    });
  }

  // ---- invertible coupling ----------------------------------------------
  // Forward:  x' = u*F(x) + v*h,  h' = x      (one wired layer)
  // Inverse:  x = h',  h = (x' - u*F(x)) / v
  // In cached mode this records plain ops; in recompute mode the interior of
  // F is freed after forward and regenerated during backward from the inverse.

  std::pair<Var, Var> coupled_step(Var x, Var h, Var u, Var v, CoupledFn<T> fn,
                                   std::vector<Var> extras = {}) {
    check_same(x, h, "coupled_step");
    check_scalar(u, "coupled_step");
    check_scalar(v, "coupled_step");

    if (mode_ == Mode::cached) {
      Var fx = fn(*this, x, extras);
      require(shape(fx) == shape(x), Errc::shape_mismatch, "coupled fn must preserve shape");
      Var xp = axpby(u, fx, v, h);
      Var hp = identity(x);
      return {xp, hp};
    }

    T vval = scalar_value(v);
    require(vval >= T(0.05) && vval <= T(0.95), Errc::bad_argument,
            "coupling scalar v outside safe range [0.05, 0.95] in recompute mode");

    auto rec = std::make_shared<detail::CoupledRec<T>>();
    rec->fn = std::move(fn);
    rec->x_in = x.id;
    rec->h_in = h.id;
    rec->u_in = u.id;
    rec->v_in = v.id;
    for (Var e : extras) rec->extra_in.push_back(e.id);

    // run F on a throwaway sub-tape: values only, interior freed on scope exit
    Buffer<T> fx_val;
    {
      Tape<T> sub(Mode::recompute, ledger_);
      Var xs = sub.input(value(x), false);
      std::vector<Var> exs;
      exs.reserve(extras.size());
      for (Var e : extras) exs.push_back(sub.input(value(e), false));
      Var fx = rec->fn(sub, xs, exs);
      require(sub.shape(fx) == shape(x), Errc::shape_mismatch, "coupled fn must preserve shape");
      fx_val = sub.node(fx).value;
    }

    Tensor<T> xp_val(shape(x), ledger_.get());
    kernels::axpby(xp_val.data(), scalar_value(u), fx_val.data(), vval, data(h), xp_val.size());
    fx_val.reset();
    check_finite(xp_val.buffer(), "coupled_step");

    // carry stream takes the input buffer; consumed inputs are freed
    Buffer<T> hp_val = nodes_[size_t(x.id)].value;
    nodes_[size_t(x.id)].value.reset();
    nodes_[size_t(h.id)].value.reset();

    std::vector<int> in_ids{x.id, h.id, u.id, v.id};
    for (Var e : extras) in_ids.push_back(e.id);
    int xp_id = add_node(shape(x), xp_val.buffer(), in_ids,
                         [](Tape& tp, int nid) { tp.coupled_backward(nid); }, "coupled_x");
    nodes_[size_t(xp_id)].coupled = rec;
    nodes_[size_t(xp_id)].coupled_role = 1;
    nodes_[size_t(xp_id)].requires_grad = true;
    int hp_id = add_node(shape(x), hp_val, {x.id}, nullptr, "coupled_h");
    nodes_[size_t(hp_id)].coupled = rec;
    nodes_[size_t(hp_id)].coupled_role = 2;
    nodes_[size_t(hp_id)].requires_grad = true;
    rec->xp_id = xp_id;
    rec->hp_id = hp_id;
    return {Var{xp_id}, Var{hp_id}};
  }

  // ---- backward -----------------------------------------------------------

  void backward(Var loss) {
    require(!nodes_.empty(), Errc::bad_argument, "backward without forward");
    require(numel(shape(loss)) == 1, Errc::bad_argument, "backward requires a scalar loss");
    Tensor<T> seed(shape(loss), ledger_.get());
    seed[0] = T(1);
    backward_seeded(loss, seed.buffer());
  }

  void backward_seeded(Var out, Buffer<T> seed) {
    require(!backward_done_, Errc::bad_argument, "tape already consumed by backward");
    backward_done_ = true;
    grads_.assign(nodes_.size(), Buffer<T>());
    grads_[size_t(out.id)] = std::move(seed);

    for (int id = int(nodes_.size()) - 1; id >= 0; --id) {
      auto& n = nodes_[size_t(id)];
      if (n.coupled_role == 2) {
        // stash the carry-output grad for the sibling; keep the value alive,
        // the sibling consumes it for reconstruction and frees it
        n.coupled->gh_stash = grads_[size_t(id)];
        grads_[size_t(id)].reset();
        continue;
      }
      bool has_grad = grads_[size_t(id)].valid();
      if (n.coupled_role == 1) {
        // always runs: reconstruction must happen even on grad-free branches
        n.backward(*this, id);
      } else if (has_grad && n.backward) {
        n.backward(*this, id);
      }
      if (has_grad && n.param) {
        n.param->ensure_grad();
        kernels::add_into(n.param->grad.data(), grads_[size_t(id)].data(),
                          n.param->grad.size());
      }
      if (has_grad && n.keep_grad) {
        Tensor<T> kept(n.shape);  // untagged: outlives the tape's accounting
        kernels::copy(kept.data(), grads_[size_t(id)].data(), kept.size());
        kept_grads_.emplace(id, std::move(kept));
      }
      grads_[size_t(id)].reset();
      n.value.reset();
    }
    grads_.clear();
  }

 private:
  detail::Node<T>& node(Var v) {
    require(v.id >= 0 && v.id < int(nodes_.size()), Errc::bad_argument, "invalid var");
    return nodes_[size_t(v.id)];
  }
  const detail::Node<T>& node(Var v) const {
    require(v.id >= 0 && v.id < int(nodes_.size()), Errc::bad_argument, "invalid var");
    return nodes_[size_t(v.id)];
  }
  const T* data(Var v) const {
    const auto& n = node(v);
    require(n.value.valid(), Errc::bad_argument,
            std::string("use of freed activation in op input (") + n.op + ")");
    return n.value.data();
  }
  const T* data_of(int id) const { return data(Var{id}); }
  const Buffer<T>& grad_buf(int id) const { return grads_[size_t(id)]; }

  void check_finite(const Buffer<T>& b, const char* op) {
#if REVCS_CHECKS_ENABLED
    if (!kernels::all_finite(b.data(), b.size()))
      fail(Errc::non_finite, std::string("non-finite value produced by ") + op);
#else
    (void)b;
    (void)op;
#endif
  }

  int add_node(Shape shape, Buffer<T> value, std::vector<int> inputs,
               std::function<void(Tape&, int)> bw, const char* op) {
    require(!backward_done_, Errc::bad_argument, "tape already consumed by backward");
    detail::Node<T> n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.backward = std::move(bw);
    n.op = op;
    for (int i : n.inputs)
      if (nodes_[size_t(i)].requires_grad) n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  Var make_op(Tensor<T>& out, std::vector<int> inputs, const char* op,
              std::function<void(Tape&, int)> bw) {
    check_finite(out.buffer(), op);
    int id = add_node(out.shape(), out.buffer(), std::move(inputs), std::move(bw), op);
    return Var{id};
  }

  template <typename FwdF, typename BwdF>
  Var unary_map(Var x, const char* op, FwdF f, BwdF bw) {
    Tensor<T> out(shape(x), ledger_.get());
    const T* px = data(x);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = f(px[i]);
    int ix = x.id;
    return make_op(out, {ix}, op, [ix, bw](Tape& tp, int id) { bw(tp, id, ix); });
  }

  template <typename FwdF, typename BwdF>
  Var binary_map(Var a, Var b, const char* op, FwdF f, BwdF bw) {
    Tensor<T> out(shape(a), ledger_.get());
    const T* pa = data(a);
    const T* pb = data(b);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = f(pa[i], pb[i]);
    int ia = a.id, ib = b.id;
    return make_op(out, {ia, ib}, op, [ia, ib, bw](Tape& tp, int id) { bw(tp, id, ia, ib); });
  }

  void check_same(Var a, Var b, const char* op) {
    require(shape(a) == shape(b), Errc::shape_mismatch,
            std::string(op) + ": " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
  }
  void check_scalar(Var s, const char* op) {
    require(numel(shape(s)) == 1, Errc::shape_mismatch, std::string(op) + ": expected scalar");
  }

  // gradient accumulation helpers -------------------------------------------

  Buffer<T>& grad_slot(int id) {
    auto& g = grads_[size_t(id)];
    if (!g.valid()) {
      Tensor<T> z(nodes_[size_t(id)].shape, ledger_.get());
      kernels::fill(z.data(), z.size(), T(0));
      g = z.buffer();
    }
    return g;
  }

  void accum(int id, const Buffer<T>& contribution) {
    if (!nodes_[size_t(id)].requires_grad) return;
    auto& g = grads_[size_t(id)];
    if (!g.valid()) {
      g = contribution;
      return;
    }
    kernels::add_into(g.data(), contribution.data(), g.size());
  }

  void accum_scaled(int id, const Buffer<T>& g_out, T s) {
    if (!nodes_[size_t(id)].requires_grad) return;
    auto& g = grad_slot(id);
    kernels::add_scaled(g.data(), g_out.data(), s, g.size());
  }

  void accum_scaled_value(int id, const Buffer<T>& values, T s) {
    if (!nodes_[size_t(id)].requires_grad) return;
    auto& g = grad_slot(id);
    kernels::add_scaled(g.data(), values.data(), s, g.size());
  }

  void accum_product(int id, const Buffer<T>& g_out, const Buffer<T>& other) {
    if (!nodes_[size_t(id)].requires_grad) return;
    auto& g = grad_slot(id);
    for (int64_t i = 0; i < g.size(); ++i) g[i] += g_out[i] * other[i];
  }

  void accum_scalar(int id, T v) {
    if (!nodes_[size_t(id)].requires_grad) return;
    auto& g = grad_slot(id);
    g[0] += v;
  }

  // inverse-map reconstruction + gradient pass for one wired layer
  void coupled_backward(int xp_id) {
    auto rec = nodes_[size_t(xp_id)].coupled;
    auto& xp_node = nodes_[size_t(xp_id)];
    auto& hp_node = nodes_[size_t(rec->hp_id)];
    require(xp_node.value.valid() && hp_node.value.valid(), Errc::bad_argument,
            "coupled outputs missing at backward (write-back order violated)");

    T uval = nodes_[size_t(rec->u_in)].value[0];
    T vval = nodes_[size_t(rec->v_in)].value[0];
    int64_t n = numel(xp_node.shape);

    // x = h' (exact: the carry held the input bytes)
    nodes_[size_t(rec->x_in)].value = hp_node.value;

    // re-run F with taping to regenerate interior activations
    Tape<T> sub(Mode::recompute, ledger_);
    Var xs = sub.input(Tensor<T>(xp_node.shape, nodes_[size_t(rec->x_in)].value), true);
    std::vector<Var> exs;
    exs.reserve(rec->extra_in.size());
    for (int eid : rec->extra_in) {
      auto& en = nodes_[size_t(eid)];
      require(en.value.valid(), Errc::bad_argument, "coupled extra input freed");
      exs.push_back(sub.input(Tensor<T>(en.shape, en.value), en.requires_grad));
    }
    Var fx = rec->fn(sub, xs, exs);
    const Buffer<T>& fx_val = sub.node(fx).value;

    // h = (x' - u*F(x)) / v
    {
      Tensor<T> hrec(xp_node.shape, ledger_.get());
      kernels::axpby(hrec.data(), T(1) / vval, xp_node.value.data(), -uval / vval, fx_val.data(),
                     n);
      check_finite(hrec.buffer(), "coupled_inverse");
      nodes_[size_t(rec->h_in)].value = hrec.buffer();
    }

    const Buffer<T>& gxp = grads_[size_t(xp_id)];
    const Buffer<T>& ghp = rec->gh_stash;

    if (gxp.valid()) {
      accum_scalar(rec->u_in, kernels::dot(gxp.data(), fx_val.data(), n));
      accum_scalar(rec->v_in, kernels::dot(gxp.data(), nodes_[size_t(rec->h_in)].value.data(), n));
      accum_scaled(rec->h_in, gxp, vval);
      Tensor<T> seed(xp_node.shape, ledger_.get());
      kernels::scale(seed.data(), gxp.data(), uval, n);
      sub.backward_seeded(fx, seed.buffer());
      Tensor<T> gx = sub.grad_of(xs);
      accum(rec->x_in, gx.buffer());
      for (size_t i = 0; i < exs.size(); ++i) {
        if (!nodes_[size_t(rec->extra_in[i])].requires_grad) continue;
        Tensor<T> ge = sub.grad_of(exs[i]);
        accum(rec->extra_in[i], ge.buffer());
      }
    }
    if (ghp.valid()) accum(rec->x_in, ghp);

    // clear outputs and carried grad: this wired layer is done
    xp_node.value.reset();
    hp_node.value.reset();
    rec->gh_stash.reset();
  }

  Mode mode_;
  std::shared_ptr<MemLedger> ledger_;
  std::vector<detail::Node<T>> nodes_;
  std::vector<Buffer<T>> grads_;
  std::unordered_map<const Param<T>*, int> param_nodes_;
  std::unordered_map<int, Tensor<T>> kept_grads_;
  bool backward_done_ = false;
};

}  // namespace revcs
