#pragma once

#include <cmath>
#include <vector>

#include "revcs/binio.hpp"
#include "revcs/rng.hpp"
#include "revcs/tape.hpp"
#include "revcs/tensor.hpp"

namespace revcs {

template <typename T>
struct Measurement {
  Tensor<T> y;        // stacked per-channel, per-tile segments of length m_blk
  Shape image_shape;  // (C, H, W)
  uint64_t op_seed = 0;
  int64_t block = 0;
  int64_t m_blk = 0;
};

// Block-based compressed-sensing measurement operator. One m_blk x B^2 matrix
// with orthonormal rows samples every BxB tile of every channel independently,
// so the full-image operator is block-diagonal and A_dagger = A^T.
template <typename T>
class SamplingOperator {
 public:
  SamplingOperator() = default;

  static SamplingOperator build(int64_t block, double ratio, uint64_t seed) {
    require(block >= 1, Errc::bad_argument, "block size must be >= 1");
    require(ratio > 0.0 && ratio <= 1.0, Errc::bad_argument, "ratio must be in (0,1]");
    int64_t n = block * block;
    int64_t m = int64_t(std::llround(ratio * double(n)));
    require(m >= 1, Errc::bad_argument,
            "ratio " + std::to_string(ratio) + " too small for block " + std::to_string(block) +
                " (m_blk rounds to 0)");

    // draw and orthonormalize in double regardless of runtime precision
    Rng rng(derive_seed(seed, "cs_operator"));
    std::vector<double> rows(size_t(m * n));
    for (auto& v : rows) v = rng.normal();
    // modified Gram-Schmidt on rows == QR of A^T with positive diag(R)
    for (int64_t i = 0; i < m; ++i) {
      double* ri = rows.data() + i * n;
      for (int64_t j = 0; j < i; ++j) {
        const double* rj = rows.data() + j * n;
        double p = 0;
        for (int64_t k = 0; k < n; ++k) p += ri[k] * rj[k];
        for (int64_t k = 0; k < n; ++k) ri[k] -= p * rj[k];
      }
      double nrm = 0;
      for (int64_t k = 0; k < n; ++k) nrm += ri[k] * ri[k];
      nrm = std::sqrt(nrm);
      require(nrm > 1e-12, Errc::bad_argument, "degenerate Gaussian draw during orthonormalization");
      for (int64_t k = 0; k < n; ++k) ri[k] /= nrm;
    }

    SamplingOperator op;
    op.block_ = block;
    op.ratio_ = ratio;
    op.seed_ = seed;
    op.m_blk_ = m;
    op.a_blk_ = Tensor<T>(Shape{m, n});
    for (int64_t i = 0; i < m * n; ++i) op.a_blk_[i] = T(rows[size_t(i)]);
    return op;
  }

  // explicit matrix, for tests and file loading
  static SamplingOperator from_matrix(int64_t block, Tensor<T> a_blk, double ratio = 0.0,
                                      uint64_t seed = 0) {
    require(a_blk.rank() == 2 && a_blk.dim(1) == block * block, Errc::shape_mismatch,
            "per-block matrix must be m x B^2");
    SamplingOperator op;
    op.block_ = block;
    op.ratio_ = ratio > 0 ? ratio : double(a_blk.dim(0)) / double(a_blk.dim(1));
    op.seed_ = seed;
    op.m_blk_ = a_blk.dim(0);
    op.a_blk_ = std::move(a_blk);
    return op;
  }

  int64_t block() const { return block_; }
  double ratio() const { return ratio_; }
  uint64_t seed() const { return seed_; }
  int64_t m_blk() const { return m_blk_; }
  int64_t n_blk() const { return block_ * block_; }
  const Tensor<T>& matrix() const { return a_blk_; }

  T row_orthonormality_error() const {
    // max |A A^T - I|
    T worst = 0;
    for (int64_t i = 0; i < m_blk_; ++i)
      for (int64_t j = 0; j < m_blk_; ++j) {
        T d = kernels::dot(a_blk_.data() + i * n_blk(), a_blk_.data() + j * n_blk(), n_blk());
        worst = std::max(worst, std::abs(d - (i == j ? T(1) : T(0))));
      }
    return worst;
  }

  void check_image(const Shape& s) const {
    require(s.size() == 3, Errc::shape_mismatch, "image must be CHW, got " + shape_str(s));
    require(s[1] % block_ == 0 && s[2] % block_ == 0, Errc::shape_mismatch,
            "image " + shape_str(s) + " not divisible into " + std::to_string(block_) + "x" +
                std::to_string(block_) + " tiles");
  }

  int64_t measurement_len(const Shape& s) const {
    check_image(s);
    return s[0] * (s[1] / block_) * (s[2] / block_) * m_blk_;
  }

  // y = A x, each channel sampled independently, tiles in raster order
  void apply_fwd(const T* img, T* y, const Shape& s) const {
    const int64_t c = s[0], h = s[1], w = s[2], b = block_, n = n_blk();
    std::vector<T> tile(static_cast<size_t>(n));
    int64_t seg = 0;
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t ty = 0; ty < h / b; ++ty)
        for (int64_t tx = 0; tx < w / b; ++tx) {
          for (int64_t by = 0; by < b; ++by)
            kernels::copy(tile.data() + by * b, img + (ci * h + ty * b + by) * w + tx * b, b);
          for (int64_t i = 0; i < m_blk_; ++i)
            y[seg + i] = kernels::dot(a_blk_.data() + i * n, tile.data(), n);
          seg += m_blk_;
        }
  }

  // img += A^T y (adjoint == pseudo-inverse for orthonormal rows)
  void apply_adj(const T* y, T* img, const Shape& s) const {
    const int64_t c = s[0], h = s[1], w = s[2], b = block_, n = n_blk();
    std::vector<T> tile(static_cast<size_t>(n));
    int64_t seg = 0;
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t ty = 0; ty < h / b; ++ty)
        for (int64_t tx = 0; tx < w / b; ++tx) {
          kernels::fill(tile.data(), n, T(0));
          for (int64_t i = 0; i < m_blk_; ++i)
            kernels::add_scaled(tile.data(), a_blk_.data() + i * n, y[seg + i], n);
          for (int64_t by = 0; by < b; ++by)
            kernels::add_into(img + (ci * h + ty * b + by) * w + tx * b, tile.data() + by * b, b);
          seg += m_blk_;
        }
  }

  // ---- value-level API ------------------------------------------------------

  Measurement<T> sample(const Tensor<T>& img) const {
    check_image(img.shape());
    Measurement<T> meas;
    meas.y = Tensor<T>(Shape{measurement_len(img.shape())});
    meas.image_shape = img.shape();
    meas.op_seed = seed_;
    meas.block = block_;
    meas.m_blk = m_blk_;
    apply_fwd(img.data(), meas.y.data(), img.shape());
    return meas;
  }

  Tensor<T> back_project(const Measurement<T>& meas) const {
    check_measurement(meas);
    Tensor<T> img = Tensor<T>::zeros(meas.image_shape);
    apply_adj(meas.y.data(), img.data(), meas.image_shape);
    return img;
  }

  // x_bar = A^T y + (I - A^T A) x_hat, computed as x_hat + A^T (y - A x_hat)
  Tensor<T> rnd_project(const Tensor<T>& xhat, const Measurement<T>& meas) const {
    check_measurement(meas);
    require(xhat.shape() == meas.image_shape, Errc::shape_mismatch,
            "rnd_project estimate shape " + shape_str(xhat.shape()));
    Tensor<T> r(Shape{meas.y.size()});
    apply_fwd(xhat.data(), r.data(), xhat.shape());
    for (int64_t i = 0; i < r.size(); ++i) r[i] = meas.y[i] - r[i];
    Tensor<T> out = xhat.clone();
    apply_adj(r.data(), out.data(), xhat.shape());
    assert_consistent(out, meas.y, xhat.shape());
    return out;
  }

  // ---- tape ops ---------------------------------------------------------------

  Var measure_on(Tape<T>& tp, Var img) const {
    Shape s = tp.shape(img);
    check_image(s);
    return tp.linear_op(
        img, Shape{measurement_len(s)}, "cs_measure",
        [this, s](const T* in, T* out) { apply_fwd(in, out, s); },
        [this, s](const T* gy, T* gx) { apply_adj(gy, gx, s); });
  }

  Var backproject_on(Tape<T>& tp, Var y, Shape img_shape) const {
    require(tp.shape(y) == Shape{measurement_len(img_shape)}, Errc::shape_mismatch,
            "measurement length mismatch for image " + shape_str(img_shape));
    return tp.linear_op(
        y, img_shape, "cs_backproject",
        [this, img_shape](const T* in, T* out) {
          kernels::fill(out, numel(img_shape), T(0));
          apply_adj(in, out, img_shape);
        },
        [this, img_shape](const T* gimg, T* gy) { apply_fwd(gimg, gy, img_shape); });
  }

  Var rnd_project_on(Tape<T>& tp, Var xhat, Var y) const {
    Shape s = tp.shape(xhat);
    Var ax = measure_on(tp, xhat);
    Var r = tp.sub(y, ax);
    Var bp = backproject_on(tp, r, s);
    Var out = tp.add(xhat, bp);
#if REVCS_CHECKS_ENABLED
    assert_consistent(tp.value(out), tp.value(y), s);
#endif
    return out;
  }

  // ---- RCSA container ---------------------------------------------------------

  void save(const std::string& path) const {
    binio::Writer w(path);
    w.magic("RCSA");
    w.u16(1);
    w.u32(uint32_t(block_));
    w.f64(ratio_);
    w.u64(seed_);
    w.u32(uint32_t(m_blk_));
    w.u32(uint32_t(n_blk()));
    if constexpr (std::is_same_v<T, float>) {
      w.f32_array(a_blk_.data(), size_t(a_blk_.size()));
    } else {
      for (int64_t i = 0; i < a_blk_.size(); ++i) w.f32(float(a_blk_[i]));
    }
    w.close();
  }

  static SamplingOperator load(const std::string& path) {
    binio::Reader r(path);
    r.expect_magic("RCSA");
    uint16_t ver = r.u16();
    require(ver == 1, Errc::parse_error, path + ": unsupported RCSA version");
    int64_t block = r.u32();
    double ratio = r.f64();
    uint64_t seed = r.u64();
    int64_t m = r.u32();
    int64_t n = r.u32();
    require(n == block * block, Errc::parse_error, path + ": inconsistent block metadata");
    Tensor<T> a(Shape{m, n});
    for (int64_t i = 0; i < m * n; ++i) a[i] = T(r.f32());
    return from_matrix(block, std::move(a), ratio, seed);
  }

 private:
  void check_measurement(const Measurement<T>& meas) const {
    require(meas.y.size() == measurement_len(meas.image_shape), Errc::shape_mismatch,
            "measurement length " + std::to_string(meas.y.size()) + " inconsistent with image " +
                shape_str(meas.image_shape));
  }

  // Eq-style contract: ||A x_bar - y||_inf stays below tolerance. Measured in
  // double so the check itself does not add rounding noise; tolerance scales
  // with the estimate magnitude to stay meaningful on transient large
  // activations during training.
  void assert_consistent(const Tensor<T>& xbar, const Tensor<T>& y, const Shape& s) const {
#if REVCS_CHECKS_ENABLED
    double worst = consistency_error(xbar, y, s);
    double scale = std::max(1.0, double(max_abs(xbar)));
    double tol = (std::is_same_v<T, float> ? 1e-5 : 1e-11) * scale;
    if (worst > tol)
      fail(Errc::consistency, "measurement consistency violated: |A x_bar - y|_inf = " +
                                  std::to_string(worst));
#else
    (void)xbar;
    (void)y;
    (void)s;
#endif
  }

 public:
  // ||A x_bar - y||_inf evaluated in double precision
  double consistency_error(const Tensor<T>& xbar, const Tensor<T>& y, const Shape& s) const {
    const int64_t c = s[0], h = s[1], w = s[2], b = block_, n = n_blk();
    std::vector<double> tile(static_cast<size_t>(n));
    double worst = 0;
    int64_t seg = 0;
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t ty = 0; ty < h / b; ++ty)
        for (int64_t tx = 0; tx < w / b; ++tx) {
          for (int64_t by = 0; by < b; ++by)
            for (int64_t bx = 0; bx < b; ++bx)
              tile[size_t(by * b + bx)] = double(xbar[(ci * h + ty * b + by) * w + tx * b + bx]);
          for (int64_t i = 0; i < m_blk_; ++i) {
            double acc = 0;
            for (int64_t k = 0; k < n; ++k) acc += double(a_blk_[i * n + k]) * tile[size_t(k)];
            worst = std::max(worst, std::abs(acc - double(y[seg + i])));
          }
          seg += m_blk_;
        }
    return worst;
  }

 private:
  int64_t block_ = 0;
  double ratio_ = 0.0;
  uint64_t seed_ = 0;
  int64_t m_blk_ = 0;
  Tensor<T> a_blk_;
};

}  // namespace revcs
