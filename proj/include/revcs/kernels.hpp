#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "revcs/common.hpp"

// Raw numeric kernels on contiguous buffers. All loops are fixed-order and
// single-threaded so results are bitwise reproducible. Workspace vectors are
// internal scratch, freed before the kernel returns; they are not activation
// storage and stay off the tape ledger.
namespace revcs::kernels {

template <typename T>
void fill(T* p, int64_t n, T v) {
  for (int64_t i = 0; i < n; ++i) p[i] = v;
}

template <typename T>
void copy(T* dst, const T* src, int64_t n) {
  std::memcpy(dst, src, size_t(n) * sizeof(T));
}

template <typename T>
void add_into(T* dst, const T* src, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

template <typename T>
void add_scaled(T* dst, const T* src, T s, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[i] += s * src[i];
}

// out = sa*a + sb*b; the one arithmetic path used by both cached and
// recompute wiring so the two modes agree bitwise.
template <typename T>
void axpby(T* out, T sa, const T* a, T sb, const T* b, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = sa * a[i] + sb * b[i];
}

template <typename T>
void add(T* out, const T* a, const T* b, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void sub(T* out, const T* a, const T* b, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
void mul(T* out, const T* a, const T* b, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
void scale(T* out, const T* a, T s, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = s * a[i];
}

template <typename T>
T sum(const T* a, int64_t n) {
  T s = 0;
  for (int64_t i = 0; i < n; ++i) s += a[i];
  return s;
}

template <typename T>
T dot(const T* a, const T* b, int64_t n) {
  T s = 0;
  for (int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
void silu(T* out, const T* x, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] * sigmoid(x[i]);
}

// d silu / dx = s(x) * (1 + x * (1 - s(x)))
template <typename T>
void silu_grad(T* gx, const T* x, const T* gy, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    T s = sigmoid(x[i]);
    gx[i] += gy[i] * s * (T(1) + x[i] * (T(1) - s));
  }
}

// ---- matmul ----------------------------------------------------------------

// C[m,n] (+)= A[m,k] * B[k,n], row-major
template <typename T>
void matmul(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n, bool accumulate) {
  if (!accumulate) fill(c, m * n, T(0));
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      T av = arow[p];
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] (+)= A^T[k,m]^T... i.e. a is stored [k,m]; computes A^T * B
template <typename T>
void matmul_at_b(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n, bool accumulate) {
  if (!accumulate) fill(c, m * n, T(0));
  for (int64_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      T av = arow[i];
      T* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] (+)= A[m,k] * B^T where b is stored [n,k]
template <typename T>
void matmul_a_bt(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n, bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      T s = dot(arow, b + j * k, k);
      crow[j] = accumulate ? crow[j] + s : s;
    }
  }
}

// ---- conv2d (CHW input, OCkk weight, zero same-padding) ---------------------

struct ConvDims {
  int64_t cin, h, w;
  int64_t cout, k;
  int64_t stride;
  int64_t pad;   // k/2
  int64_t ho, wo;
};

inline ConvDims conv_dims(int64_t cin, int64_t h, int64_t w, int64_t cout, int64_t k,
                          int64_t stride) {
  require(k >= 1 && (k % 2) == 1, Errc::bad_argument, "conv kernel size must be odd");
  require(stride >= 1, Errc::bad_argument, "conv stride must be >= 1");
  ConvDims d;
  d.cin = cin;
  d.h = h;
  d.w = w;
  d.cout = cout;
  d.k = k;
  d.stride = stride;
  d.pad = k / 2;
  d.ho = (h - 1) / stride + 1;
  d.wo = (w - 1) / stride + 1;
  return d;
}

template <typename T>
void pad_chw(std::vector<T>& out, const T* in, int64_t c, int64_t h, int64_t w, int64_t pad) {
  int64_t hp = h + 2 * pad, wp = w + 2 * pad;
  out.assign(size_t(c * hp * wp), T(0));
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t y = 0; y < h; ++y)
      copy(out.data() + (ci * hp + y + pad) * wp + pad, in + (ci * h + y) * w, w);
}

template <typename T>
void conv2d_forward(T* out, const T* in, const T* weight, const T* bias, const ConvDims& d) {
  std::vector<T> padded;
  pad_chw(padded, in, d.cin, d.h, d.w, d.pad);
  int64_t wp = d.w + 2 * d.pad;
  for (int64_t co = 0; co < d.cout; ++co) {
    T* oc = out + co * d.ho * d.wo;
    fill(oc, d.ho * d.wo, bias ? bias[co] : T(0));
    for (int64_t ci = 0; ci < d.cin; ++ci) {
      const T* pc = padded.data() + ci * (d.h + 2 * d.pad) * wp;
      const T* wk = weight + (co * d.cin + ci) * d.k * d.k;
      for (int64_t ky = 0; ky < d.k; ++ky)
        for (int64_t kx = 0; kx < d.k; ++kx) {
          T wv = wk[ky * d.k + kx];
          if (d.stride == 1) {
            for (int64_t y = 0; y < d.ho; ++y) {
              const T* irow = pc + (y + ky) * wp + kx;
              T* orow = oc + y * d.wo;
              for (int64_t x = 0; x < d.wo; ++x) orow[x] += wv * irow[x];
            }
          } else {
            for (int64_t y = 0; y < d.ho; ++y) {
              const T* irow = pc + (y * d.stride + ky) * wp + kx;
              T* orow = oc + y * d.wo;
              for (int64_t x = 0; x < d.wo; ++x) orow[x] += wv * irow[x * d.stride];
            }
          }
        }
    }
  }
}

// gin += dconv/din; scatter through a padded scratch handles any stride
template <typename T>
void conv2d_grad_input(T* gin, const T* gout, const T* weight, const ConvDims& d) {
  int64_t hp = d.h + 2 * d.pad, wp = d.w + 2 * d.pad;
  std::vector<T> gpad(size_t(d.cin * hp * wp), T(0));
  for (int64_t co = 0; co < d.cout; ++co) {
    const T* gc = gout + co * d.ho * d.wo;
    for (int64_t ci = 0; ci < d.cin; ++ci) {
      T* pc = gpad.data() + ci * hp * wp;
      const T* wk = weight + (co * d.cin + ci) * d.k * d.k;
      for (int64_t ky = 0; ky < d.k; ++ky)
        for (int64_t kx = 0; kx < d.k; ++kx) {
          T wv = wk[ky * d.k + kx];
          if (d.stride == 1) {
            for (int64_t y = 0; y < d.ho; ++y) {
              T* prow = pc + (y + ky) * wp + kx;
              const T* grow = gc + y * d.wo;
              for (int64_t x = 0; x < d.wo; ++x) prow[x] += wv * grow[x];
            }
          } else {
            for (int64_t y = 0; y < d.ho; ++y) {
              T* prow = pc + (y * d.stride + ky) * wp + kx;
              const T* grow = gc + y * d.wo;
              for (int64_t x = 0; x < d.wo; ++x) prow[x * d.stride] += wv * grow[x];
            }
          }
        }
    }
  }
  for (int64_t ci = 0; ci < d.cin; ++ci)
    for (int64_t y = 0; y < d.h; ++y)
      add_into(gin + (ci * d.h + y) * d.w, gpad.data() + (ci * hp + y + d.pad) * wp + d.pad, d.w);
}

template <typename T>
void conv2d_grad_weight(T* gw, T* gb, const T* in, const T* gout, const ConvDims& d) {
  std::vector<T> padded;
  pad_chw(padded, in, d.cin, d.h, d.w, d.pad);
  int64_t wp = d.w + 2 * d.pad;
  for (int64_t co = 0; co < d.cout; ++co) {
    const T* gc = gout + co * d.ho * d.wo;
    if (gb) gb[co] += sum(gc, d.ho * d.wo);
    for (int64_t ci = 0; ci < d.cin; ++ci) {
      const T* pc = padded.data() + ci * (d.h + 2 * d.pad) * wp;
      T* wk = gw + (co * d.cin + ci) * d.k * d.k;
      for (int64_t ky = 0; ky < d.k; ++ky)
        for (int64_t kx = 0; kx < d.k; ++kx) {
          T acc = 0;
          for (int64_t y = 0; y < d.ho; ++y) {
            const T* irow = pc + (y * d.stride + ky) * wp + kx;
            const T* grow = gc + y * d.wo;
            if (d.stride == 1) {
              for (int64_t x = 0; x < d.wo; ++x) acc += irow[x] * grow[x];
            } else {
              for (int64_t x = 0; x < d.wo; ++x) acc += irow[x * d.stride] * grow[x];
            }
          }
          wk[ky * d.k + kx] += acc;
        }
    }
  }
}

// ---- pixel shuffle ----------------------------------------------------------
// shuffle: [C*r^2, H, W] -> [C, H*r, W*r], element convention
//   out[c, y*r+dy, x*r+dx] = in[c*r^2 + dy*r + dx, y, x]
// unshuffle is the exact inverse.

template <typename T>
void pixel_shuffle(T* out, const T* in, int64_t c_out, int64_t h, int64_t w, int64_t r) {
  int64_t hr = h * r, wr = w * r;
  for (int64_t c = 0; c < c_out; ++c)
    for (int64_t dy = 0; dy < r; ++dy)
      for (int64_t dx = 0; dx < r; ++dx) {
        const T* ic = in + (c * r * r + dy * r + dx) * h * w;
        for (int64_t y = 0; y < h; ++y) {
          T* orow = out + (c * hr + y * r + dy) * wr + dx;
          const T* irow = ic + y * w;
          for (int64_t x = 0; x < w; ++x) orow[x * r] = irow[x];
        }
      }
}

template <typename T>
void pixel_unshuffle(T* out, const T* in, int64_t c_in, int64_t h, int64_t w, int64_t r) {
  // in: [c_in, h, w] with h,w divisible by r; out: [c_in*r^2, h/r, w/r]
  int64_t ho = h / r, wo = w / r;
  for (int64_t c = 0; c < c_in; ++c)
    for (int64_t dy = 0; dy < r; ++dy)
      for (int64_t dx = 0; dx < r; ++dx) {
        T* oc = out + (c * r * r + dy * r + dx) * ho * wo;
        for (int64_t y = 0; y < ho; ++y) {
          const T* irow = in + (c * h + y * r + dy) * w + dx;
          T* orow = oc + y * wo;
          for (int64_t x = 0; x < wo; ++x) orow[x] = irow[x * r];
        }
      }
}

// ---- nearest-neighbor upsample ----------------------------------------------

template <typename T>
void upsample_nearest(T* out, const T* in, int64_t c, int64_t h, int64_t w, int64_t r) {
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t y = 0; y < h * r; ++y) {
      const T* irow = in + (ci * h + y / r) * w;
      T* orow = out + (ci * h * r + y) * w * r;
      for (int64_t x = 0; x < w * r; ++x) orow[x] = irow[x / r];
    }
}

template <typename T>
void upsample_nearest_grad(T* gin, const T* gout, int64_t c, int64_t h, int64_t w, int64_t r) {
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t y = 0; y < h * r; ++y) {
      T* irow = gin + (ci * h + y / r) * w;
      const T* orow = gout + (ci * h * r + y) * w * r;
      for (int64_t x = 0; x < w * r; ++x) irow[x / r] += orow[x];
    }
}

// ---- losses -----------------------------------------------------------------

template <typename T>
T l1_mean(const T* a, const T* b, int64_t n) {
  T s = 0;
  for (int64_t i = 0; i < n; ++i) s += std::abs(a[i] - b[i]);
  return s / T(n);
}

// subgradient at zero fixed to 0
template <typename T>
void l1_mean_grad(T* ga, T* gb, const T* a, const T* b, T gy, int64_t n) {
  T s = gy / T(n);
  for (int64_t i = 0; i < n; ++i) {
    T d = a[i] - b[i];
    T sg = d > T(0) ? s : (d < T(0) ? -s : T(0));
    if (ga) ga[i] += sg;
    if (gb) gb[i] -= sg;
  }
}

template <typename T>
T l2_mean(const T* a, const T* b, int64_t n) {
  T s = 0;
  for (int64_t i = 0; i < n; ++i) {
    T d = a[i] - b[i];
    s += d * d;
  }
  return s / T(n);
}

template <typename T>
void l2_mean_grad(T* ga, T* gb, const T* a, const T* b, T gy, int64_t n) {
  T s = T(2) * gy / T(n);
  for (int64_t i = 0; i < n; ++i) {
    T d = s * (a[i] - b[i]);
    if (ga) ga[i] += d;
    if (gb) gb[i] -= d;
  }
}

// ---- softmax over rows --------------------------------------------------------

template <typename T>
void softmax_rows(T* out, const T* in, int64_t rows, int64_t cols) {
  for (int64_t i = 0; i < rows; ++i) {
    const T* x = in + i * cols;
    T* y = out + i * cols;
    T mx = x[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    T s = 0;
    for (int64_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    T inv = T(1) / s;
    for (int64_t j = 0; j < cols; ++j) y[j] *= inv;
  }
}

template <typename T>
void softmax_rows_grad(T* gx, const T* y, const T* gy, int64_t rows, int64_t cols) {
  for (int64_t i = 0; i < rows; ++i) {
    const T* yr = y + i * cols;
    const T* gr = gy + i * cols;
    T* gxr = gx + i * cols;
    T d = dot(yr, gr, cols);
    for (int64_t j = 0; j < cols; ++j) gxr[j] += yr[j] * (gr[j] - d);
  }
}

template <typename T>
bool all_finite(const T* p, int64_t n) {
  for (int64_t i = 0; i < n; ++i)
    if (!std::isfinite(double(p[i]))) return false;
  return true;
}

}  // namespace revcs::kernels
