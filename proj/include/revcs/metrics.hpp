#pragma once

#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "revcs/tensor.hpp"

namespace revcs {

inline constexpr double kPsnrCapDb = 99.99;

// 10*log10(peak^2 / MSE); identical images give +inf (capped to 99.99 dB in
// reports and CSV output).
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
  require(a.shape() == b.shape(), Errc::shape_mismatch, "psnr shapes differ");
  require(a.size() > 0, Errc::bad_argument, "psnr on empty image");
  double mse = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    double d = double(a[i]) - double(b[i]);
    mse += d * d;
  }
  mse /= double(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

inline double cap_db(double db) { return db > kPsnrCapDb ? kPsnrCapDb : db; }

namespace detail {

inline std::vector<double> gaussian_window(int n, double sigma) {
  std::vector<double> w(size_t(n));
  double s = 0;
  int half = n / 2;
  for (int i = 0; i < n; ++i) {
    double d = double(i - half);
    w[size_t(i)] = std::exp(-d * d / (2 * sigma * sigma));
    s += w[size_t(i)];
  }
  for (auto& v : w) v /= s;
  return w;
}

// separable valid-region gaussian filter: in [h,w] -> out [h-n+1, w-n+1]
inline void gauss_valid(std::vector<double>& out, const double* in, int64_t h, int64_t w,
                        const std::vector<double>& win) {
  int64_t n = int64_t(win.size());
  int64_t wo = w - n + 1, ho = h - n + 1;
  std::vector<double> tmp(size_t(h * wo));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < wo; ++x) {
      double s = 0;
      for (int64_t k = 0; k < n; ++k) s += win[size_t(k)] * in[y * w + x + k];
      tmp[size_t(y * wo + x)] = s;
    }
  out.assign(size_t(ho * wo), 0.0);
  for (int64_t y = 0; y < ho; ++y)
    for (int64_t x = 0; x < wo; ++x) {
      double s = 0;
      for (int64_t k = 0; k < n; ++k) s += win[size_t(k)] * tmp[size_t((y + k) * wo + x)];
      out[size_t(y * wo + x)] = s;
    }
}

inline double ssim_channel(const double* a, const double* b, int64_t h, int64_t w, int win_size,
                           double sigma, double c1, double c2) {
  auto win = gaussian_window(win_size, sigma);
  int64_t n = win_size;
  int64_t ho = h - n + 1, wo = w - n + 1;
  std::vector<double> aa(size_t(h * w)), bb(size_t(h * w)), ab(size_t(h * w));
  for (int64_t i = 0; i < h * w; ++i) {
    aa[size_t(i)] = a[i] * a[i];
    bb[size_t(i)] = b[i] * b[i];
    ab[size_t(i)] = a[i] * b[i];
  }
  std::vector<double> mu_a, mu_b, m_aa, m_bb, m_ab;
  gauss_valid(mu_a, a, h, w, win);
  gauss_valid(mu_b, b, h, w, win);
  gauss_valid(m_aa, aa.data(), h, w, win);
  gauss_valid(m_bb, bb.data(), h, w, win);
  gauss_valid(m_ab, ab.data(), h, w, win);
  double acc = 0;
  for (int64_t i = 0; i < ho * wo; ++i) {
    double ma = mu_a[size_t(i)], mb = mu_b[size_t(i)];
    double va = m_aa[size_t(i)] - ma * ma;
    double vb = m_bb[size_t(i)] - mb * mb;
    double cov = m_ab[size_t(i)] - ma * mb;
    acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return acc / double(ho * wo);
}

}  // namespace detail

// Mean local SSIM: 11x11 gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
// valid-region windows, channels averaged.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
  require(a.shape() == b.shape(), Errc::shape_mismatch, "ssim shapes differ");
  Shape s = a.shape();
  require(s.size() == 2 || s.size() == 3, Errc::shape_mismatch, "ssim expects HW or CHW");
  int64_t c = s.size() == 3 ? s[0] : 1;
  int64_t h = s[s.size() - 2], w = s[s.size() - 1];
  const int win = 11;
  require(h >= win && w >= win, Errc::bad_argument, "image smaller than the 11x11 SSIM window");
  double c1 = (0.01 * peak) * (0.01 * peak);
  double c2 = (0.03 * peak) * (0.03 * peak);
  std::vector<double> ca(size_t(h * w)), cb(size_t(h * w));
  double acc = 0;
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t i = 0; i < h * w; ++i) {
      ca[size_t(i)] = double(a[ch * h * w + i]);
      cb[size_t(i)] = double(b[ch * h * w + i]);
    }
    acc += detail::ssim_channel(ca.data(), cb.data(), h, w, win, 1.5, c1, c2);
  }
  return acc / double(c);
}

// ITU-R BT.601 luminance from a CHW RGB image
template <typename T>
Tensor<T> rgb_to_luma(const Tensor<T>& rgb) {
  require(rgb.rank() == 3 && rgb.dim(0) == 3, Errc::shape_mismatch, "expected 3xHxW image");
  int64_t h = rgb.dim(1), w = rgb.dim(2);
  Tensor<T> y(Shape{1, h, w});
  const T* r = rgb.data();
  const T* g = rgb.data() + h * w;
  const T* b = rgb.data() + 2 * h * w;
  for (int64_t i = 0; i < h * w; ++i)
    y[i] = T(0.299) * r[i] + T(0.587) * g[i] + T(0.114) * b[i];
  return y;
}

struct EvalEntry {
  std::string name;
  double psnr_db = 0;
  double ssim_val = 0;
};

struct EvalReport {
  std::vector<EvalEntry> entries;

  double mean_psnr() const {
    double s = 0;
    for (const auto& e : entries) s += cap_db(e.psnr_db);
    return entries.empty() ? 0 : s / double(entries.size());
  }
  double mean_ssim() const {
    double s = 0;
    for (const auto& e : entries) s += e.ssim_val;
    return entries.empty() ? 0 : s / double(entries.size());
  }
  double std_psnr() const {
    if (entries.size() < 2) return 0;
    double m = mean_psnr(), s = 0;
    for (const auto& e : entries) s += (cap_db(e.psnr_db) - m) * (cap_db(e.psnr_db) - m);
    return std::sqrt(s / double(entries.size() - 1));
  }

  void write_csv(std::ostream& os) const {
    os << "name,psnr_db,ssim\n";
    os << std::fixed << std::setprecision(4);
    for (const auto& e : entries) os << e.name << ',' << cap_db(e.psnr_db) << ',' << e.ssim_val << '\n';
  }

  void write_table(std::ostream& os) const {
    os << std::fixed << std::setprecision(2);
    os << "image                          PSNR(dB)   SSIM\n";
    for (const auto& e : entries) {
      os << std::left << std::setw(30) << e.name << std::right << std::setw(8) << cap_db(e.psnr_db)
         << "   " << std::setprecision(4) << e.ssim_val << std::setprecision(2) << '\n';
    }
    os << std::left << std::setw(30) << "mean" << std::right << std::setw(8) << mean_psnr() << "   "
       << std::setprecision(4) << mean_ssim() << '\n';
  }
};

}  // namespace revcs
