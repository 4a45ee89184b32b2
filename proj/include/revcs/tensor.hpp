#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "revcs/common.hpp"
#include "revcs/rng.hpp"

namespace revcs {

// Exact byte accounting for activation storage. Every buffer allocated while
// a tape is recording registers here on construction and deregisters when its
// last reference dies, so live_bytes is correct by construction (a debug
// walker re-derives it from reachable buffers to cross-check).
class MemLedger {
 public:
  void on_alloc(int64_t bytes) {
    live_bytes_ += bytes;
    ++live_buffers_;
    peak_bytes_ = std::max(peak_bytes_, live_bytes_);
  }
  void on_free(int64_t bytes) {
    live_bytes_ -= bytes;
    --live_buffers_;
  }
  int64_t live_bytes() const { return live_bytes_; }
  int64_t peak_bytes() const { return peak_bytes_; }
  int64_t live_buffers() const { return live_buffers_; }
  void reset_peak() { peak_bytes_ = live_bytes_; }

 private:
  int64_t live_bytes_ = 0;
  int64_t peak_bytes_ = 0;
  int64_t live_buffers_ = 0;
};

namespace detail {

template <typename T>
struct Storage {
  std::vector<T> data;
  MemLedger* ledger = nullptr;

  Storage(int64_t n, MemLedger* lg) : data(size_t(n)), ledger(lg) {
    if (ledger) ledger->on_alloc(int64_t(n) * int64_t(sizeof(T)));
  }
  ~Storage() {
    if (ledger) ledger->on_free(int64_t(data.size()) * int64_t(sizeof(T)));
  }
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;
};

}  // namespace detail

// Shared dense buffer; ledger-tagged when allocated through a tape.
template <typename T>
class Buffer {
 public:
  Buffer() = default;
  explicit Buffer(int64_t n, MemLedger* ledger = nullptr)
      : s_(std::make_shared<detail::Storage<T>>(n, ledger)) {}

  bool valid() const { return bool(s_); }
  void reset() { s_.reset(); }
  int64_t size() const { return s_ ? int64_t(s_->data.size()) : 0; }
  T* data() { return s_ ? s_->data.data() : nullptr; }
  const T* data() const { return s_ ? s_->data.data() : nullptr; }
  T& operator[](int64_t i) { return s_->data[size_t(i)]; }
  const T& operator[](int64_t i) const { return s_->data[size_t(i)]; }
  bool same_storage(const Buffer& o) const { return s_ == o.s_; }
  const void* storage_id() const { return s_.get(); }
  bool tagged() const { return s_ && s_->ledger != nullptr; }

 private:
  std::shared_ptr<detail::Storage<T>> s_;
};

// Plain dense tensor value: shape + buffer. Gradients and recording live on
// the tape; this type is just data.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, MemLedger* ledger = nullptr)
      : shape_(std::move(shape)), buf_(numel(shape_), ledger) {}
  Tensor(Shape shape, Buffer<T> buf) : shape_(std::move(shape)), buf_(std::move(buf)) {
    require(buf_.size() == numel(shape_), Errc::shape_mismatch,
            "buffer size does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(const Shape& s, MemLedger* lg = nullptr) { return Tensor(s, lg); }
  static Tensor full(const Shape& s, T v, MemLedger* lg = nullptr) {
    Tensor t(s, lg);
    std::fill(t.begin(), t.end(), v);
    return t;
  }
  static Tensor scalar(T v) {
    Tensor t(Shape{}, nullptr);
    t[0] = v;
    return t;
  }
  static Tensor randn(const Shape& s, Rng& rng, T stddev = T(1), MemLedger* lg = nullptr) {
    Tensor t(s, lg);
    for (auto& x : t) x = T(rng.normal()) * stddev;
    return t;
  }
  static Tensor from(const Shape& s, std::initializer_list<T> vals) {
    Tensor t(s);
    require(int64_t(vals.size()) == t.size(), Errc::shape_mismatch, "initializer size");
    std::copy(vals.begin(), vals.end(), t.begin());
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t size() const { return buf_.size(); }
  int64_t dim(size_t i) const { return shape_.at(i); }
  int rank() const { return int(shape_.size()); }
  bool valid() const { return buf_.valid(); }

  T* data() { return buf_.data(); }
  const T* data() const { return buf_.data(); }
  T* begin() { return buf_.data(); }
  T* end() { return buf_.data() + size(); }
  const T* begin() const { return buf_.data(); }
  const T* end() const { return buf_.data() + size(); }
  T& operator[](int64_t i) { return buf_[i]; }
  const T& operator[](int64_t i) const { return buf_[i]; }

  Buffer<T>& buffer() { return buf_; }
  const Buffer<T>& buffer() const { return buf_; }

  Tensor clone(MemLedger* lg = nullptr) const {
    Tensor t(shape_, lg);
    std::memcpy(t.data(), data(), size_t(size()) * sizeof(T));
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(shape_);
    for (int64_t i = 0; i < size(); ++i) t[i] = U((*this)[i]);
    return t;
  }

  bool all_finite() const {
    for (int64_t i = 0; i < size(); ++i)
      if (!std::isfinite(double((*this)[i]))) return false;
    return true;
  }

 private:
  Shape shape_;
  Buffer<T> buf_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), Errc::shape_mismatch, "max_abs_diff");
  T m = 0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
T max_abs(const Tensor<T>& a) {
  T m = 0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i]));
  return m;
}

}  // namespace revcs
