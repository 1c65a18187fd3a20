#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace longenc {

// Live/peak element counters over all Tensor payloads. The benchmark's
// memory-budget ceilings and the peak_live_floats column read these.
namespace meminstr {

std::int64_t live_floats();
std::int64_t peak_live_floats();
void reset_peak();

// 0 means unlimited. When set, an allocation that would push the live
// count above the budget throws MemoryBudgetExceeded.
void set_budget(std::int64_t max_live_floats);
std::int64_t budget();

struct MemoryBudgetExceeded : std::runtime_error {
  MemoryBudgetExceeded(std::int64_t requested, std::int64_t live, std::int64_t budget);
};

void on_alloc(std::size_t n);
void on_free(std::size_t n);

}  // namespace meminstr

template <typename T>
struct CountingAllocator {
  using value_type = T;

  CountingAllocator() = default;
  template <typename U>
  CountingAllocator(const CountingAllocator<U>&) {}

  T* allocate(std::size_t n) {
    meminstr::on_alloc(n);
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    meminstr::on_free(n);
    ::operator delete(p);
  }
  bool operator==(const CountingAllocator&) const { return true; }
  bool operator!=(const CountingAllocator&) const { return false; }
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense n-dimensional array, row-major, flat storage.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(numel_of(shape_)) {}
  Tensor(std::vector<std::size_t> shape, T fill)
      : shape_(std::move(shape)), data_(numel_of(shape_), fill) {}

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::size_t> shape, T v) { return Tensor(std::move(shape), v); }

  static Tensor scalar(T v) {
    Tensor t({1});
    t.data_[0] = v;
    return t;
  }

  template <typename Rng>
  static Tensor randn(Rng& rng, std::vector<std::size_t> shape, T stddev = T(1)) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& x : t.data_) x = static_cast<T>(dist(rng) * static_cast<double>(stddev));
    return t;
  }

  template <typename Rng>
  static Tensor rand_uniform(Rng& rng, std::vector<std::size_t> shape, T lo, T hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& x : t.data_) x = static_cast<T>(dist(rng));
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // 2-d accessor; the kernels index flat for anything deeper.
  T& at(std::size_t i, std::size_t j) { return data_[i * shape_.back() + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_.back() + j]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const T& x : data_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void release() {
    shape_.clear();
    data_.clear();
    data_.shrink_to_fit();
  }

  // Last axis extent; rows() = product of the rest.
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const { return shape_.empty() ? 0 : size() / shape_.back(); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  static std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<T, CountingAllocator<T>> data_;
};

std::string shape_str(const std::vector<std::size_t>& s);

// Raw forward kernels shared by the tape ops and the attention module.
namespace kernels {

// C = op(A) . op(B), batched over equal leading dims. A: [*, m, p], B: [*, p, n]
// (shapes given post-transpose). Throws ShapeError on mismatch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false);

// Rows over the last axis. mask.size() must equal x.size() or divide it with
// the same trailing extent (broadcast over leading dims). Masked-out entries
// get probability exactly 0; a row with no allowed entry comes back all-zero
// and bumps *dead_rows.
template <typename T>
Tensor<T> softmax_masked(const Tensor<T>& logits, const std::vector<std::uint8_t>& mask,
                         std::size_t* dead_rows);

// out = scale (.) x / sqrt(mean(x^2) + eps), rows over last axis. T5-style:
// no mean subtraction, no additive bias.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& scale, T eps = T(1e-6));

}  // namespace kernels

extern template class Tensor<double>;
extern template class Tensor<float>;

}  // namespace longenc
