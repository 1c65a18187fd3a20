#include "longenc/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace longenc {

namespace meminstr {

namespace {
std::atomic<std::int64_t> g_live{0};
std::atomic<std::int64_t> g_peak{0};
std::atomic<std::int64_t> g_budget{0};
}  // namespace

std::int64_t live_floats() { return g_live.load(); }
std::int64_t peak_live_floats() { return g_peak.load(); }
void reset_peak() { g_peak.store(g_live.load()); }
void set_budget(std::int64_t b) { g_budget.store(b); }
std::int64_t budget() { return g_budget.load(); }

MemoryBudgetExceeded::MemoryBudgetExceeded(std::int64_t requested, std::int64_t live,
                                           std::int64_t budget)
    : std::runtime_error("memory budget exceeded: live=" + std::to_string(live) +
                         " requested=" + std::to_string(requested) +
                         " budget=" + std::to_string(budget)) {}

void on_alloc(std::size_t n) {
  const std::int64_t b = g_budget.load();
  std::int64_t now = g_live.fetch_add(static_cast<std::int64_t>(n)) + static_cast<std::int64_t>(n);
  if (b > 0 && now > b) {
    g_live.fetch_sub(static_cast<std::int64_t>(n));
    throw MemoryBudgetExceeded(static_cast<std::int64_t>(n), now - static_cast<std::int64_t>(n), b);
  }
  std::int64_t peak = g_peak.load();
  while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
  }
}

void on_free(std::size_t n) { g_live.fetch_sub(static_cast<std::int64_t>(n)); }

}  // namespace meminstr

std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace kernels {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw ShapeError("matmul: operands must have >= 2 dims, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != sb.size())
    throw ShapeError("matmul: rank mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  for (std::size_t i = 0; i + 2 < sa.size(); ++i)
    if (sa[i] != sb[i])
      throw ShapeError("matmul: batch dims differ " + shape_str(sa) + " vs " + shape_str(sb));

  const std::size_t ra = sa[sa.size() - 2], ca = sa.back();
  const std::size_t rb = sb[sb.size() - 2], cb = sb.back();
  const std::size_t m = trans_a ? ca : ra;
  const std::size_t p = trans_a ? ra : ca;
  const std::size_t p2 = trans_b ? cb : rb;
  const std::size_t n = trans_b ? rb : cb;
  if (p != p2)
    throw ShapeError("matmul: inner extents differ, " + shape_str(sa) + (trans_a ? "^T" : "") +
                     " . " + shape_str(sb) + (trans_b ? "^T" : ""));

  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];

  std::vector<std::size_t> out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(std::move(out_shape));

  for (std::size_t bi = 0; bi < batch; ++bi) {
    ECMap<T> A(a.data() + bi * ra * ca, ra, ca);
    ECMap<T> B(b.data() + bi * rb * cb, rb, cb);
    EMap<T> C(out.data() + bi * m * n, m, n);
    if (!trans_a && !trans_b)
      C.noalias() = A * B;
    else if (trans_a && !trans_b)
      C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b)
      C.noalias() = A * B.transpose();
    else
      C.noalias() = A.transpose() * B.transpose();
  }
  return out;
}

template <typename T>
Tensor<T> softmax_masked(const Tensor<T>& logits, const std::vector<std::uint8_t>& mask,
                         std::size_t* dead_rows) {
  if (logits.ndim() == 0 || logits.size() == 0)
    throw ShapeError("softmax_masked: empty input");
  if (mask.size() == 0 || logits.size() % mask.size() != 0)
    throw ShapeError("softmax_masked: mask size " + std::to_string(mask.size()) +
                     " does not tile logits " + shape_str(logits.shape()));
  const std::size_t n = logits.cols();
  if (mask.size() % n != 0)
    throw ShapeError("softmax_masked: mask not aligned to row extent");

  Tensor<T> out(logits.shape());
  const std::size_t rows = logits.rows();
  const std::size_t mask_rows = mask.size() / n;
  std::size_t dead = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.data() + r * n;
    T* p = out.data() + r * n;
    const std::uint8_t* mrow = mask.data() + (r % mask_rows) * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (mrow[j] && z[j] > mx) mx = z[j];
    if (mx == -std::numeric_limits<T>::infinity()) {
      for (std::size_t j = 0; j < n; ++j) p[j] = T(0);
      ++dead;
      continue;
    }
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      p[j] = mrow[j] ? std::exp(z[j] - mx) : T(0);
      sum += p[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) p[j] *= inv;
  }
  if (dead_rows) *dead_rows = dead;
  return out;
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& scale, T eps) {
  const std::size_t d = x.cols();
  if (d == 0) throw ShapeError("rms_norm: empty rows");
  if (scale.size() != d)
    throw ShapeError("rms_norm: scale " + shape_str(scale.shape()) + " vs rows of " +
                     shape_str(x.shape()));
  Tensor<T> out(x.shape());
  const std::size_t rows = x.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    T* yr = out.data() + r * d;
    T ms = T(0);
    for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
    ms /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < d; ++j) yr[j] = scale[j] * xr[j] * inv;
  }
  return out;
}

template Tensor<double> matmul(const Tensor<double>&, const Tensor<double>&, bool, bool);
template Tensor<float> matmul(const Tensor<float>&, const Tensor<float>&, bool, bool);
template Tensor<double> softmax_masked(const Tensor<double>&, const std::vector<std::uint8_t>&,
                                       std::size_t*);
template Tensor<float> softmax_masked(const Tensor<float>&, const std::vector<std::uint8_t>&,
                                      std::size_t*);
template Tensor<double> rms_norm(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> rms_norm(const Tensor<float>&, const Tensor<float>&, float);

}  // namespace kernels

template class Tensor<double>;
template class Tensor<float>;

}  // namespace longenc
