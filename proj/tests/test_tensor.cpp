#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "longenc/tensor.hpp"

using namespace longenc;
using Tensord = Tensor<double>;

namespace {

// Plain triple-loop reference product, independent of the Eigen-backed path.
Tensord matmul_ref(const Tensord& a, const Tensord& b) {
  const std::size_t m = a.dim(0), p = a.dim(1), n = b.dim(1);
  Tensord c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < p; ++k)
      for (std::size_t j = 0; j < n; ++j) c.at(i, j) += a.at(i, k) * b.at(k, j);
  return c;
}

}  // namespace

TEST_CASE("matmul identity and hand case") {
  Tensord eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  std::mt19937_64 rng(7);
  Tensord b = Tensord::randn(rng, {3, 5});
  Tensord c = kernels::matmul(eye, b);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(b[i]).epsilon(1e-15));

  Tensord a({1, 2});
  a[0] = 1;
  a[1] = 2;
  Tensord b2({2, 1});
  b2[0] = 3;
  b2[1] = 4;
  Tensord c2 = kernels::matmul(a, b2);
  CHECK(c2.size() == 1);
  CHECK(c2[0] == 11.0);
}

TEST_CASE("matmul matches reference loops, all transpose cases") {
  std::mt19937_64 rng(11);
  Tensord a = Tensord::randn(rng, {5, 7});
  Tensord b = Tensord::randn(rng, {7, 3});
  Tensord c = kernels::matmul(a, b);
  Tensord ref = matmul_ref(a, b);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-12));

  // transpose flags against explicit transposition
  Tensord at({7, 5});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 7; ++j) at.at(j, i) = a.at(i, j);
  Tensord bt({3, 7});
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 3; ++j) bt.at(j, i) = b.at(i, j);
  Tensord c1 = kernels::matmul(at, b, true, false);
  Tensord c2 = kernels::matmul(a, bt, false, true);
  Tensord c3 = kernels::matmul(at, bt, true, true);
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(c1[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    CHECK(c2[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    CHECK(c3[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("matmul batched leading dims") {
  std::mt19937_64 rng(13);
  Tensord a = Tensord::randn(rng, {2, 4, 3});
  Tensord b = Tensord::randn(rng, {2, 3, 5});
  Tensord c = kernels::matmul(a, b);
  REQUIRE(c.shape() == std::vector<std::size_t>{2, 4, 5});
  for (std::size_t bi = 0; bi < 2; ++bi) {
    Tensord as({4, 3}), bs({3, 5});
    std::copy(a.data() + bi * 12, a.data() + (bi + 1) * 12, as.data());
    std::copy(b.data() + bi * 15, b.data() + (bi + 1) * 15, bs.data());
    Tensord ref = matmul_ref(as, bs);
    for (std::size_t i = 0; i < ref.size(); ++i)
      CHECK(c[bi * 20 + i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("matmul shape errors") {
  Tensord a({2, 3}), b({4, 2});
  CHECK_THROWS_AS((void)kernels::matmul(a, b), ShapeError);
}

TEST_CASE("softmax_masked basics") {
  Tensord z({1, 3});
  std::vector<std::uint8_t> mask(3, 1);
  std::size_t dead = 0;
  Tensord p = kernels::softmax_masked(z, mask, &dead);
  CHECK(dead == 0);
  for (int j = 0; j < 3; ++j) CHECK(p[j] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Tensord z2({1, 2});
  z2[0] = 5.0;
  z2[1] = -1e9;
  std::vector<std::uint8_t> m2{1, 0};
  Tensord p2 = kernels::softmax_masked(z2, m2, &dead);
  CHECK(p2[0] == 1.0);
  CHECK(p2[1] == 0.0);
}

TEST_CASE("softmax_masked dead row returns zeros and flags") {
  Tensord z({2, 3});
  z.fill(2.0);
  std::vector<std::uint8_t> mask(6, 0);
  mask[0] = mask[1] = mask[2] = 1;  // row 1 fully masked
  std::size_t dead = 0;
  Tensord p = kernels::softmax_masked(z, mask, &dead);
  CHECK(dead == 1);
  for (int j = 0; j < 3; ++j) CHECK(p[3 + j] == 0.0);
}

TEST_CASE("softmax_masked vs extended-precision oracle and row sums") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 12;
    Tensord z = Tensord::rand_uniform(rng, {1, n}, -30.0, 30.0);
    std::vector<std::uint8_t> mask(n);
    bool any = false;
    for (auto& m : mask) {
      m = rng() % 2;
      any |= (m != 0);
    }
    if (!any) mask[rng() % n] = 1;
    std::size_t dead = 0;
    Tensord p = kernels::softmax_masked(z, mask, &dead);
    CHECK(dead == 0);

    // long double exp/sum oracle
    long double sum = 0.0L;
    for (std::size_t j = 0; j < n; ++j)
      if (mask[j]) sum += std::exp(static_cast<long double>(z[j]));
    long double rowsum = 0.0L;
    for (std::size_t j = 0; j < n; ++j) {
      const long double want =
          mask[j] ? std::exp(static_cast<long double>(z[j])) / sum : 0.0L;
      CHECK(std::fabs(static_cast<double>(want) - p[j]) < 1e-12);
      rowsum += p[j];
    }
    CHECK(std::fabs(static_cast<double>(rowsum) - 1.0) < 1e-12);
  }
}

TEST_CASE("rms_norm zero input and unit rms") {
  Tensord x({2, 8});
  Tensord ones({8}, 1.0);
  Tensord y = kernels::rms_norm(x, ones);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0);

  std::mt19937_64 rng(31);
  Tensord x2 = Tensord::randn(rng, {4, 16});
  Tensord ones16({16}, 1.0);
  Tensord y2 = kernels::rms_norm(x2, ones16);
  for (std::size_t r = 0; r < 4; ++r) {
    double ms = 0;
    for (std::size_t j = 0; j < 16; ++j) ms += y2.at(r, j) * y2.at(r, j);
    ms /= 16.0;
    CHECK(std::sqrt(ms) == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("rms_norm vs direct formula oracle") {
  std::mt19937_64 rng(37);
  Tensord x = Tensord::randn(rng, {5, 9});
  Tensord s = Tensord::randn(rng, {9});
  Tensord y = kernels::rms_norm(x, s);
  for (std::size_t r = 0; r < 5; ++r) {
    double ms = 0;
    for (std::size_t j = 0; j < 9; ++j) ms += x.at(r, j) * x.at(r, j);
    ms = ms / 9.0 + 1e-6;
    for (std::size_t j = 0; j < 9; ++j) {
      const double want = s[j] * x.at(r, j) / std::sqrt(ms);
      CHECK(std::fabs(want - y.at(r, j)) < 1e-12);
    }
  }
}

TEST_CASE("rms_norm scale invariance") {
  std::mt19937_64 rng(41);
  Tensord x = Tensord::randn(rng, {3, 12});
  Tensord ones({12}, 1.0);
  Tensord y1 = kernels::rms_norm(x, ones);
  for (double c : {2.0, 10.0, 123.456}) {
    Tensord xc(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) xc[i] = x[i] * c;
    Tensord y2 = kernels::rms_norm(xc, ones);
    for (std::size_t i = 0; i < y1.size(); ++i) CHECK(std::fabs(y1[i] - y2[i]) < 1e-10);
  }
}

TEST_CASE("allocation instrumentation counts live tensor payloads") {
  meminstr::reset_peak();
  const auto base = meminstr::live_floats();
  {
    Tensord big({1000});
    CHECK(meminstr::live_floats() >= base + 1000);
    CHECK(meminstr::peak_live_floats() >= base + 1000);
  }
  CHECK(meminstr::live_floats() == base);
}

TEST_CASE("memory budget guard throws and unwinds cleanly") {
  const auto base = meminstr::live_floats();
  meminstr::set_budget(base + 500);
  CHECK_THROWS_AS(Tensord({1000}), meminstr::MemoryBudgetExceeded);
  meminstr::set_budget(0);
  CHECK(meminstr::live_floats() == base);
}
