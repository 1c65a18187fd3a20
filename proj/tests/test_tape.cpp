#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <memory>
#include <random>

#include "longenc/gradcheck.hpp"
#include "longenc/tape.hpp"

using namespace longenc;
using Taped = Tape<double>;
using Var = Taped::Var;
using Tensord = Tensor<double>;

TEST_CASE("quadratic loss has exact gradient 2*theta") {
  std::mt19937_64 rng(3);
  std::vector<NamedTensor<double>> params;
  params.push_back({"theta", Tensord::randn(rng, {4, 4})});
  auto build = [](Taped& t, const std::vector<Var>& vs) { return t.sum_all(t.mul(vs[0], vs[0])); };
  Tape<double> tape;
  Var v = tape.leaf(params[0].tensor, true);
  Var loss = build(tape, {v});
  tape.backward(loss);
  for (std::size_t i = 0; i < params[0].tensor.size(); ++i)
    CHECK(tape.grad(v)[i] == doctest::Approx(2.0 * params[0].tensor[i]).epsilon(1e-14));

  GradCheckReport rep = grad_check<double>(build, params);
  CHECK(rep.max_rel_err < 1e-9);
}

TEST_CASE("matmul gradients vs finite differences") {
  std::mt19937_64 rng(5);
  std::vector<NamedTensor<double>> params;
  params.push_back({"a", Tensord::randn(rng, {5, 7})});
  params.push_back({"b", Tensord::randn(rng, {7, 3})});
  auto build = [](Taped& t, const std::vector<Var>& vs) {
    Var c = t.matmul(vs[0], vs[1]);
    return t.sum_all(t.mul(c, c));
  };
  GradCheckReport rep = grad_check<double>(build, params, 1e-5, 64, 99);
  CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("matmul transpose-flag gradients") {
  std::mt19937_64 rng(6);
  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb) {
      std::vector<NamedTensor<double>> params;
      params.push_back({"a", Tensord::randn(rng, ta ? std::vector<std::size_t>{4, 3}
                                                    : std::vector<std::size_t>{3, 4})});
      params.push_back({"b", Tensord::randn(rng, tb ? std::vector<std::size_t>{5, 4}
                                                    : std::vector<std::size_t>{4, 5})});
      auto build = [ta, tb](Taped& t, const std::vector<Var>& vs) {
        Var c = t.matmul(vs[0], vs[1], ta != 0, tb != 0);
        return t.sum_all(t.mul(c, c));
      };
      GradCheckReport rep = grad_check<double>(build, params, 1e-5, 64, 101 + ta * 2 + tb);
      CHECK(rep.max_rel_err < 1e-7);
    }
}

TEST_CASE("per-op gradients match central differences across seeds") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(seed);

    // rms_norm
    {
      std::vector<NamedTensor<double>> params;
      params.push_back({"x", Tensord::randn(rng, {3, 8})});
      params.push_back({"s", Tensord::randn(rng, {8})});
      auto build = [](Taped& t, const std::vector<Var>& vs) {
        return t.sum_all(t.mul(t.rms_norm(vs[0], vs[1]), vs[0]));
      };
      CHECK(grad_check<double>(build, params, 1e-5, 64, seed).max_rel_err < 1e-5);
    }
    // softmax_masked
    {
      std::vector<NamedTensor<double>> params;
      params.push_back({"z", Tensord::randn(rng, {4, 6})});
      auto mask = std::make_shared<std::vector<std::uint8_t>>(24);
      for (std::size_t r = 0; r < 4; ++r) {
        bool any = false;
        for (std::size_t j = 0; j < 6; ++j) {
          (*mask)[r * 6 + j] = rng() % 2;
          any |= (*mask)[r * 6 + j] != 0;
        }
        if (!any) (*mask)[r * 6 + rng() % 6] = 1;
      }
      std::mt19937_64 wrng(seed * 7 + 1);
      auto weights = std::make_shared<Tensord>(Tensord::randn(wrng, {4, 6}));
      auto build = [mask, weights](Taped& t, const std::vector<Var>& vs) {
        Var p = t.softmax_masked(vs[0], mask);
        Var w = t.constant(*weights);
        return t.sum_all(t.mul(p, w));
      };
      CHECK(grad_check<double>(build, params, 1e-5, 64, seed).max_rel_err < 1e-5);
    }
    // relu, add, scale chain
    {
      std::vector<NamedTensor<double>> params;
      params.push_back({"x", Tensord::randn(rng, {5, 5})});
      params.push_back({"y", Tensord::randn(rng, {5, 5})});
      auto build = [](Taped& t, const std::vector<Var>& vs) {
        Var z = t.relu(t.add(t.scale(vs[0], 1.7), vs[1]));
        return t.sum_all(t.mul(z, z));
      };
      CHECK(grad_check<double>(build, params, 1e-5, 64, seed).max_rel_err < 1e-5);
    }
    // gather_rows + block_sum + split/merge heads
    {
      std::vector<NamedTensor<double>> params;
      params.push_back({"emb", Tensord::randn(rng, {10, 8})});
      auto ids = std::make_shared<std::vector<std::int64_t>>(
          std::vector<std::int64_t>{0, 3, 3, 9, -1, 2});
      auto build = [ids](Taped& t, const std::vector<Var>& vs) {
        Var x = t.gather_rows(vs[0], ids);
        Var h = t.split_heads(x, 2);
        Var m = t.merge_heads(h);
        Var b = t.block_sum(m, 4);
        return t.sum_all(t.mul(b, b));
      };
      CHECK(grad_check<double>(build, params, 1e-5, 80, seed).max_rel_err < 1e-5);
    }
    // add_rel_bias
    {
      std::vector<NamedTensor<double>> params;
      params.push_back({"x", Tensord::randn(rng, {2, 3, 4})});
      params.push_back({"tab", Tensord::randn(rng, {2, 5})});
      auto bucket = std::make_shared<std::vector<std::int32_t>>(12);
      for (auto& v : *bucket) v = static_cast<std::int32_t>(rng() % 5);
      auto build = [bucket](Taped& t, const std::vector<Var>& vs) {
        Var z = t.add_rel_bias(vs[0], vs[1], bucket);
        return t.sum_all(t.mul(z, z));
      };
      CHECK(grad_check<double>(build, params, 1e-5, 64, seed).max_rel_err < 1e-5);
    }
  }
}

TEST_CASE("cross_entropy examples") {
  // uniform logits, V=4 -> ln 4
  {
    Tape<double> t;
    Var z = t.leaf(Tensord({3, 4}), true);
    auto targets = std::make_shared<std::vector<std::int32_t>>(std::vector<std::int32_t>{1, 2, 0});
    Var loss = t.cross_entropy(z, targets, 0 - 1);  // pad id -1: nothing is pad
    CHECK(t.value(loss)[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  // one-hot peaked logits -> loss -> 0
  {
    Tape<double> t;
    Tensord z({2, 5});
    z.fill(-50.0);
    z.at(0, 3) = 50.0;
    z.at(1, 1) = 50.0;
    auto targets = std::make_shared<std::vector<std::int32_t>>(std::vector<std::int32_t>{3, 1});
    Var loss = t.cross_entropy(t.leaf(z, false), targets, -1);
    CHECK(t.value(loss)[0] < 1e-12);
  }
  // all-pad -> error
  {
    Tape<double> t;
    Var z = t.leaf(Tensord({2, 4}), true);
    auto targets = std::make_shared<std::vector<std::int32_t>>(std::vector<std::int32_t>{0, 0});
    CHECK_THROWS_AS((void)t.cross_entropy(z, targets, 0), NumericError);
  }
}

TEST_CASE("cross_entropy vs direct log-softmax oracle") {
  std::mt19937_64 rng(77);
  Tensord z = Tensord::randn(rng, {6, 9});
  auto targets = std::make_shared<std::vector<std::int32_t>>(6);
  for (auto& t : *targets) t = static_cast<std::int32_t>(rng() % 9);
  (*targets)[2] = 0;  // one pad position
  Tape<double> t;
  Var loss = t.cross_entropy(t.leaf(z, false), targets, 0);

  long double want = 0.0L;
  std::size_t live = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    if ((*targets)[i] == 0) continue;
    long double sum = 0.0L;
    for (std::size_t j = 0; j < 9; ++j) sum += std::exp(static_cast<long double>(z.at(i, j)));
    want += std::log(sum) - static_cast<long double>(z.at(i, (*targets)[i]));
    ++live;
  }
  want /= static_cast<long double>(live);
  CHECK(std::fabs(static_cast<double>(want) - t.value(loss)[0]) < 1e-10);
}

TEST_CASE("single dense layer + cross_entropy gradcheck") {
  std::mt19937_64 rng(123);
  std::vector<NamedTensor<double>> params;
  params.push_back({"emb", Tensord::randn(rng, {12, 6})});
  params.push_back({"w", Tensord::randn(rng, {6, 12}, 0.5)});
  auto ids = std::make_shared<std::vector<std::int64_t>>(std::vector<std::int64_t>{1, 4, 7, 11});
  auto targets =
      std::make_shared<std::vector<std::int32_t>>(std::vector<std::int32_t>{2, 0, 5, 9});
  auto build = [ids, targets](Taped& t, const std::vector<Var>& vs) {
    Var x = t.gather_rows(vs[0], ids);
    Var logits = t.matmul(x, vs[1]);
    return t.cross_entropy(logits, targets, 0);
  };
  GradCheckReport rep = grad_check<double>(build, params, 1e-5, 64, 321);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("unused registered parameter still yields a zero gradient") {
  std::mt19937_64 rng(9);
  Tape<double> t;
  Var used = t.leaf(Tensord::randn(rng, {2, 2}), true);
  Var unused = t.leaf(Tensord::randn(rng, {3}), true);
  Var loss = t.sum_all(t.mul(used, used));
  t.backward(loss);
  CHECK(t.grad(unused).size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(t.grad(unused)[i] == 0.0);
}

TEST_CASE("backward on non-finite loss throws") {
  Tape<double> t;
  Tensord bad({1});
  bad[0] = std::numeric_limits<double>::quiet_NaN();
  Var v = t.leaf(bad, true);
  CHECK_THROWS_AS(t.backward(v), NumericError);
}

TEST_CASE("dropout: disabled at rate 0, inverted scaling, gradient path") {
  std::mt19937_64 rng(15);
  Tape<double> t;
  Tensord x = Tensord::randn(rng, {4, 4});
  Var v = t.leaf(x, true);
  std::mt19937_64 drng(42);
  Var same = t.dropout(v, 0.0, drng);
  CHECK(same.id == v.id);

  Var dropped = t.dropout(v, 0.5, drng);
  const Tensord dv = t.value(dropped);  // copy: backward releases intermediates
  std::size_t kept_count = 0;
  for (std::size_t i = 0; i < dv.size(); ++i) {
    if (dv[i] != 0.0) {
      CHECK(dv[i] == doctest::Approx(2.0 * x[i]).epsilon(1e-12));
      ++kept_count;
    }
  }
  CHECK(kept_count > 0);
  Var loss = t.sum_all(dropped);
  t.backward(loss);
  for (std::size_t i = 0; i < dv.size(); ++i) {
    const double g = t.grad(v)[i];
    CHECK((g == 0.0 || g == doctest::Approx(2.0).epsilon(1e-12)));
  }
}
