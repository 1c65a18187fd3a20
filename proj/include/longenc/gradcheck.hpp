#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "longenc/tape.hpp"

namespace longenc {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool pass(double tol) const { return max_rel_err < tol; }
};

// Compares tape gradients against central finite differences
// (loss(p+eps) - loss(p-eps)) / 2 eps on a random subsample of at least
// `coords` coordinates per parameter (all of them for small parameters).
//
// `build` runs the forward pass on a fresh tape: it receives one leaf Var per
// parameter (same order as `params`) and returns the scalar loss Var.
template <typename T>
GradCheckReport grad_check(
    const std::function<typename Tape<T>::Var(Tape<T>&, const std::vector<typename Tape<T>::Var>&)>&
        build,
    std::vector<NamedTensor<T>>& params, double eps = 1e-5, std::size_t coords = 64,
    std::uint64_t seed = 0x5eed1234u) {
  using Var = typename Tape<T>::Var;

  auto eval_loss = [&](bool with_grads, std::vector<Tensor<T>>* grads_out) -> double {
    Tape<T> tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (auto& p : params) vars.push_back(tape.leaf(p.tensor, true));
    Var loss = build(tape, vars);
    const double lv = static_cast<double>(tape.value(loss)[0]);
    if (!std::isfinite(lv)) throw NumericError("grad_check: non-finite loss");
    if (with_grads) {
      tape.backward(loss);
      grads_out->clear();
      for (Var v : vars) grads_out->push_back(tape.grad(v));
    }
    return lv;
  };

  std::vector<Tensor<T>> grads;
  eval_loss(true, &grads);

  GradCheckReport report;
  std::mt19937_64 rng(seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& theta = params[pi].tensor;
    const std::size_t n = theta.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (n > coords) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(coords);
    }
    GradCheckEntry entry;
    entry.name = params[pi].name;
    entry.coords_checked = idx.size();
    for (std::size_t i : idx) {
      const T saved = theta[i];
      theta[i] = saved + static_cast<T>(eps);
      const double lp = eval_loss(false, nullptr);
      theta[i] = saved - static_cast<T>(eps);
      const double lm = eval_loss(false, nullptr);
      theta[i] = saved;
      const double fd = (lp - lm) / (2.0 * eps);
      const double an = static_cast<double>(grads[pi][i]);
      const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-6});
      const double rel = std::fabs(fd - an) / denom;
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace longenc
