#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>

#include "xmb/mat.hpp"
#include "xmb/tape.hpp"

namespace xmb {

// Builds a scalar loss on `tape` from the differentiable input `x`.
using LossBuilder = std::function<Var(Tape& tape, Var x)>;

struct FdResult {
  bool pass = false;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  Mat analytic;
  Mat numeric;
};

// Compares the tape gradient at `at` against central differences
// (f(x+h) − f(x−h)) / 2h, entrywise, using
// |a − n| / max(|a|, |n|, 1e-8). Never throws on a mismatch.
inline FdResult fd_check(const LossBuilder& build, const Mat& at, double h, double tol) {
  FdResult res;
  if (!(h > 0.0)) return res;
  {
    Tape tape;
    Var x = tape.leaf(at);
    Var loss = build(tape, x);
    tape.backward(loss);
    res.analytic = x.grad();
  }
  auto eval = [&](const Mat& point) {
    Tape tape;
    Var x = tape.leaf(point);
    return build(tape, x).value()[0];
  };
  res.numeric = Mat(at.rows, at.cols);
  Mat probe = at;
  for (std::size_t i = 0; i < at.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = eval(probe);
    probe[i] = orig - h;
    const double fm = eval(probe);
    probe[i] = orig;
    res.numeric[i] = (fp - fm) / (2.0 * h);
  }
  for (std::size_t i = 0; i < at.size(); ++i) {
    const double a = res.analytic[i], n = res.numeric[i];
    const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_index = i;
    }
  }
  res.pass = res.max_rel_err <= tol;
  return res;
}

}  // namespace xmb
