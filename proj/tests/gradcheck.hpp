#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "acseg/autodiff.hpp"

namespace acseg::testing {

inline Matrix<double> random_matrix(Index rows, Index cols, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> g(0.0, stddev);
  Matrix<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

inline Matrix<double> uniform_matrix(Index rows, Index cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradientPair {
  std::vector<Matrix<double>> analytic, numeric;
};

// Reverse-mode gradients next to central-difference estimates.
inline GradientPair gradient_pair(const ScalarFn& f, std::vector<Matrix<double>> inputs, double h = 1e-5) {
  GradientPair out;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& m : inputs) vars.push_back(tape.leaf(m));
    tape.backward(f(tape, vars));
    for (const auto& v : vars) out.analytic.push_back(v.grad());
  }
  auto eval = [&] {
    Tape<double> tape(false);
    std::vector<Var<double>> vars;
    for (const auto& m : inputs) vars.push_back(tape.leaf(m));
    return f(tape, vars).value()(0, 0);
  };
  for (auto& input : inputs) {
    Matrix<double> numeric(input.rows(), input.cols());
    for (Index i = 0; i < input.size(); ++i) {
      double& x = input.data()[i];
      const double keep = x;
      x = keep + h;
      const double up = eval();
      x = keep - h;
      const double down = eval();
      x = keep;
      numeric.data()[i] = (up - down) / (2.0 * h);
    }
    out.numeric.push_back(numeric);
  }
  return out;
}

// Largest relative error, per input, in the Frobenius norm:
// |a - n| / max(|a|, |n|).
inline double gradient_error(const ScalarFn& f, std::vector<Matrix<double>> inputs, double h = 1e-5) {
  const auto g = gradient_pair(f, std::move(inputs), h);
  double worst = 0.0;
  for (std::size_t k = 0; k < g.analytic.size(); ++k) {
    const double scale = std::max({g.analytic[k].norm(), g.numeric[k].norm(), 1e-300});
    worst = std::max(worst, (g.analytic[k] - g.numeric[k]).norm() / scale);
  }
  return worst;
}

// Largest entrywise |a - n| / max(|a|, |n|); entries where both sides are
// below `floor` are compared against the floor instead.
inline double max_entry_error(const GradientPair& g, double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t k = 0; k < g.analytic.size(); ++k) {
    for (Index i = 0; i < g.analytic[k].size(); ++i) {
      const double a = g.analytic[k].data()[i], n = g.numeric[k].data()[i];
      worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
    }
  }
  return worst;
}

}  // namespace acseg::testing
