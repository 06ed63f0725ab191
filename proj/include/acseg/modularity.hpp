#pragma once

// Differentiable modularity objective over a per-image pixel affinity graph.
//
//   A(i,j) = max(0, cos<x_i, x_j>)          k_i = sum_j A(i,j)    2m = sum_ij A(i,j)
//   w(i,j) = A(i,j) - k_i k_j / 2m
//   delta(i,j) = max_c S+(i,c) S+(j,c),     S+ = max(0, S)
//   L = -(1 / 2m) sum_ij w(i,j) delta(i,j)
//
// The double sum runs over all ordered pairs including i == j unless the
// diagonal is explicitly excluded.

#include <cstdint>
#include <vector>

#include "acseg/assignment.hpp"
#include "acseg/autodiff.hpp"
#include "acseg/types.hpp"

namespace acseg {

template <typename Scalar>
struct AffinityGraph {
  Matrix<Scalar> weights;   // n x n, symmetric, in [0, 1]
  Vector<Scalar> degrees;   // row sums
  Scalar two_m = Scalar(0); // sum of all weights

  Index size() const { return weights.rows(); }
};

template <typename Derived>
AffinityGraph<typename Derived::Scalar> build_affinity(const Eigen::MatrixBase<Derived>& pixels) {
  using Scalar = typename Derived::Scalar;
  const Index n = pixels.rows();
  if (n < 2) throw std::invalid_argument("build_affinity: need at least 2 pixels, got " + std::to_string(n));
  const Matrix<Scalar> unit = normalize_rows(pixels);
  const Vector<Scalar> norms = pixels.rowwise().norm();
  const Matrix<Scalar> gram = unit * unit.transpose();
  AffinityGraph<Scalar> g;
  g.weights.resize(n, n);
  for (Index i = 0; i < n; ++i) {
    g.weights(i, i) = norms(i) >= static_cast<Scalar>(kCosineEps) ? Scalar(1) : Scalar(0);
    for (Index j = i + 1; j < n; ++j) {
      const Scalar a = std::clamp(gram(i, j), Scalar(0), Scalar(1));
      g.weights(i, j) = a;
      g.weights(j, i) = a;
    }
  }
  g.degrees = g.weights.rowwise().sum();
  g.two_m = g.degrees.sum();
  return g;
}

// w(i,j) = A(i,j) - k_i k_j / 2m.
template <typename Scalar>
Matrix<Scalar> modularity_weights(const AffinityGraph<Scalar>& g) {
  if (!(g.two_m > Scalar(0))) throw std::domain_error("modularity_weights: graph has zero total edge weight");
  return g.weights - (g.degrees * g.degrees.transpose()) / g.two_m;
}

// delta(i,j) = max_c S+(i,c) S+(j,c) for an already clamped S+. The maximizing
// prototype per pair is fixed during the backward pass, so the adjoint flows
// into both selected factors. Ties go to the lowest prototype index.
template <typename Derived>
Matrix<typename Derived::Scalar> pair_agreement(const Eigen::MatrixBase<Derived>& clamped,
                                                std::vector<std::int32_t>* selected = nullptr) {
  using Scalar = typename Derived::Scalar;
  const Index n = clamped.rows(), k = clamped.cols();
  if (k == 0) throw ShapeError("pair_agreement: zero prototypes");
  // Column-major copy of the transpose keeps each pixel's k values contiguous.
  const Matrix<Scalar> st = clamped.transpose();
  Matrix<Scalar> delta(n, n);
  if (selected) selected->assign(static_cast<std::size_t>(n * n), 0);
  for (Index j = 0; j < n; ++j) {
    const Scalar* sj = st.col(j).data();
    for (Index i = 0; i < n; ++i) {
      const Scalar* si = st.col(i).data();
      Scalar best = si[0] * sj[0];
      std::int32_t arg = 0;
      for (Index c = 1; c < k; ++c) {
        const Scalar v = si[c] * sj[c];
        if (v > best) {
          best = v;
          arg = static_cast<std::int32_t>(c);
        }
      }
      delta(i, j) = best;
      if (selected) (*selected)[static_cast<std::size_t>(j * n + i)] = arg;
    }
  }
  return delta;
}

template <typename Scalar>
Var<Scalar> pair_agreement(const Var<Scalar>& clamped) {
  std::vector<std::int32_t> selected;
  const bool track = clamped.requires_grad();
  Matrix<Scalar> delta = pair_agreement(clamped.value(), track ? &selected : nullptr);
  const int ia = clamped.id();
  return clamped.tape()->record(
      std::move(delta), {clamped},
      [ia, selected = std::move(selected)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        const auto& s = t.value(ia);
        const Index n = s.rows();
        Matrix<Scalar> gs = Matrix<Scalar>::Zero(n, s.cols());
        for (Index j = 0; j < n; ++j) {
          for (Index i = 0; i < n; ++i) {
            const Index c = selected[static_cast<std::size_t>(j * n + i)];
            const Scalar gij = g(i, j);
            gs(i, c) += gij * s(j, c);
            gs(j, c) += gij * s(i, c);
          }
        }
        t.accumulate(ia, gs);
      },
      "pair_agreement");
}

struct ModularityOptions {
  bool include_diagonal = true;
};

// Pair weights (w / 2m) that enter the loss as constants.
template <typename Scalar>
Matrix<Scalar> loss_coefficients(const AffinityGraph<Scalar>& g, const ModularityOptions& opt = {}) {
  Matrix<Scalar> w = modularity_weights(g) / g.two_m;
  if (!opt.include_diagonal) w.diagonal().setZero();
  return w;
}

// Differentiable per-image loss given the soft assignment S (n x k).
template <typename Scalar>
Var<Scalar> modularity_loss(const AffinityGraph<Scalar>& g, const Var<Scalar>& soft,
                            const ModularityOptions& opt = {}) {
  if (soft.rows() != g.size()) {
    throw ShapeError("modularity_loss: assignment has " + std::to_string(soft.rows()) + " rows, graph has " +
                     std::to_string(g.size()) + " vertices");
  }
  Tape<Scalar>& tape = *soft.tape();
  const Var<Scalar> coeff = tape.constant(loss_coefficients(g, opt));
  return scale(sum(mul(coeff, pair_agreement(relu(soft)))), Scalar(-1));
}

// Plain evaluation of the same objective.
template <typename Scalar, typename Derived>
Scalar modularity_loss(const AffinityGraph<Scalar>& g, const Eigen::MatrixBase<Derived>& soft,
                       const ModularityOptions& opt = {}) {
  const Matrix<Scalar> delta = pair_agreement(soft.cwiseMax(Scalar(0)).eval());
  return -loss_coefficients(g, opt).cwiseProduct(delta).sum();
}

// Newman modularity Q of a hard partition, for reporting.
template <typename Scalar>
Scalar hard_modularity(const AffinityGraph<Scalar>& g, const Labels& labels) {
  const Matrix<Scalar> w = modularity_weights(g);
  Scalar q = 0;
  const Index n = g.size();
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) q += w(i, j);
    }
  }
  return q / g.two_m;
}

}  // namespace acseg
