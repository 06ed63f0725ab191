#pragma once

#include <algorithm>
#include <set>
#include <vector>

#include "acseg/autodiff.hpp"
#include "acseg/types.hpp"

namespace acseg {

inline constexpr double kCosineEps = 1e-12;

template <typename Scalar>
struct AssignmentMatrix {
  Matrix<Scalar> soft;           // n x k cosine similarities
  Labels hard;                   // per-pixel concept index
  std::vector<int> active;       // sorted concept indices that own >= 1 pixel
  GridSize grid;                 // grid the assignment lives on

  int region_count() const { return static_cast<int>(active.size()); }
};

// Row-normalized copy; rows with norm below the epsilon guard are counted in
// `zero_rows` and divided by the guard instead.
template <typename Derived>
Matrix<typename Derived::Scalar> normalize_rows(const Eigen::MatrixBase<Derived>& m, int* zero_rows = nullptr) {
  using Scalar = typename Derived::Scalar;
  const auto eps = static_cast<Scalar>(kCosineEps);
  Vector<Scalar> norms = m.rowwise().norm();
  if (zero_rows) *zero_rows = static_cast<int>((norms.array() < eps).count());
  return norms.cwiseMax(eps).cwiseInverse().asDiagonal() * m;
}

// S(i, j) = cos<x_i, c_j>.
template <typename DX, typename DC>
Matrix<typename DX::Scalar> soft_assign(const Eigen::MatrixBase<DX>& pixels, const Eigen::MatrixBase<DC>& concepts,
                                        int* zero_rows = nullptr) {
  if (pixels.cols() != concepts.cols()) {
    throw ShapeError("soft_assign: " + shape_string(pixels.rows(), pixels.cols()) + " vs " +
                     shape_string(concepts.rows(), concepts.cols()));
  }
  int zx = 0, zc = 0;
  auto s = (normalize_rows(pixels, &zx) * normalize_rows(concepts, &zc).transpose()).eval();
  if (zero_rows) *zero_rows = zx + zc;
  using Scalar = typename DX::Scalar;
  return s.cwiseMax(Scalar(-1)).cwiseMin(Scalar(1));
}

// Differentiable form; `unit_pixels` are already row-normalized.
template <typename Scalar>
Var<Scalar> soft_assign(const Var<Scalar>& unit_pixels, const Var<Scalar>& concepts) {
  return matmul(unit_pixels, transpose(row_l2_normalize(concepts, static_cast<Scalar>(kCosineEps))));
}

// Per-row argmax; lowest concept index wins ties.
template <typename Derived>
Labels argmax_rows(const Eigen::MatrixBase<Derived>& s) {
  if (s.cols() == 0) throw ShapeError("argmax_rows: zero columns");
  Labels out(static_cast<std::size_t>(s.rows()));
  for (Index r = 0; r < s.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < s.cols(); ++c) {
      if (s(r, c) > s(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

inline std::vector<int> active_labels(const Labels& labels) {
  std::set<int> seen(labels.begin(), labels.end());
  return {seen.begin(), seen.end()};
}

template <typename Derived>
AssignmentMatrix<typename Derived::Scalar> hard_assign(const Eigen::MatrixBase<Derived>& soft, GridSize grid = {}) {
  AssignmentMatrix<typename Derived::Scalar> a;
  a.soft = soft;
  a.hard = argmax_rows(soft);
  a.active = active_labels(a.hard);
  a.grid = grid.count() > 0 ? grid : GridSize{static_cast<int>(soft.rows()), 1};
  return a;
}

// Bilinear (half-pixel convention) channelwise upsampling of a soft
// assignment from the feature grid to the target resolution.
template <typename Derived>
Matrix<typename Derived::Scalar> upsample_soft(const Eigen::MatrixBase<Derived>& soft, GridSize from, GridSize to) {
  if (to.height < from.height || to.width < from.width || to.height <= 0 || to.width <= 0) {
    throw std::invalid_argument("upsample_soft: target " + std::to_string(to.height) + "x" +
                                std::to_string(to.width) + " smaller than source " + std::to_string(from.height) +
                                "x" + std::to_string(from.width));
  }
  if (from == to) return soft;
  return bilinear_resize(soft, from, to);
}

// Restores the soft assignment to `target` resolution and takes the argmax
// there. An empty target keeps the feature grid.
template <typename Derived>
AssignmentMatrix<typename Derived::Scalar> assign_at_resolution(const Eigen::MatrixBase<Derived>& soft, GridSize grid,
                                                                GridSize target) {
  if (target.count() == 0 || target == grid) return hard_assign(soft, grid);
  return hard_assign(upsample_soft(soft, grid, target), target);
}

}  // namespace acseg
