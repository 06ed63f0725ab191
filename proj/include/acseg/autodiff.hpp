#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape records every primitive applied to its variables in execution order,
// which is already a topological order, so backward() is a single reverse
// sweep. Tapes are single-threaded; use one tape per image.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "acseg/types.hpp"

namespace acseg {

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  using Mat = Matrix<Scalar>;

  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  const Mat& value() const { return tape_->value(id_); }
  const Mat& grad() const { return tape_->grad(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  Tape<Scalar>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&, const Mat& upstream)>;

  explicit Tape(bool tracking = true) : tracking_(tracking) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool tracking() const { return tracking_; }
  std::size_t size() const { return nodes_.size(); }

  Var<Scalar> leaf(Mat value, bool requires_grad = true) {
    check_finite(value, "leaf");
    nodes_.push_back(Node{std::move(value), Mat(), tracking_ && requires_grad, false, {}});
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var<Scalar> constant(Mat value) { return leaf(std::move(value), false); }

  // Leaf that reads `value` in place; it must outlive the tape.
  Var<Scalar> leaf_ref(const Mat& value, bool requires_grad = true) {
    check_finite(value, "leaf");
    nodes_.push_back(Node{Mat(), Mat(), tracking_ && requires_grad, false, {}, &value});
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  // Registers the result of a primitive. `fn` receives this node's adjoint and
  // must accumulate into the inputs that require gradients.
  Var<Scalar> record(Mat value, std::initializer_list<Var<Scalar>> inputs, BackwardFn fn,
                     const char* op) {
    check_finite(value, op);
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.tape() != this) throw std::invalid_argument(std::string(op) + ": operand from another tape");
      needs = needs || requires_grad(in.id());
    }
    needs = needs && tracking_;
    nodes_.push_back(Node{std::move(value), Mat(), needs, false, needs ? std::move(fn) : BackwardFn{}});
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Mat& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).get(); }

  const Mat& grad(int id) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (!n.has_grad) {
      n.grad = Mat::Zero(n.get().rows(), n.get().cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  void backward(const Var<Scalar>& loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
    const Mat& v = value(loss.id());
    if (v.rows() != 1 || v.cols() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + shape_string(v.rows(), v.cols()));
    }
    if (!requires_grad(loss.id())) {
      throw std::logic_error("backward: loss is detached from every tracked leaf");
    }
    accumulate(loss.id(), Mat::Ones(1, 1));
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || !n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad.resize(0, 0);
    }
  }

 private:
  struct Node {
    Mat value;
    mutable Mat grad;
    bool requires_grad = false;
    mutable bool has_grad = false;
    BackwardFn backward;
    const Mat* external = nullptr;

    const Mat& get() const { return external ? *external : value; }
  };

  static void check_finite(const Mat& m, const char* op) {
    if (!m.allFinite()) throw NonFiniteError(std::string(op) + ": non-finite output");
  }

  bool tracking_;
  // deque keeps references to earlier nodes stable while the tape grows.
  std::deque<Node> nodes_;
};

namespace detail {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": " + shape_string(a.rows(), a.cols()) + " vs " +
                     shape_string(b.rows(), b.cols()));
  }
}

template <typename Scalar>
void require_row_vector(const Var<Scalar>& a, const Var<Scalar>& row, const char* op) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError(std::string(op) + ": expected [1x" + std::to_string(a.cols()) + "] got " +
                     shape_string(row.rows(), row.cols()));
  }
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_string(a.rows(), a.cols()) + " * " + shape_string(b.rows(), b.cols()));
  }
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() * b.value(), {a, b},
                          [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
                            if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
                          },
                          "matmul");
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  const int ia = a.id();
  return a.tape()->record(a.value().transpose(), {a},
                          [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(ia, g.transpose()); },
                          "transpose");
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() + b.value(), {a, b},
                          [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            t.accumulate(ia, g);
                            t.accumulate(ib, g);
                          },
                          "add");
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() - b.value(), {a, b},
                          [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            t.accumulate(ia, g);
                            t.accumulate(ib, -g);
                          },
                          "sub");
}

// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b},
                          [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                            if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                          },
                          "mul");
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  const int ia = a.id();
  return a.tape()->record(a.value() * s, {a},
                          [ia, s](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(ia, g * s); },
                          "scale");
}

// Clamp at zero.
template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  const int ia = a.id();
  return a.tape()->record(a.value().cwiseMax(Scalar(0)), {a},
                          [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            const auto& x = t.value(ia);
                            t.accumulate(ia, (x.array() > Scalar(0)).select(g, Scalar(0)));
                          },
                          "relu");
}

// a + row, with `row` (1 x cols) broadcast down every row.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& row) {
  detail::require_row_vector(a, row, "add_row");
  const int ia = a.id(), ir = row.id();
  Matrix<Scalar> out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {a, row},
                          [ia, ir](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            t.accumulate(ia, g);
                            if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
                          },
                          "add_row");
}

// a .* row, with `row` (1 x cols) broadcast down every row.
template <typename Scalar>
Var<Scalar> mul_row(const Var<Scalar>& a, const Var<Scalar>& row) {
  detail::require_row_vector(a, row, "mul_row");
  const int ia = a.id(), ir = row.id();
  Matrix<Scalar> out = a.value().array().rowwise() * row.value().row(0).array();
  return a.tape()->record(std::move(out), {a, row},
                          [ia, ir](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            const auto& x = t.value(ia);
                            const auto& r = t.value(ir);
                            if (t.requires_grad(ia)) {
                              Matrix<Scalar> ga = g.array().rowwise() * r.row(0).array();
                              t.accumulate(ia, ga);
                            }
                            if (t.requires_grad(ir)) t.accumulate(ir, g.cwiseProduct(x).colwise().sum());
                          },
                          "mul_row");
}

template <typename Scalar>
Var<Scalar> row_softmax(const Var<Scalar>& a) {
  const auto& x = a.value();
  Matrix<Scalar> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  const int ia = a.id();
  Matrix<Scalar> yc = a.requires_grad() ? y : Matrix<Scalar>();
  return a.tape()->record(std::move(y), {a},
                          [ia, s = std::move(yc)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            Vector<Scalar> dots = g.cwiseProduct(s).rowwise().sum();
                            Matrix<Scalar> ga = s.array() * (g.colwise() - dots).array();
                            t.accumulate(ia, ga);
                          },
                          "row_softmax");
}

// Row-wise normalization to zero mean and unit variance, no affine part.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& a, Scalar eps = Scalar(1e-5)) {
  const auto& x = a.value();
  const Index c = x.cols();
  Matrix<Scalar> y(x.rows(), c);
  Vector<Scalar> inv_std(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mu = x.row(r).mean();
    const auto centered = (x.row(r).array() - mu).matrix();
    const Scalar var = centered.squaredNorm() / Scalar(c);
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    y.row(r) = centered * inv_std(r);
  }
  const int ia = a.id();
  Matrix<Scalar> yc = a.requires_grad() ? y : Matrix<Scalar>();
  return a.tape()->record(std::move(y), {a},
                          [ia, yc = std::move(yc), inv_std = std::move(inv_std)](Tape<Scalar>& t,
                                                                               const Matrix<Scalar>& g) {
                            const Index cols = g.cols();
                            Matrix<Scalar> ga(g.rows(), cols);
                            for (Index r = 0; r < g.rows(); ++r) {
                              const Scalar gmean = g.row(r).sum() / Scalar(cols);
                              const Scalar gy = g.row(r).dot(yc.row(r)) / Scalar(cols);
                              ga.row(r) = inv_std(r) * (g.row(r).array() - gmean - yc.row(r).array() * gy).matrix();
                            }
                            t.accumulate(ia, ga);
                          },
                          "layer_norm");
}

// Each row divided by max(|row|, eps).
template <typename Scalar>
Var<Scalar> row_l2_normalize(const Var<Scalar>& a, Scalar eps = Scalar(1e-12)) {
  const auto& x = a.value();
  Vector<Scalar> norms = x.rowwise().norm().cwiseMax(eps);
  Matrix<Scalar> y = norms.cwiseInverse().asDiagonal() * x;
  const int ia = a.id();
  Matrix<Scalar> yc = a.requires_grad() ? y : Matrix<Scalar>();
  return a.tape()->record(std::move(y), {a},
                          [ia, eps, yc = std::move(yc), norms = std::move(norms)](Tape<Scalar>& t,
                                                                                const Matrix<Scalar>& g) {
                            Matrix<Scalar> ga(g.rows(), g.cols());
                            for (Index r = 0; r < g.rows(); ++r) {
                              if (norms(r) > eps) {
                                ga.row(r) = (g.row(r) - yc.row(r) * g.row(r).dot(yc.row(r))) / norms(r);
                              } else {
                                ga.row(r) = g.row(r) / eps;
                              }
                            }
                            t.accumulate(ia, ga);
                          },
                          "row_l2_normalize");
}

template <typename Scalar>
struct RowMax {
  Var<Scalar> values;         // rows x 1
  std::vector<Index> argmax;  // lowest index wins ties
};

template <typename Scalar>
RowMax<Scalar> row_max(const Var<Scalar>& a) {
  const auto& x = a.value();
  if (x.cols() == 0) throw ShapeError("row_max: zero columns");
  Matrix<Scalar> m(x.rows(), 1);
  std::vector<Index> arg(static_cast<std::size_t>(x.rows()));
  for (Index r = 0; r < x.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < x.cols(); ++c) {
      if (x(r, c) > x(r, best)) best = c;
    }
    arg[static_cast<std::size_t>(r)] = best;
    m(r, 0) = x(r, best);
  }
  const int ia = a.id();
  const Index cols = x.cols();
  Var<Scalar> out = a.tape()->record(std::move(m), {a},
                                     [ia, arg, cols](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                                       Matrix<Scalar> ga = Matrix<Scalar>::Zero(g.rows(), cols);
                                       for (Index r = 0; r < g.rows(); ++r) ga(r, arg[static_cast<std::size_t>(r)]) = g(r, 0);
                                       t.accumulate(ia, ga);
                                     },
                                     "row_max");
  return {out, std::move(arg)};
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  Matrix<Scalar> s(1, 1);
  s(0, 0) = a.value().sum();
  return a.tape()->record(std::move(s), {a},
                          [ia, r, c](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            t.accumulate(ia, Matrix<Scalar>::Constant(r, c, g(0, 0)));
                          },
                          "sum");
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  const Index count = a.rows() * a.cols();
  if (count == 0) throw ShapeError("mean: empty operand");
  return scale(sum(a), Scalar(1) / Scalar(count));
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_string(a.rows(), a.cols()));
  }
  const int ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  return a.tape()->record(a.value().middleCols(start, count), {a},
                          [ia, rows, cols, start, count](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            Matrix<Scalar> ga = Matrix<Scalar>::Zero(rows, cols);
                            ga.middleCols(start, count) = g;
                            t.accumulate(ia, ga);
                          },
                          "slice_cols");
}

// Horizontal concatenation. Implemented as a chain of pairwise joins so that
// every node keeps a fixed operand list.
template <typename Scalar>
Var<Scalar> hcat(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("hcat: " + shape_string(a.rows(), a.cols()) + " | " + shape_string(b.rows(), b.cols()));
  }
  Matrix<Scalar> out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const int ia = a.id(), ib = b.id();
  const Index ca = a.cols(), cb = b.cols();
  return a.tape()->record(std::move(out), {a, b},
                          [ia, ib, ca, cb](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            t.accumulate(ia, g.leftCols(ca));
                            t.accumulate(ib, g.rightCols(cb));
                          },
                          "hcat");
}

template <typename Scalar>
Var<Scalar> hcat(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("hcat: no operands");
  Var<Scalar> out = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out = hcat(out, parts[i]);
  return out;
}

// Source sampling for one output coordinate under the half-pixel
// (align_corners = false) convention:
//   src = (dst + 0.5) * in / out - 0.5, clamped to [0, in - 1]
//   lo = floor(src), hi = min(lo + 1, in - 1), frac = src - lo
struct BilinearTap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;
};

inline std::vector<BilinearTap> bilinear_taps(int in, int out) {
  std::vector<BilinearTap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    taps[static_cast<std::size_t>(o)] = {lo, std::min(lo + 1, in - 1), src - lo};
  }
  return taps;
}

// Resamples a (from.count() x channels) grid to (to.count() x channels),
// channelwise.
template <typename Derived>
Matrix<typename Derived::Scalar> bilinear_resize(const Eigen::MatrixBase<Derived>& src, GridSize from, GridSize to) {
  using Scalar = typename Derived::Scalar;
  if (src.rows() != from.count() || from.count() <= 0 || to.count() <= 0) {
    throw ShapeError("bilinear_resize: " + std::to_string(src.rows()) + " rows for grid " +
                     std::to_string(from.height) + "x" + std::to_string(from.width));
  }
  const auto ty = bilinear_taps(from.height, to.height);
  const auto tx = bilinear_taps(from.width, to.width);
  Matrix<Scalar> out(to.count(), src.cols());
  for (int y = 0; y < to.height; ++y) {
    const auto& vy = ty[static_cast<std::size_t>(y)];
    for (int x = 0; x < to.width; ++x) {
      const auto& vx = tx[static_cast<std::size_t>(x)];
      const Scalar fy = static_cast<Scalar>(vy.frac), fx = static_cast<Scalar>(vx.frac);
      const auto p00 = src.row(vy.lo * from.width + vx.lo);
      const auto p01 = src.row(vy.lo * from.width + vx.hi);
      const auto p10 = src.row(vy.hi * from.width + vx.lo);
      const auto p11 = src.row(vy.hi * from.width + vx.hi);
      out.row(y * to.width + x) = (Scalar(1) - fy) * ((Scalar(1) - fx) * p00 + fx * p01) +
                                  fy * ((Scalar(1) - fx) * p10 + fx * p11);
    }
  }
  return out;
}

template <typename Scalar>
Var<Scalar> bilinear_resize(const Var<Scalar>& a, GridSize from, GridSize to) {
  Matrix<Scalar> out = bilinear_resize(a.value(), from, to);
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a},
                          [ia, from, to](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            const auto ty = bilinear_taps(from.height, to.height);
                            const auto tx = bilinear_taps(from.width, to.width);
                            Matrix<Scalar> ga = Matrix<Scalar>::Zero(from.count(), g.cols());
                            for (int y = 0; y < to.height; ++y) {
                              const auto& vy = ty[static_cast<std::size_t>(y)];
                              for (int x = 0; x < to.width; ++x) {
                                const auto& vx = tx[static_cast<std::size_t>(x)];
                                const Scalar fy = static_cast<Scalar>(vy.frac), fx = static_cast<Scalar>(vx.frac);
                                const auto gr = g.row(y * to.width + x);
                                ga.row(vy.lo * from.width + vx.lo) += (Scalar(1) - fy) * (Scalar(1) - fx) * gr;
                                ga.row(vy.lo * from.width + vx.hi) += (Scalar(1) - fy) * fx * gr;
                                ga.row(vy.hi * from.width + vx.lo) += fy * (Scalar(1) - fx) * gr;
                                ga.row(vy.hi * from.width + vx.hi) += fy * fx * gr;
                              }
                            }
                            t.accumulate(ia, ga);
                          },
                          "bilinear_resize");
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }

template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) { return scale(a, s); }

}  // namespace acseg
