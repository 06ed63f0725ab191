#pragma once

#include <cmath>
#include <string>

#include "acseg/acg.hpp"

namespace acseg {

struct AdamWConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  bool decay_all = false;  // also decay prototypes and norm affines
};

// Adam with decoupled weight decay over an AcgParams tree:
//   p <- p - lr * wd * p                        (decayed tensors only)
//   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps)   (bias-corrected moments)
template <typename Scalar>
class AdamW {
 public:
  AdamW(const AcgParams<Scalar>& like, AdamWConfig cfg) : cfg_(cfg), m_(like), v_(like) {
    for_each_parameter(m_, [](const std::string&, Matrix<Scalar>& x, bool) { x.setZero(); });
    for_each_parameter(v_, [](const std::string&, Matrix<Scalar>& x, bool) { x.setZero(); });
  }

  void step(AcgParams<Scalar>& params, const AcgParams<Scalar>& grads) {
    ++steps_;
    const Scalar lr = static_cast<Scalar>(cfg_.learning_rate);
    const Scalar b1 = static_cast<Scalar>(cfg_.beta1), b2 = static_cast<Scalar>(cfg_.beta2);
    const Scalar bc1 = Scalar(1) - static_cast<Scalar>(std::pow(cfg_.beta1, double(steps_)));
    const Scalar bc2 = Scalar(1) - static_cast<Scalar>(std::pow(cfg_.beta2, double(steps_)));
    const Scalar eps = static_cast<Scalar>(cfg_.epsilon);
    const Scalar decay = Scalar(1) - lr * static_cast<Scalar>(cfg_.weight_decay);

    std::vector<const Matrix<Scalar>*> g;
    for_each_parameter(grads, [&](const std::string&, const Matrix<Scalar>& x, bool) { g.push_back(&x); });
    std::vector<Matrix<Scalar>*> m, v;
    for_each_parameter(m_, [&](const std::string&, Matrix<Scalar>& x, bool) { m.push_back(&x); });
    for_each_parameter(v_, [&](const std::string&, Matrix<Scalar>& x, bool) { v.push_back(&x); });

    std::size_t i = 0;
    for_each_parameter(params, [&](const std::string& name, Matrix<Scalar>& p, bool decays) {
      const Matrix<Scalar>& gi = *g[i];
      if (gi.rows() != p.rows() || gi.cols() != p.cols()) throw ShapeError("AdamW: gradient shape for " + name);
      if (decays || cfg_.decay_all) p *= decay;
      *m[i] = b1 * *m[i] + (Scalar(1) - b1) * gi;
      *v[i] = b2 * *v[i] + (Scalar(1) - b2) * gi.cwiseAbs2();
      p.array() -= lr * (m[i]->array() / bc1) / ((v[i]->array() / bc2).sqrt() + eps);
      ++i;
    });
  }

  long steps() const { return steps_; }
  const AdamWConfig& config() const { return cfg_; }
  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

 private:
  AdamWConfig cfg_;
  AcgParams<Scalar> m_, v_;
  long steps_ = 0;
};

}  // namespace acseg
