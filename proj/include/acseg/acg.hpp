#pragma once

// Adaptive Concept Generator: learnable prototypes refined against one
// image's pixel embeddings by N blocks of
//   cross-attention (prototypes attend to pixels) -> add & norm
//   self-attention  (prototypes attend to each other) -> add & norm
//   feed-forward    (ReLU, expansion r)               -> add & norm
// Parameters are not shared across blocks.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "acseg/autodiff.hpp"
#include "acseg/types.hpp"

namespace acseg {

struct AcgConfig {
  int num_prototypes = 5;
  int embed_dim = 384;
  int num_steps = 6;
  int num_heads = 0;  // 0 selects max(1, embed_dim / 64)
  int ffn_expansion = 4;
  double prototype_init_std = 0.02;
  double layer_norm_eps = 1e-5;
  std::uint64_t seed = 0;

  int heads() const { return num_heads > 0 ? num_heads : std::max(1, embed_dim / 64); }

  void validate() const {
    if (num_prototypes < 1) throw std::invalid_argument("AcgConfig: num_prototypes must be >= 1");
    if (embed_dim < 1) throw std::invalid_argument("AcgConfig: embed_dim must be >= 1");
    if (num_steps < 0) throw std::invalid_argument("AcgConfig: num_steps must be >= 0");
    if (ffn_expansion < 1) throw std::invalid_argument("AcgConfig: ffn_expansion must be >= 1");
    if (embed_dim % heads() != 0) {
      throw std::invalid_argument("AcgConfig: embed_dim " + std::to_string(embed_dim) +
                                  " not divisible by head count " + std::to_string(heads()));
    }
  }
};

template <typename Scalar>
struct AttentionWeights {
  Matrix<Scalar> query, key, value, output;  // each d x d
};

template <typename Scalar>
struct NormAffine {
  Matrix<Scalar> gamma, beta;  // each 1 x d
};

template <typename Scalar>
struct AcgBlock {
  AttentionWeights<Scalar> cross;
  AttentionWeights<Scalar> self;
  Matrix<Scalar> ffn_in;   // d x r*d
  Matrix<Scalar> ffn_out;  // r*d x d
  NormAffine<Scalar> cross_norm, self_norm, ffn_norm;
};

template <typename Scalar>
struct AcgParams {
  AcgConfig config;
  Matrix<Scalar> prototypes;  // k x d
  std::vector<AcgBlock<Scalar>> blocks;
};

// Visits every parameter matrix in a fixed order. `decays` is true for
// projection and FFN weights, false for prototypes and norm affines.
template <typename Params, typename Fn>
void for_each_parameter(Params& params, Fn&& fn) {
  fn(std::string("prototypes"), params.prototypes, false);
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    auto& blk = params.blocks[b];
    const std::string p = "blocks." + std::to_string(b) + ".";
    fn(p + "cross.query", blk.cross.query, true);
    fn(p + "cross.key", blk.cross.key, true);
    fn(p + "cross.value", blk.cross.value, true);
    fn(p + "cross.output", blk.cross.output, true);
    fn(p + "cross_norm.gamma", blk.cross_norm.gamma, false);
    fn(p + "cross_norm.beta", blk.cross_norm.beta, false);
    fn(p + "self.query", blk.self.query, true);
    fn(p + "self.key", blk.self.key, true);
    fn(p + "self.value", blk.self.value, true);
    fn(p + "self.output", blk.self.output, true);
    fn(p + "self_norm.gamma", blk.self_norm.gamma, false);
    fn(p + "self_norm.beta", blk.self_norm.beta, false);
    fn(p + "ffn.in", blk.ffn_in, true);
    fn(p + "ffn.out", blk.ffn_out, true);
    fn(p + "ffn_norm.gamma", blk.ffn_norm.gamma, false);
    fn(p + "ffn_norm.beta", blk.ffn_norm.beta, false);
  }
}

template <typename Scalar>
std::size_t parameter_count(const AcgParams<Scalar>& params) {
  std::size_t n = 0;
  for_each_parameter(params, [&](const std::string&, const Matrix<Scalar>& m, bool) {
    n += static_cast<std::size_t>(m.size());
  });
  return n;
}

// The same parameters at another precision.
template <typename To, typename From>
AcgParams<To> cast_params(const AcgParams<From>& params) {
  std::vector<const Matrix<From>*> src;
  for_each_parameter(params, [&](const std::string&, const Matrix<From>& m, bool) { src.push_back(&m); });
  AcgParams<To> out;
  out.config = params.config;
  out.blocks.resize(params.blocks.size());
  std::size_t i = 0;
  for_each_parameter(out, [&](const std::string&, Matrix<To>& m, bool) { m = src[i++]->template cast<To>(); });
  return out;
}

// Prototypes ~ N(0, prototype_init_std); projections Xavier-normal; norms at
// identity.
template <typename Scalar>
AcgParams<Scalar> init_acg(const AcgConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  auto gaussian = [&](Index rows, Index cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix<Scalar> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
    return m;
  };
  auto xavier = [&](Index rows, Index cols) { return gaussian(rows, cols, std::sqrt(2.0 / double(rows + cols))); };
  const Index d = cfg.embed_dim;
  const Index hidden = d * cfg.ffn_expansion;
  auto attention = [&] { return AttentionWeights<Scalar>{xavier(d, d), xavier(d, d), xavier(d, d), xavier(d, d)}; };
  auto norm = [&] {
    return NormAffine<Scalar>{Matrix<Scalar>::Ones(1, d), Matrix<Scalar>::Zero(1, d)};
  };

  AcgParams<Scalar> p;
  p.config = cfg;
  p.prototypes = gaussian(cfg.num_prototypes, d, cfg.prototype_init_std);
  for (int s = 0; s < cfg.num_steps; ++s) {
    AcgBlock<Scalar> blk;
    blk.cross = attention();
    blk.self = attention();
    blk.ffn_in = xavier(d, hidden);
    blk.ffn_out = xavier(hidden, d);
    blk.cross_norm = norm();
    blk.self_norm = norm();
    blk.ffn_norm = norm();
    p.blocks.push_back(std::move(blk));
  }
  return p;
}

// The same parameter tree with every matrix bound to a tape variable.
template <typename Scalar>
struct AcgVars {
  struct Attention {
    Var<Scalar> query, key, value, output;
  };
  struct Norm {
    Var<Scalar> gamma, beta;
  };
  struct Block {
    Attention cross, self;
    Var<Scalar> ffn_in, ffn_out;
    Norm cross_norm, self_norm, ffn_norm;
  };
  AcgConfig config;
  Var<Scalar> prototypes;
  std::vector<Block> blocks;
};

template <typename Scalar>
AcgVars<Scalar> bind(Tape<Scalar>& tape, const AcgParams<Scalar>& p, bool requires_grad = true) {
  auto v = [&](const Matrix<Scalar>& m) { return tape.leaf_ref(m, requires_grad); };
  AcgVars<Scalar> out;
  out.config = p.config;
  out.prototypes = v(p.prototypes);
  for (const auto& blk : p.blocks) {
    typename AcgVars<Scalar>::Block b;
    b.cross = {v(blk.cross.query), v(blk.cross.key), v(blk.cross.value), v(blk.cross.output)};
    b.self = {v(blk.self.query), v(blk.self.key), v(blk.self.value), v(blk.self.output)};
    b.ffn_in = v(blk.ffn_in);
    b.ffn_out = v(blk.ffn_out);
    b.cross_norm = {v(blk.cross_norm.gamma), v(blk.cross_norm.beta)};
    b.self_norm = {v(blk.self_norm.gamma), v(blk.self_norm.beta)};
    b.ffn_norm = {v(blk.ffn_norm.gamma), v(blk.ffn_norm.beta)};
    out.blocks.push_back(b);
  }
  return out;
}

// Copies the adjoints of a bound tree back into a parameter-shaped tree.
template <typename Scalar>
AcgParams<Scalar> gradients(const AcgVars<Scalar>& vars, const AcgParams<Scalar>& shape_like) {
  AcgParams<Scalar> g = shape_like;
  std::vector<Var<Scalar>> flat;
  flat.push_back(vars.prototypes);
  for (const auto& b : vars.blocks) {
    for (const auto& x : {b.cross.query, b.cross.key, b.cross.value, b.cross.output, b.cross_norm.gamma,
                          b.cross_norm.beta, b.self.query, b.self.key, b.self.value, b.self.output,
                          b.self_norm.gamma, b.self_norm.beta, b.ffn_in, b.ffn_out, b.ffn_norm.gamma,
                          b.ffn_norm.beta}) {
      flat.push_back(x);
    }
  }
  std::size_t i = 0;
  for_each_parameter(g, [&](const std::string&, Matrix<Scalar>& m, bool) { m = flat[i++].grad(); });
  return g;
}

// Scaled dot-product attention of `query_src` against `kv_src`, split into
// `heads` column groups, scaled by 1/sqrt(head width), then projected by W_o.
template <typename Scalar>
Var<Scalar> multi_head_attention(const Var<Scalar>& query_src, const Var<Scalar>& kv_src,
                                 const typename AcgVars<Scalar>::Attention& w, int heads) {
  const Index d = query_src.cols();
  if (kv_src.cols() != d || w.query.rows() != d) {
    throw ShapeError("attention: embedding width mismatch " + std::to_string(d) + " vs " +
                     std::to_string(kv_src.cols()));
  }
  const Var<Scalar> q = matmul(query_src, w.query);
  const Var<Scalar> k = matmul(kv_src, w.key);
  const Var<Scalar> v = matmul(kv_src, w.value);
  const Index width = d / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(width));
  auto head = [&](const Var<Scalar>& qh, const Var<Scalar>& kh, const Var<Scalar>& vh) {
    return matmul(row_softmax(scale(matmul(qh, transpose(kh)), inv_sqrt)), vh);
  };
  Var<Scalar> mixed;
  if (heads == 1) {
    mixed = head(q, k, v);
  } else {
    std::vector<Var<Scalar>> parts;
    for (int h = 0; h < heads; ++h) {
      parts.push_back(head(slice_cols(q, h * width, width), slice_cols(k, h * width, width),
                           slice_cols(v, h * width, width)));
    }
    mixed = hcat<Scalar>(parts);
  }
  return matmul(mixed, w.output);
}

// C + Attn(C, X) W_o, before the block's layer norm.
template <typename Scalar>
Var<Scalar> cross_attention_step(const Var<Scalar>& concepts, const Var<Scalar>& pixels,
                                 const typename AcgVars<Scalar>::Attention& w, int heads) {
  if (pixels.rows() < 1) throw ShapeError("cross_attention_step: no pixels");
  return add(concepts, multi_head_attention(concepts, pixels, w, heads));
}

// C + Attn(C, C) W_o, before the block's layer norm.
template <typename Scalar>
Var<Scalar> self_attention_step(const Var<Scalar>& concepts, const typename AcgVars<Scalar>::Attention& w,
                                int heads) {
  return add(concepts, multi_head_attention(concepts, concepts, w, heads));
}

template <typename Scalar>
Var<Scalar> ffn_step(const Var<Scalar>& concepts, const Var<Scalar>& ffn_in, const Var<Scalar>& ffn_out) {
  return add(concepts, matmul(relu(matmul(concepts, ffn_in)), ffn_out));
}

template <typename Scalar>
Var<Scalar> affine_norm(const Var<Scalar>& x, const typename AcgVars<Scalar>::Norm& n, Scalar eps) {
  return add_row(mul_row(layer_norm(x, eps), n.gamma), n.beta);
}

// Maps the prototypes to this image's concepts (k x d).
template <typename Scalar>
Var<Scalar> acg_forward(const AcgVars<Scalar>& p, const Var<Scalar>& pixels) {
  const int heads = p.config.heads();
  const auto eps = static_cast<Scalar>(p.config.layer_norm_eps);
  if (pixels.cols() != p.prototypes.cols()) {
    throw ShapeError("acg_forward: pixel width " + std::to_string(pixels.cols()) + " != embed dim " +
                     std::to_string(p.prototypes.cols()));
  }
  Var<Scalar> c = p.prototypes;
  for (const auto& blk : p.blocks) {
    c = affine_norm(cross_attention_step(c, pixels, blk.cross, heads), blk.cross_norm, eps);
    c = affine_norm(self_attention_step(c, blk.self, heads), blk.self_norm, eps);
    c = affine_norm(ffn_step(c, blk.ffn_in, blk.ffn_out), blk.ffn_norm, eps);
  }
  return c;
}

template <typename Scalar>
struct ConceptSet {
  Matrix<Scalar> concepts;  // k x d
  std::string image_id;
};

namespace detail {

template <typename Scalar>
void affine_norm_inplace(Matrix<Scalar>& x, const NormAffine<Scalar>& n, Scalar eps) {
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mu = x.row(r).mean();
    x.row(r).array() -= mu;
    const Scalar inv_std = Scalar(1) / std::sqrt(x.row(r).squaredNorm() / Scalar(x.cols()) + eps);
    x.row(r) = (x.row(r).array() * inv_std * n.gamma.row(0).array() + n.beta.row(0).array()).matrix();
  }
}

template <typename Scalar>
void softmax_rows_inplace(Matrix<Scalar>& x) {
  for (Index r = 0; r < x.rows(); ++r) {
    x.row(r).array() -= x.row(r).maxCoeff();
    x.row(r) = x.row(r).array().exp().matrix();
    x.row(r) /= x.row(r).sum();
  }
}

// Attention for a stack of images, `rows` concept rows each. Projections run on
// the whole stack; the pixel side is reassociated per image:
// (C Wq_h)(X Wk_h)^T = ((C Wq_h) Wk_h^T) X^T and A (X Wv_h) = (A X) Wv_h.
template <typename Scalar, typename KeysOf>
Matrix<Scalar> attend_stacked(const Matrix<Scalar>& c, Index rows, KeysOf&& keys_of,
                              const AttentionWeights<Scalar>& w, int heads) {
  const Index d = c.cols();
  const Index width = d / heads;
  const Index images = c.rows() / rows;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(width));
  const Matrix<Scalar> q = c * w.query;
  Matrix<Scalar> mixed(c.rows(), d);
  Matrix<Scalar> ax(c.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const Matrix<Scalar> qk = (q.middleCols(h * width, width) * w.key.middleCols(h * width, width).transpose()) * inv_sqrt;
    for (Index b = 0; b < images; ++b) {
      const auto& x = keys_of(b);
      Matrix<Scalar> a = qk.middleRows(b * rows, rows) * x.transpose();
      softmax_rows_inplace(a);
      ax.middleRows(b * rows, rows).noalias() = a * x;
    }
    mixed.middleCols(h * width, width).noalias() = ax * w.value.middleCols(h * width, width);
  }
  return mixed * w.output;
}

}  // namespace detail

// Untracked forward pass over several images at once; returns one k x d
// concept matrix per image.
template <typename Scalar>
std::vector<Matrix<Scalar>> generate_concept_batch(const AcgParams<Scalar>& params,
                                                   const std::vector<Matrix<Scalar>>& pixels) {
  const Index k = params.prototypes.rows();
  const Index d = params.prototypes.cols();
  for (const auto& x : pixels) {
    if (x.cols() != d) {
      throw ShapeError("acg_forward: pixel width " + std::to_string(x.cols()) + " != embed dim " +
                       std::to_string(d));
    }
    if (!params.blocks.empty() && x.rows() < 1) throw ShapeError("cross_attention_step: no pixels");
  }
  const auto images = static_cast<Index>(pixels.size());
  const int heads = params.config.heads();
  const auto eps = static_cast<Scalar>(params.config.layer_norm_eps);
  Matrix<Scalar> c = params.prototypes.replicate(images, 1);
  Matrix<Scalar> own(k, d);
  for (const auto& blk : params.blocks) {
    c += detail::attend_stacked(c, k, [&](Index b) -> const Matrix<Scalar>& { return pixels[static_cast<std::size_t>(b)]; },
                                blk.cross, heads);
    detail::affine_norm_inplace(c, blk.cross_norm, eps);
    c += detail::attend_stacked(c, k, [&](Index b) -> const Matrix<Scalar>& { return own = c.middleRows(b * k, k); },
                                blk.self, heads);
    detail::affine_norm_inplace(c, blk.self_norm, eps);
    c += (c * blk.ffn_in).cwiseMax(Scalar(0)) * blk.ffn_out;
    detail::affine_norm_inplace(c, blk.ffn_norm, eps);
  }
  if (!c.allFinite()) throw NonFiniteError("generate_concepts: non-finite output");
  std::vector<Matrix<Scalar>> out;
  out.reserve(pixels.size());
  for (Index b = 0; b < images; ++b) out.emplace_back(c.middleRows(b * k, k));
  return out;
}

template <typename Scalar, typename Derived>
ConceptSet<Scalar> generate_concepts(const AcgParams<Scalar>& params, const Eigen::MatrixBase<Derived>& pixels,
                                     std::string image_id = {}) {
  auto concepts = generate_concept_batch(params, std::vector<Matrix<Scalar>>{pixels.template cast<Scalar>()});
  return {std::move(concepts.front()), std::move(image_id)};
}

}  // namespace acseg
