#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "acseg/acg.hpp"
#include "acseg/modularity.hpp"
#include "acg_probe.hpp"
#include "gradcheck.hpp"

using namespace acseg;
using acseg::testing::gradient_error;
using acseg::testing::random_matrix;
using acseg::testing::flatten;
using acseg::testing::test_params;
using acseg::testing::unflatten;

namespace {

Matrix<double> softmax_rows(Matrix<double> m) {
  for (Index r = 0; r < m.rows(); ++r) {
    m.row(r).array() -= m.row(r).maxCoeff();
    m.row(r) = m.row(r).array().exp().matrix();
    m.row(r) /= m.row(r).sum();
  }
  return m;
}

Matrix<double> dense_layer_norm(const Matrix<double>& x, const Matrix<double>& gamma, const Matrix<double>& beta,
                                double eps) {
  Matrix<double> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    out.row(r) = ((x.row(r).array() - mu) / std::sqrt(var + eps) * gamma.array() + beta.array()).matrix();
  }
  return out;
}

Matrix<double> dense_attention(const Matrix<double>& qs, const Matrix<double>& kvs, const AttentionWeights<double>& w,
                               int heads) {
  const Matrix<double> q = qs * w.query, k = kvs * w.key, v = kvs * w.value;
  const Index width = q.cols() / heads;
  Matrix<double> mixed(q.rows(), q.cols());
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.middleCols(h * width, width);
    const auto kh = k.middleCols(h * width, width);
    const auto vh = v.middleCols(h * width, width);
    mixed.middleCols(h * width, width) = softmax_rows(qh * kh.transpose() / std::sqrt(double(width))) * vh;
  }
  return mixed * w.output;
}

Matrix<double> dense_forward(const AcgParams<double>& p, const Matrix<double>& x) {
  const int heads = p.config.heads();
  const double eps = p.config.layer_norm_eps;
  Matrix<double> c = p.prototypes;
  for (const auto& b : p.blocks) {
    c = dense_layer_norm(c + dense_attention(c, x, b.cross, heads), b.cross_norm.gamma, b.cross_norm.beta, eps);
    c = dense_layer_norm(c + dense_attention(c, c, b.self, heads), b.self_norm.gamma, b.self_norm.beta, eps);
    const Matrix<double> hidden = (c * b.ffn_in).cwiseMax(0.0);
    c = dense_layer_norm(c + hidden * b.ffn_out, b.ffn_norm.gamma, b.ffn_norm.beta, eps);
  }
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  AcgConfig cfg;
  CHECK(cfg.heads() == 6);
  cfg.embed_dim = 32;
  CHECK(cfg.heads() == 1);
  cfg.num_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.num_heads = 0;
  cfg.num_prototypes = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("parameter layout") {
  AcgConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_prototypes = 3;
  cfg.num_steps = 2;
  auto p = init_acg<double>(cfg);
  const std::size_t d = 8, per_block = 8 * d * d + 6 * d + 2 * 4 * d * d;
  CHECK(parameter_count(p) == 3 * d + 2 * per_block);
  int decayed = 0;
  for_each_parameter(p, [&](const std::string&, Matrix<double>&, bool decays) { decayed += decays ? 1 : 0; });
  CHECK(decayed == 2 * 10);
}

TEST_CASE("initialization is deterministic per seed") {
  AcgConfig cfg;
  cfg.embed_dim = 16;
  cfg.seed = 5;
  const auto a = init_acg<double>(cfg), b = init_acg<double>(cfg);
  CHECK(a.prototypes == b.prototypes);
  CHECK(a.blocks.back().ffn_out == b.blocks.back().ffn_out);
  cfg.seed = 6;
  CHECK_FALSE(init_acg<double>(cfg).prototypes == a.prototypes);
}

TEST_CASE("attention steps match dense evaluation") {
  std::mt19937_64 rng(11);
  for (int heads : {1, 2}) {
    AcgConfig cfg;
    cfg.embed_dim = 8;
    cfg.num_prototypes = 3;
    cfg.num_steps = 1;
    cfg.num_heads = heads;
    auto p = init_acg<double>(cfg);
    const Matrix<double> c0 = random_matrix(3, 8, rng), x = random_matrix(12, 8, rng);
    Tape<double> tape(false);
    const auto vars = bind(tape, p, false);
    const auto c = tape.constant(c0), px = tape.constant(x);
    const auto& blk = p.blocks[0];
    CHECK((cross_attention_step(c, px, vars.blocks[0].cross, heads).value() -
           (c0 + dense_attention(c0, x, blk.cross, heads)))
              .cwiseAbs()
              .maxCoeff() < 1e-10);
    CHECK((self_attention_step(c, vars.blocks[0].self, heads).value() - (c0 + dense_attention(c0, c0, blk.self, heads)))
              .cwiseAbs()
              .maxCoeff() < 1e-10);
  }
}

TEST_CASE("zero output projection makes attention the identity") {
  AcgConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_steps = 1;
  auto p = init_acg<double>(cfg);
  p.blocks[0].cross.output.setZero();
  std::mt19937_64 rng(12);
  const Matrix<double> c0 = random_matrix(5, 8, rng), x = random_matrix(9, 8, rng);
  Tape<double> tape(false);
  const auto vars = bind(tape, p, false);
  CHECK(cross_attention_step(tape.constant(c0), tape.constant(x), vars.blocks[0].cross, 1).value() == c0);
}

TEST_CASE("forward pass matches dense evaluation") {
  std::mt19937_64 rng(13);
  AcgConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_prototypes = 3;
  cfg.num_steps = 3;
  cfg.num_heads = 2;
  const auto p = test_params(cfg, rng);
  const Matrix<double> x = random_matrix(12, 8, rng);
  const auto concepts = generate_concepts(p, x);
  CHECK(concepts.concepts.rows() == 3);
  CHECK((concepts.concepts - dense_forward(p, x)).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("untracked forward pass matches the tape") {
  std::mt19937_64 rng(15);
  for (int heads : {1, 2, 4}) {
    AcgConfig cfg;
    cfg.embed_dim = 16;
    cfg.num_prototypes = 5;
    cfg.num_steps = 3;
    cfg.num_heads = heads;
    const auto p = test_params(cfg, rng);
    const Matrix<double> x = random_matrix(20, 16, rng);
    Tape<double> tape(false);
    const Matrix<double> tracked = acg_forward(bind(tape, p, false), tape.constant(x)).value();
    CHECK((generate_concepts(p, x).concepts - tracked).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("single-precision copy agrees with double") {
  std::mt19937_64 rng(16);
  AcgConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_heads = 2;
  const auto p = test_params(cfg, rng);
  const auto p32 = cast_params<float>(p);
  CHECK(parameter_count(p32) == parameter_count(p));
  CHECK(cast_params<double>(p32).blocks.back().ffn_out.cast<float>() == p32.blocks.back().ffn_out);
  const Matrix<double> x = random_matrix(30, 16, rng);
  const Matrix<float> c32 = generate_concepts(p32, x.cast<float>()).concepts;
  CHECK((c32.cast<double>() - generate_concepts(p, x).concepts).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("forward pass rejects mismatched embedding width") {
  AcgConfig cfg;
  cfg.embed_dim = 8;
  const auto p = init_acg<double>(cfg);
  CHECK_THROWS_AS(generate_concepts(p, Matrix<double>::Ones(4, 7)), ShapeError);
}

TEST_CASE("zero steps return the prototypes") {
  AcgConfig cfg;
  cfg.embed_dim = 4;
  cfg.num_steps = 0;
  const auto p = init_acg<double>(cfg);
  CHECK(generate_concepts(p, Matrix<double>::Ones(3, 4)).concepts == p.prototypes);
}

TEST_CASE("end-to-end gradient of the modularity loss") {
  std::mt19937_64 rng(14);
  AcgConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_prototypes = 3;
  cfg.num_steps = 2;
  auto p = test_params(cfg, rng);
  const Matrix<double> x = random_matrix(12, 8, rng);
  const auto graph = build_affinity(x);
  const Matrix<double> unit = normalize_rows(x);
  auto f = [&](Tape<double>& t, const std::vector<Var<double>>& v) {
    const auto vars = unflatten(cfg, v);
    const auto concepts = acg_forward(vars, t.constant(x));
    return modularity_loss(graph, soft_assign(t.constant(unit), concepts));
  };
  const double err = gradient_error(f, flatten(p));
  MESSAGE("relative error " << err);
  CHECK(err < 1e-3);
}

TEST_CASE("bound gradients land in parameter order") {
  std::mt19937_64 rng(15);
  AcgConfig cfg;
  cfg.embed_dim = 4;
  cfg.num_steps = 1;
  auto p = init_acg<double>(cfg);
  Tape<double> tape;
  const auto vars = bind(tape, p);
  const auto x = tape.constant(random_matrix(6, 4, rng));
  tape.backward(sum(acg_forward(vars, x)));
  const auto g = gradients(vars, p);
  CHECK(g.blocks[0].ffn_norm.beta.isApprox(Matrix<double>::Ones(1, 4) * p.config.num_prototypes));
  CHECK(g.prototypes.rows() == p.prototypes.rows());
}
