#include "acseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

namespace acseg {
namespace {

void add_into(AcgParams<double>& acc, const AcgParams<double>& g) {
  std::vector<const Matrix<double>*> src;
  for_each_parameter(g, [&](const std::string&, const Matrix<double>& m, bool) { src.push_back(&m); });
  std::size_t i = 0;
  for_each_parameter(acc, [&](const std::string&, Matrix<double>& m, bool) { m += *src[i++]; });
}

void scale_all(AcgParams<double>& p, double s) {
  for_each_parameter(p, [&](const std::string&, Matrix<double>& m, bool) { m *= s; });
}

AcgParams<double> zeros_like(const AcgParams<double>& p) {
  AcgParams<double> z = p;
  for_each_parameter(z, [](const std::string&, Matrix<double>& m, bool) { m.setZero(); });
  return z;
}

// Runs fn(i) for i in [0, count) on up to `threads` workers. Results must be
// written to per-index slots; reductions happen afterwards in index order.
template <typename Fn>
void parallel_for(int count, int threads, Fn&& fn) {
  threads = std::max(1, std::min(threads, count));
  if (threads == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (int i = t; i < count; i += threads) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0)) {
    throw std::invalid_argument("TrainConfig: learning rate and weight decay must be non-negative");
  }
  if (iterations < 0 || batch_size < 1) throw std::invalid_argument("TrainConfig: iterations/batch size");
  if (num_prototypes < 1 || num_steps < 0) throw std::invalid_argument("TrainConfig: prototypes/steps");
  if (threads < 1) throw std::invalid_argument("TrainConfig: threads must be >= 1");
}

AcgConfig TrainConfig::acg_config(int embed_dim) const {
  AcgConfig c;
  c.num_prototypes = num_prototypes;
  c.embed_dim = embed_dim;
  c.num_steps = num_steps;
  c.num_heads = num_heads;
  c.ffn_expansion = ffn_expansion;
  c.prototype_init_std = prototype_init_std;
  c.seed = seed;
  return c;
}

ImageGradient image_gradient(const AcgParams<double>& params, const MatrixF& features, const ModularityOptions& opt) {
  const Matrix<double> x = features.cast<double>();
  const AffinityGraph<double> graph = build_affinity(x);
  ImageGradient out;
  if (!(graph.two_m > 0.0)) {
    out.skipped = true;
    out.grads = zeros_like(params);
    return out;
  }
  Tape<double> tape;
  const auto vars = bind(tape, params, true);
  const auto pixels = tape.constant(x);
  const auto unit = tape.constant(normalize_rows(x));
  const auto concepts = acg_forward(vars, pixels);
  const auto loss = modularity_loss(graph, soft_assign(unit, concepts), opt);
  tape.backward(loss);
  out.loss = loss.value()(0, 0);
  out.grads = gradients(vars, params);
  return out;
}

double batch_loss(const AcgParams<double>& params, const std::vector<FeatureMap>& batch, const ModularityOptions& opt,
                  BatchReduction reduction) {
  double total = 0.0;
  int used = 0;
  for (const auto& fm : batch) {
    const Matrix<double> x = fm.features.cast<double>();
    const auto graph = build_affinity(x);
    if (!(graph.two_m > 0.0)) continue;
    const auto concepts = generate_concepts(params, x);
    total += modularity_loss(graph, soft_assign(x, concepts.concepts), opt);
    ++used;
  }
  if (used == 0) return 0.0;
  return reduction == BatchReduction::kMean ? total / used : total;
}

TrainResult train(const FeatureSource& data, const TrainConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  const int dim = data.get(0).dim();
  return train_from(init_acg<double>(cfg.acg_config(dim)), data, cfg, progress);
}

TrainResult train_from(AcgParams<double> params, const FeatureSource& data, const TrainConfig& cfg,
                       const ProgressFn& progress) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  const int dim = static_cast<int>(params.prototypes.cols());

  AdamWConfig ocfg;
  ocfg.learning_rate = cfg.learning_rate;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.decay_all = cfg.decay_all;
  AdamW<double> opt(params, ocfg);
  const ModularityOptions mopt{cfg.include_diagonal};

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  TrainResult result;
  result.loss_history.reserve(static_cast<std::size_t>(cfg.iterations));
  const int batch = cfg.batch_size;
  std::vector<std::size_t> indices(static_cast<std::size_t>(batch));
  std::vector<ImageGradient> parts(static_cast<std::size_t>(batch));

  for (int it = 0; it < cfg.iterations; ++it) {
    for (auto& idx : indices) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx = order[cursor++];
    }
    parallel_for(batch, cfg.threads, [&](int b) {
      const FeatureMap fm = data.get(indices[static_cast<std::size_t>(b)]);
      if (fm.dim() != dim) {
        throw ShapeError("train: image " + fm.id + " has feature dim " + std::to_string(fm.dim()) + ", expected " +
                         std::to_string(dim));
      }
      try {
        parts[static_cast<std::size_t>(b)] = image_gradient(params, fm.features, mopt);
      } catch (const NonFiniteError& e) {
        std::ostringstream os;
        os << "train: non-finite value at iteration " << it << " on image " << fm.id << " (" << e.what() << ")";
        throw NonFiniteError(os.str());
      }
    });

    AcgParams<double> grad = zeros_like(params);
    double loss = 0.0;
    int used = 0;
    for (const auto& p : parts) {
      if (p.skipped) {
        ++result.skipped_images;
        continue;
      }
      add_into(grad, p.grads);
      loss += p.loss;
      ++used;
    }
    if (used > 0 && cfg.reduction == BatchReduction::kMean) {
      scale_all(grad, 1.0 / used);
      loss /= used;
    }
    if (!std::isfinite(loss)) {
      throw NonFiniteError("train: non-finite batch loss at iteration " + std::to_string(it));
    }
    opt.step(params, grad);
    result.loss_history.push_back(loss);
    if (progress) progress(it, loss);
  }
  result.params = std::move(params);
  return result;
}

template <typename Scalar>
std::vector<InferenceResult<Scalar>> infer_batch(const AcgParams<Scalar>& params, const std::vector<FeatureMap>& maps,
                                                 int threads) {
  constexpr std::size_t kChunk = 64;
  std::vector<InferenceResult<Scalar>> out(maps.size());
  const auto chunks = static_cast<int>((maps.size() + kChunk - 1) / kChunk);
  parallel_for(chunks, threads, [&](int c) {
    const std::size_t begin = static_cast<std::size_t>(c) * kChunk;
    const std::size_t end = std::min(maps.size(), begin + kChunk);
    std::vector<Matrix<Scalar>> pixels;
    for (std::size_t i = begin; i < end; ++i) {
      maps[i].validate();
      pixels.push_back(maps[i].features.template cast<Scalar>());
    }
    auto concepts = generate_concept_batch(params, pixels);
    for (std::size_t i = begin; i < end; ++i) {
      auto& cs = concepts[i - begin];
      const Matrix<Scalar> soft = soft_assign(pixels[i - begin], cs);
      out[i] = {{std::move(cs), maps[i].id}, assign_at_resolution(soft, maps[i].grid, maps[i].image_size)};
    }
  });
  return out;
}

template std::vector<InferenceResult<double>> infer_batch(const AcgParams<double>&, const std::vector<FeatureMap>&,
                                                          int);
template std::vector<InferenceResult<float>> infer_batch(const AcgParams<float>&, const std::vector<FeatureMap>&,
                                                         int);

std::vector<double> moving_average(const std::vector<double>& values, int window) {
  if (window < 1) throw std::invalid_argument("moving_average: window must be >= 1");
  std::vector<double> out;
  if (values.size() < static_cast<std::size_t>(window)) return out;
  double acc = std::accumulate(values.begin(), values.begin() + window, 0.0);
  out.push_back(acc / window);
  for (std::size_t i = static_cast<std::size_t>(window); i < values.size(); ++i) {
    acc += values[i] - values[i - static_cast<std::size_t>(window)];
    out.push_back(acc / window);
  }
  return out;
}

}  // namespace acseg
