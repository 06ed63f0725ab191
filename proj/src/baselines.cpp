#include "acseg/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

#include <Eigen/Eigenvalues>

#include "acseg/assignment.hpp"
#include "acseg/modularity.hpp"

namespace acseg {
namespace {

int nearest_center(const Matrix<double>& points, Index i, const Matrix<double>& centers, double* dist2) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Index c = 0; c < centers.rows(); ++c) {
    const double d = (points.row(i) - centers.row(c)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  if (dist2) *dist2 = best_d;
  return best;
}

Matrix<double> kmeans_plus_plus(const Matrix<double>& points, int k, std::mt19937_64& rng) {
  const Index n = points.rows();
  Matrix<double> centers(k, points.cols());
  std::uniform_int_distribution<Index> first(0, n - 1);
  centers.row(0) = points.row(first(rng));
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) d2[static_cast<std::size_t>(i)] = (points.row(i) - centers.row(0)).squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    Index pick = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng);
      for (pick = 0; pick < n - 1; ++pick) {
        r -= d2[static_cast<std::size_t>(pick)];
        if (r <= 0.0) break;
      }
    } else {
      pick = first(rng);
    }
    centers.row(c) = points.row(pick);
    for (Index i = 0; i < n; ++i) {
      d2[static_cast<std::size_t>(i)] =
          std::min(d2[static_cast<std::size_t>(i)], (points.row(i) - centers.row(c)).squaredNorm());
    }
  }
  return centers;
}

KMeansResult lloyd(const Matrix<double>& points, Matrix<double> centers, int max_iterations, double tol) {
  const Index n = points.rows();
  const Index k = centers.rows();
  KMeansResult r;
  r.labels.assign(static_cast<std::size_t>(n), 0);
  for (int it = 0; it < max_iterations; ++it) {
    double inertia = 0.0;
    for (Index i = 0; i < n; ++i) {
      double d = 0.0;
      r.labels[static_cast<std::size_t>(i)] = nearest_center(points, i, centers, &d);
      inertia += d;
    }
    r.inertia_trace.push_back(inertia);
    r.iterations = it + 1;
    Matrix<double> next = Matrix<double>::Zero(k, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Index i = 0; i < n; ++i) {
      const int c = r.labels[static_cast<std::size_t>(i)];
      next.row(c) += points.row(i);
      ++counts[static_cast<std::size_t>(c)];
    }
    for (Index c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        next.row(c) /= counts[static_cast<std::size_t>(c)];
      } else {
        next.row(c) = centers.row(c);  // empty cluster keeps its center
      }
    }
    const double shift = (next - centers).squaredNorm();
    centers = std::move(next);
    if (shift <= tol) break;
  }
  // Final labels and inertia against the converged centers.
  r.inertia = 0.0;
  for (Index i = 0; i < n; ++i) {
    double d = 0.0;
    r.labels[static_cast<std::size_t>(i)] = nearest_center(points, i, centers, &d);
    r.inertia += d;
  }
  r.centers = std::move(centers);
  return r;
}

}  // namespace

KMeansResult kmeans(const Matrix<double>& points, const KMeansOptions& opt) {
  if (opt.clusters < 1) throw std::invalid_argument("kmeans: clusters must be >= 1");
  if (points.rows() < opt.clusters) {
    throw std::invalid_argument("kmeans: " + std::to_string(points.rows()) + " points for " +
                                std::to_string(opt.clusters) + " clusters");
  }
  const Matrix<double> centered = points.rowwise() - points.colwise().mean();
  const double mean_var = centered.colwise().squaredNorm().mean() / static_cast<double>(points.rows());
  const double tol = opt.tolerance * mean_var;
  std::mt19937_64 rng(opt.seed);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(1, opt.restarts); ++r) {
    KMeansResult run = lloyd(points, kmeans_plus_plus(points, opt.clusters, rng), opt.max_iterations, tol);
    if (run.inertia < best.inertia) best = std::move(run);
  }
  return best;
}

Matrix<double> spectral_embedding(const Matrix<double>& affinity, int components) {
  const Index n = affinity.rows();
  if (affinity.cols() != n) throw ShapeError("spectral_embedding: affinity must be square");
  if (components < 1 || components > n) throw std::invalid_argument("spectral_embedding: invalid component count");
  const Vector<double> inv_sqrt_deg = affinity.rowwise().sum().cwiseMax(1e-12).cwiseSqrt().cwiseInverse();
  Matrix<double> lap = -(inv_sqrt_deg.asDiagonal() * affinity * inv_sqrt_deg.asDiagonal());
  lap.diagonal().array() += 1.0;
  lap = 0.5 * (lap + lap.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Matrix<double>> solver(lap);
  if (solver.info() != Eigen::Success) throw std::runtime_error("spectral_embedding: eigensolver failed");
  Matrix<double> emb = inv_sqrt_deg.asDiagonal() * solver.eigenvectors().leftCols(components);
  // Deterministic sign: the largest-magnitude entry of each vector is positive.
  for (Index c = 0; c < emb.cols(); ++c) {
    Index arg = 0;
    emb.col(c).cwiseAbs().maxCoeff(&arg);
    if (emb(arg, c) < 0.0) emb.col(c) *= -1.0;
  }
  return emb;
}

Labels spectral_cluster_graph(const Matrix<double>& affinity, const SpectralOptions& opt) {
  const int comps = std::min<int>(opt.components, static_cast<int>(affinity.rows()));
  const Matrix<double> emb = spectral_embedding(affinity, comps);
  KMeansOptions ko;
  ko.clusters = opt.clusters;
  ko.seed = opt.seed;
  return kmeans(emb, ko).labels;
}

Labels spectral_cluster(const Matrix<double>& points, const SpectralOptions& opt) {
  Matrix<double> affinity;
  if (opt.affinity == SpectralAffinity::kClampedCosine) {
    affinity = build_affinity(points).weights;
  } else {
    const Index n = points.rows();
    affinity.resize(n, n);
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) affinity(i, j) = std::exp(-opt.rbf_gamma * (points.row(i) - points.row(j)).squaredNorm());
    }
  }
  return spectral_cluster_graph(affinity, opt);
}

AffinityPropagationResult affinity_propagation(const Matrix<double>& points, const AffinityPropagationOptions& opt) {
  const Index n = points.rows();
  AffinityPropagationResult res;
  if (n == 0) return res;
  if (!(opt.damping >= 0.5 && opt.damping < 1.0)) throw std::invalid_argument("affinity_propagation: damping in [0.5, 1)");
  const Matrix<double> unit = normalize_rows(points);
  Matrix<double> s = 2.0 * (unit * unit.transpose()).array() - 2.0;
  s.diagonal().setConstant(opt.preference);
  // Tiny deterministic jitter removes degenerate ties.
  {
    std::mt19937_64 rng(0);
    std::normal_distribution<double> g(0.0, 1.0);
    const double tiny = std::numeric_limits<double>::min();
    for (Index i = 0; i < s.size(); ++i) {
      s.data()[i] += (std::numeric_limits<double>::epsilon() * s.data()[i] + tiny * 100.0) * g(rng);
    }
  }
  Matrix<double> r = Matrix<double>::Zero(n, n), a = Matrix<double>::Zero(n, n);
  const double lambda = opt.damping;
  const int conv = opt.convergence_iterations;
  std::vector<std::vector<bool>> history(static_cast<std::size_t>(conv), std::vector<bool>(static_cast<std::size_t>(n)));
  bool converged = false;
  for (int it = 0; it < opt.max_iterations; ++it) {
    // Responsibilities.
    Matrix<double> as = a + s;
    Matrix<double> tmp(n, n);
    for (Index i = 0; i < n; ++i) {
      Index arg = 0;
      const double first = as.row(i).maxCoeff(&arg);
      double second = -std::numeric_limits<double>::infinity();
      for (Index k = 0; k < n; ++k) {
        if (k != arg) second = std::max(second, as(i, k));
      }
      tmp.row(i) = s.row(i).array() - first;
      tmp(i, arg) = s(i, arg) - second;
    }
    r = lambda * r + (1.0 - lambda) * tmp;
    // Availabilities.
    tmp = r.cwiseMax(0.0);
    tmp.diagonal() = r.diagonal();
    const RowVector<double> colsum = tmp.colwise().sum();
    tmp = (-tmp).rowwise() + colsum;
    const Vector<double> diag = tmp.diagonal();
    tmp = tmp.cwiseMin(0.0);
    tmp.diagonal() = diag;
    a = lambda * a + (1.0 - lambda) * tmp;

    int exemplar_count = 0;
    auto& slot = history[static_cast<std::size_t>(it % conv)];
    for (Index i = 0; i < n; ++i) {
      slot[static_cast<std::size_t>(i)] = a(i, i) + r(i, i) > 0.0;
      exemplar_count += slot[static_cast<std::size_t>(i)] ? 1 : 0;
    }
    if (it >= conv) {
      bool stable = true;
      for (Index i = 0; i < n && stable; ++i) {
        int on = 0;
        for (const auto& h : history) on += h[static_cast<std::size_t>(i)] ? 1 : 0;
        stable = on == 0 || on == conv;
      }
      if (stable && exemplar_count > 0) {
        converged = true;
        break;
      }
    }
  }

  std::vector<int> ex;
  for (Index i = 0; i < n; ++i) {
    if (a(i, i) + r(i, i) > 0.0) ex.push_back(static_cast<int>(i));
  }
  if (!converged || ex.empty()) {
    res.labels.assign(static_cast<std::size_t>(n), 0);
    res.converged = false;
    return res;
  }
  auto assign = [&](const std::vector<int>& exemplars) {
    Labels c(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      int best = 0;
      for (std::size_t e = 1; e < exemplars.size(); ++e) {
        if (s(i, exemplars[e]) > s(i, exemplars[static_cast<std::size_t>(best)])) best = static_cast<int>(e);
      }
      c[static_cast<std::size_t>(i)] = best;
    }
    for (std::size_t e = 0; e < exemplars.size(); ++e) c[static_cast<std::size_t>(exemplars[e])] = static_cast<int>(e);
    return c;
  };
  Labels c = assign(ex);
  // Refine each exemplar to the member with the largest summed similarity.
  for (std::size_t e = 0; e < ex.size(); ++e) {
    std::vector<Index> members;
    for (Index i = 0; i < n; ++i) {
      if (c[static_cast<std::size_t>(i)] == static_cast<int>(e)) members.push_back(i);
    }
    double best = -std::numeric_limits<double>::infinity();
    for (Index j : members) {
      double tot = 0.0;
      for (Index i : members) tot += s(i, j);
      if (tot > best) {
        best = tot;
        ex[e] = static_cast<int>(j);
      }
    }
  }
  c = assign(ex);
  res.labels = compact_labels(c);
  res.exemplars = ex;
  res.converged = true;
  return res;
}

Labels agglomerative(const Matrix<double>& points, const AgglomerativeOptions& opt) {
  const Index n = points.rows();
  if (n == 0) return {};
  const Matrix<double> unit = normalize_rows(points);
  Matrix<double> dist = 1.0 - (unit * unit.transpose()).array();
  std::vector<int> size(static_cast<std::size_t>(n), 1);
  std::vector<bool> alive(static_cast<std::size_t>(n), true);
  std::vector<int> parent(static_cast<std::size_t>(n));
  std::iota(parent.begin(), parent.end(), 0);
  for (Index step = 0; step + 1 < n; ++step) {
    double best = std::numeric_limits<double>::infinity();
    Index bi = -1, bj = -1;
    for (Index i = 0; i < n; ++i) {
      if (!alive[static_cast<std::size_t>(i)]) continue;
      for (Index j = i + 1; j < n; ++j) {
        if (alive[static_cast<std::size_t>(j)] && dist(i, j) < best) {
          best = dist(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    if (bi < 0 || !(best < opt.distance_threshold)) break;
    const double na = size[static_cast<std::size_t>(bi)], nb = size[static_cast<std::size_t>(bj)];
    for (Index k = 0; k < n; ++k) {
      if (!alive[static_cast<std::size_t>(k)] || k == bi || k == bj) continue;
      const double d = (na * dist(bi, k) + nb * dist(bj, k)) / (na + nb);
      dist(bi, k) = d;
      dist(k, bi) = d;
    }
    size[static_cast<std::size_t>(bi)] += size[static_cast<std::size_t>(bj)];
    alive[static_cast<std::size_t>(bj)] = false;
    parent[static_cast<std::size_t>(bj)] = static_cast<int>(bi);
  }
  Labels labels(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    int root = static_cast<int>(i);
    while (parent[static_cast<std::size_t>(root)] != root) root = parent[static_cast<std::size_t>(root)];
    labels[static_cast<std::size_t>(i)] = root;
  }
  return compact_labels(labels);
}

BaselineMethod parse_baseline_method(const std::string& name) {
  if (name == "kmeans") return BaselineMethod::kKMeans;
  if (name == "spectral") return BaselineMethod::kSpectral;
  if (name == "affinity-propagation" || name == "ap") return BaselineMethod::kAffinityPropagation;
  if (name == "agglomerative") return BaselineMethod::kAgglomerative;
  throw std::invalid_argument("unknown baseline method '" + name + "'");
}

std::string to_string(BaselineMethod m) {
  switch (m) {
    case BaselineMethod::kKMeans: return "kmeans";
    case BaselineMethod::kSpectral: return "spectral";
    case BaselineMethod::kAffinityPropagation: return "affinity-propagation";
    case BaselineMethod::kAgglomerative: return "agglomerative";
  }
  return "unknown";
}

BaselineResult cluster_image(const Matrix<double>& points, const BaselineConfig& cfg) {
  BaselineResult r;
  switch (cfg.method) {
    case BaselineMethod::kKMeans:
      r.labels = kmeans(points, cfg.kmeans).labels;
      break;
    case BaselineMethod::kSpectral:
      r.labels = spectral_cluster(points, cfg.spectral);
      break;
    case BaselineMethod::kAffinityPropagation: {
      auto ap = affinity_propagation(points, cfg.affinity_propagation);
      r.labels = std::move(ap.labels);
      r.flagged = !ap.converged;
      break;
    }
    case BaselineMethod::kAgglomerative:
      r.labels = agglomerative(points, cfg.agglomerative);
      break;
  }
  return r;
}

Labels compact_labels(const Labels& labels) {
  std::map<int, int> seen;
  Labels out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out[i] = seen.emplace(labels[i], static_cast<int>(seen.size())).first->second;
  }
  return out;
}

}  // namespace acseg
