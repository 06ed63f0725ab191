#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "acseg/types.hpp"

namespace acseg {

struct KMeansOptions {
  int clusters = 5;
  int restarts = 10;
  int max_iterations = 300;
  double tolerance = 1e-4;  // relative to the mean per-feature variance
  std::uint64_t seed = 0;
};

struct KMeansResult {
  Labels labels;
  Matrix<double> centers;
  double inertia = 0.0;               // within-cluster sum of squares
  int iterations = 0;
  std::vector<double> inertia_trace;  // per Lloyd iteration of the best restart
};

// Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs by
// inertia is returned.
KMeansResult kmeans(const Matrix<double>& points, const KMeansOptions& opt);

enum class SpectralAffinity { kClampedCosine, kRbf };

struct SpectralOptions {
  int clusters = 5;
  int components = 5;
  SpectralAffinity affinity = SpectralAffinity::kClampedCosine;
  double rbf_gamma = 1.0;
  std::uint64_t seed = 0;
};

// Spectral embedding of an affinity matrix: eigenvectors of the symmetric
// normalized Laplacian I - D^-1/2 A D^-1/2 for the smallest eigenvalues,
// rescaled by D^-1/2.
Matrix<double> spectral_embedding(const Matrix<double>& affinity, int components);

Labels spectral_cluster_graph(const Matrix<double>& affinity, const SpectralOptions& opt);
Labels spectral_cluster(const Matrix<double>& points, const SpectralOptions& opt);

struct AffinityPropagationOptions {
  double damping = 0.5;
  double preference = -2.0;
  int max_iterations = 200;
  int convergence_iterations = 15;
};

struct AffinityPropagationResult {
  Labels labels;
  std::vector<int> exemplars;
  bool converged = false;
};

// Similarities are negative squared distances between L2-normalized
// embeddings, 2 cos - 2. Without convergence every point joins one cluster.
AffinityPropagationResult affinity_propagation(const Matrix<double>& points, const AffinityPropagationOptions& opt);

struct AgglomerativeOptions {
  double distance_threshold = 0.65;  // on cosine distance 1 - cos
};

// Average-linkage agglomeration; merging stops at the first pair whose
// linkage distance reaches the threshold.
Labels agglomerative(const Matrix<double>& points, const AgglomerativeOptions& opt);

enum class BaselineMethod { kKMeans, kSpectral, kAffinityPropagation, kAgglomerative };

BaselineMethod parse_baseline_method(const std::string& name);
std::string to_string(BaselineMethod m);

struct BaselineConfig {
  BaselineMethod method = BaselineMethod::kKMeans;
  KMeansOptions kmeans;
  SpectralOptions spectral;
  AffinityPropagationOptions affinity_propagation;
  AgglomerativeOptions agglomerative;
};

struct BaselineResult {
  Labels labels;
  bool flagged = false;  // e.g. affinity propagation did not converge
};

BaselineResult cluster_image(const Matrix<double>& points, const BaselineConfig& cfg);

// Relabels to 0..m-1 in order of first appearance.
Labels compact_labels(const Labels& labels);

}  // namespace acseg
