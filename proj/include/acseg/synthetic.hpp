#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "acseg/feature_map.hpp"

namespace acseg {

// Generator for images whose pixel embeddings form a known number of
// well-separated clusters laid out as contiguous spatial blobs.
struct SyntheticSpec {
  int min_clusters = 2;
  int max_clusters = 4;
  int dim = 32;
  GridSize grid{8, 8};
  double max_center_cosine = 0.3;  // centers pairwise below this cosine
  double noise_std = 0.02;         // per-coordinate Gaussian noise on unit-norm centers
  double feature_scale = 1.0;      // multiplies every embedding; 0 selects sqrt(dim)
  int min_blob_pixels = 0;         // 0 selects grid.count() / (2 * clusters)
  int num_classes = 0;             // > 0: centers drawn from a shared class bank
  double class_jitter = 0.0;       // per-image perturbation of bank centers
  bool antipodal = false;          // two-cluster images use c and -c
  int attention_heads = 0;         // > 0: emit a synthetic class-token attention map
  int label_upscale = 1;           // ground truth at grid * label_upscale
  int max_retries = 1000;
  std::uint64_t seed = 1;

  // Expected center distance over expected noise norm.
  double separation_to_noise() const;
  double scale() const;
  void validate() const;
};

// Unit vectors with pairwise cosine below `max_cosine`, or throws after the
// retry bound.
MatrixF sample_centers(int count, int dim, double max_cosine, std::uint64_t seed, int max_retries = 1000);

// Image `index` of the stream defined by `spec`; independent of how many other
// images are drawn.
FeatureMap generate_synthetic_image(const SyntheticSpec& spec, int index);

std::vector<FeatureMap> generate_synthetic(const SyntheticSpec& spec, int count, int first_index = 0);

// Number of distinct ground-truth labels.
int true_cluster_count(const FeatureMap& fm);

}  // namespace acseg
