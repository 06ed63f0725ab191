#pragma once

// Concept classification: background detection from class-token attention,
// then unsupervised (k-means) or supervised (weighted k-NN, text prototypes)
// labelling of foreground region embeddings.

#include <cstdint>
#include <vector>

#include "acseg/feature_map.hpp"
#include "acseg/types.hpp"

namespace acseg {

enum class ScoreMode { kSum, kMean };

// score_r = sum over pixels i in region r of min_h attention(h, i); kMean
// divides by the region's pixel count. `regions` holds one id in
// [0, num_regions) per pixel.
std::vector<double> foreground_scores(const MatrixF& attention, const Labels& regions, int num_regions,
                                      ScoreMode mode = ScoreMode::kSum);

struct BackgroundSplit {
  std::vector<bool> background;  // per region
  bool degenerate = false;       // identical scores: everything kept as foreground
};

// Two-means on the 1-D scores, seeded at the minimum and maximum; the
// lower-mean group is background.
BackgroundSplit split_background(const std::vector<double>& scores);

struct ClassPrediction {
  Labels classes;          // per query
  std::vector<bool> tied;  // best score shared by several classes
  bool clamped = false;    // k-NN: K exceeded the bank size
};

struct KMeansClassifyOptions {
  int num_classes = 20;
  int runs = 10;
  bool normalize = true;  // L2-normalize embeddings before clustering
  std::uint64_t seed = 0;
};

// One pseudo-class labelling per run, each from an independently seeded
// k-means.
std::vector<Labels> kmeans_classify(const Matrix<double>& embeddings, const KMeansClassifyOptions& opt);

// Similarity-weighted vote of the K most cosine-similar bank entries.
ClassPrediction knn_classify(const Matrix<double>& queries, const Matrix<double>& bank, const Labels& bank_labels,
                             int k, int num_classes);

// Class with the largest cosine similarity; ties go to the lowest index.
ClassPrediction text_classify(const Matrix<double>& regions, const Matrix<double>& class_embeddings);

// Per-pixel classes from per-region classes.
std::vector<std::int32_t> broadcast_classes(const Labels& regions, const std::vector<int>& region_class);

// Mean embedding of each region's pixels; rows of empty regions are zero.
Matrix<double> average_region_embeddings(const Matrix<double>& features, const Labels& regions, int num_regions);

// Ground-truth class overlapping each region the most (-1 when the region
// covers only ignored pixels).
std::vector<int> region_majority_labels(const Labels& regions, const std::vector<std::int32_t>& gt, int num_regions,
                                        int num_classes, std::int32_t ignore_index = kIgnoreLabel);

Matrix<double> region_matrix(const std::vector<RegionEmbedding>& regions);

}  // namespace acseg
