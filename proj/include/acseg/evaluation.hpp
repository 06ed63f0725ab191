#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "acseg/feature_map.hpp"
#include "acseg/types.hpp"

namespace acseg {

struct Matching {
  std::vector<int> row_to_col;  // -1 for rows left unmatched (more rows than columns)
  double total = 0.0;           // objective summed over matched pairs
};

// Optimal one-to-one assignment minimizing total cost; rectangular inputs
// match min(rows, cols) pairs.
Matching hungarian_min_cost(const Matrix<double>& cost);

// Optimal one-to-one assignment maximizing total score (e.g. overlap counts).
Matching hungarian_match(const Matrix<double>& score);

// Predicted-cluster x ground-truth-class pixel counts.
class ConfusionMatrix {
 public:
  ConfusionMatrix(int pred_classes, int gt_classes);

  // Pixels whose ground truth equals `ignore_index` are skipped.
  void add(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gt,
           std::int32_t ignore_index = kIgnoreLabel);
  void merge(const ConfusionMatrix& other);

  int pred_classes() const { return static_cast<int>(counts_.rows()); }
  int gt_classes() const { return static_cast<int>(counts_.cols()); }
  std::int64_t total() const { return total_; }
  std::int64_t at(int pred, int gt) const { return counts_(pred, gt); }
  const Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>& counts() const { return counts_; }

 private:
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts_;
  std::int64_t total_ = 0;
};

struct SegmentationScores {
  std::vector<double> iou;       // per class; NaN where the class is absent from both
  std::vector<bool> present;
  double mean_iou = 0.0;
  double pixel_accuracy = 0.0;
};

// Scores for a square confusion where prediction index c means class c.
SegmentationScores scores_from_confusion(const ConfusionMatrix& cm);

// IoU_c = TP / (TP + FP + FN), averaged over classes present in ground truth
// or prediction. Labels outside [0, num_classes) other than the ignore index
// are rejected.
SegmentationScores miou(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gt, int num_classes,
                        std::int32_t ignore_index = kIgnoreLabel);

// Maps each predicted cluster to a ground-truth class by Hungarian matching on
// overlap; unmatched clusters map to -1.
std::vector<int> cluster_to_class(const ConfusionMatrix& cm);

// Fraction of evaluated pixels whose matched cluster equals their class.
double matched_pixel_accuracy(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gt,
                              std::int32_t ignore_index = kIgnoreLabel);

// Clusters matched to classes across a dataset, then scored as semantic
// segmentation.
struct ClusterEvaluation {
  std::vector<int> mapping;
  SegmentationScores scores;
};

ClusterEvaluation evaluate_clusters(const std::vector<std::vector<std::int32_t>>& preds,
                                    const std::vector<std::vector<std::int32_t>>& gts, int num_clusters,
                                    int num_classes, std::int32_t ignore_index = kIgnoreLabel);

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;
};

MeanStd mean_std(const std::vector<double>& values);

// One validation image for the retrieval protocol: region embeddings indexed
// by the region ids of `regions`, plus ground truth at the same resolution.
struct RetrievalImage {
  Matrix<double> embeddings;
  Labels regions;
  std::vector<std::int32_t> gt;
};

// k-NN labels every region from the bank, broadcasts to pixels and scores
// the whole set as one confusion.
SegmentationScores retrieval_protocol(const Matrix<double>& bank, const Labels& bank_labels,
                                      const std::vector<RetrievalImage>& images, int k, int num_classes,
                                      std::int32_t ignore_index = kIgnoreLabel);

}  // namespace acseg
