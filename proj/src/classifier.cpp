#include "acseg/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "acseg/assignment.hpp"
#include "acseg/baselines.hpp"

namespace acseg {
namespace {

void check_regions(const Labels& regions, int num_regions, const char* op) {
  for (int r : regions) {
    if (r < 0 || r >= num_regions) {
      throw std::out_of_range(std::string(op) + ": region id " + std::to_string(r) + " outside [0, " +
                              std::to_string(num_regions) + ")");
    }
  }
}

}  // namespace

std::vector<double> foreground_scores(const MatrixF& attention, const Labels& regions, int num_regions,
                                      ScoreMode mode) {
  if (attention.rows() == 0) throw std::invalid_argument("foreground_scores: no attention heads");
  if (attention.cols() != static_cast<Index>(regions.size())) {
    throw ShapeError("foreground_scores: attention covers " + std::to_string(attention.cols()) + " pixels, assignment " +
                     std::to_string(regions.size()));
  }
  check_regions(regions, num_regions, "foreground_scores");
  std::vector<double> score(static_cast<std::size_t>(num_regions), 0.0);
  std::vector<int> count(static_cast<std::size_t>(num_regions), 0);
  for (std::size_t i = 0; i < regions.size(); ++i) {
    score[static_cast<std::size_t>(regions[i])] += attention.col(static_cast<Index>(i)).minCoeff();
    ++count[static_cast<std::size_t>(regions[i])];
  }
  if (mode == ScoreMode::kMean) {
    for (std::size_t r = 0; r < score.size(); ++r) {
      if (count[r] > 0) score[r] /= count[r];
    }
  }
  return score;
}

BackgroundSplit split_background(const std::vector<double>& scores) {
  BackgroundSplit out;
  out.background.assign(scores.size(), false);
  if (scores.size() < 2) return out;
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  double lo = *lo_it, hi = *hi_it;
  if (lo == hi) {
    out.degenerate = true;
    return out;
  }
  std::vector<bool> low(scores.size());
  for (int it = 0; it < 100; ++it) {
    bool changed = false;
    double sum_lo = 0, sum_hi = 0;
    int n_lo = 0, n_hi = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool l = std::abs(scores[i] - lo) <= std::abs(scores[i] - hi);
      changed = changed || it == 0 || l != low[i];
      low[i] = l;
      (l ? sum_lo : sum_hi) += scores[i];
      ++(l ? n_lo : n_hi);
    }
    if (!changed) break;
    lo = sum_lo / n_lo;
    hi = sum_hi / n_hi;
  }
  out.background = low;
  return out;
}

std::vector<Labels> kmeans_classify(const Matrix<double>& embeddings, const KMeansClassifyOptions& opt) {
  if (opt.num_classes < 1) throw std::invalid_argument("kmeans_classify: num_classes must be >= 1");
  if (embeddings.rows() < opt.num_classes) {
    throw std::invalid_argument("kmeans_classify: " + std::to_string(embeddings.rows()) + " regions for " +
                                std::to_string(opt.num_classes) + " classes");
  }
  const Matrix<double> points = opt.normalize ? normalize_rows(embeddings) : embeddings;
  std::vector<Labels> runs;
  for (int r = 0; r < opt.runs; ++r) {
    KMeansOptions ko;
    ko.clusters = opt.num_classes;
    ko.restarts = 1;
    ko.seed = opt.seed + static_cast<std::uint64_t>(r);
    runs.push_back(kmeans(points, ko).labels);
  }
  return runs;
}

ClassPrediction knn_classify(const Matrix<double>& queries, const Matrix<double>& bank, const Labels& bank_labels,
                             int k, int num_classes) {
  if (bank.rows() == 0) throw std::invalid_argument("knn_classify: empty bank");
  if (static_cast<Index>(bank_labels.size()) != bank.rows()) throw ShapeError("knn_classify: bank label count");
  if (queries.cols() != bank.cols()) {
    throw ShapeError("knn_classify: query dim " + std::to_string(queries.cols()) + " vs bank dim " +
                     std::to_string(bank.cols()));
  }
  if (k < 1) throw std::invalid_argument("knn_classify: K must be >= 1");
  for (int l : bank_labels) {
    if (l < 0 || l >= num_classes) throw std::out_of_range("knn_classify: bank label " + std::to_string(l));
  }
  ClassPrediction out;
  if (k > bank.rows()) {
    out.clamped = true;
    k = static_cast<int>(bank.rows());
  }
  const Matrix<double> sim = normalize_rows(queries) * normalize_rows(bank).transpose();
  std::vector<Index> order(static_cast<std::size_t>(bank.rows()));
  for (Index q = 0; q < queries.rows(); ++q) {
    std::iota(order.begin(), order.end(), Index{0});
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
      return sim(q, a) > sim(q, b) || (sim(q, a) == sim(q, b) && a < b);
    });
    std::vector<double> vote(static_cast<std::size_t>(num_classes), 0.0);
    for (int j = 0; j < k; ++j) vote[static_cast<std::size_t>(bank_labels[static_cast<std::size_t>(order[j])])] += sim(q, order[j]);
    const auto best = std::max_element(vote.begin(), vote.end());
    out.classes.push_back(static_cast<int>(best - vote.begin()));
    out.tied.push_back(std::count(vote.begin(), vote.end(), *best) > 1);
  }
  return out;
}

ClassPrediction text_classify(const Matrix<double>& regions, const Matrix<double>& class_embeddings) {
  if (class_embeddings.rows() == 0) throw std::invalid_argument("text_classify: no classes");
  if (regions.cols() != class_embeddings.cols()) {
    throw ShapeError("text_classify: region dim " + std::to_string(regions.cols()) + " vs class dim " +
                     std::to_string(class_embeddings.cols()));
  }
  const Matrix<double> sim = normalize_rows(regions) * normalize_rows(class_embeddings).transpose();
  ClassPrediction out;
  for (Index r = 0; r < sim.rows(); ++r) {
    Index best = 0;
    sim.row(r).maxCoeff(&best);  // first maximum
    out.classes.push_back(static_cast<int>(best));
    out.tied.push_back((sim.row(r).array() == sim(r, best)).count() > 1);
  }
  return out;
}

std::vector<std::int32_t> broadcast_classes(const Labels& regions, const std::vector<int>& region_class) {
  check_regions(regions, static_cast<int>(region_class.size()), "broadcast_classes");
  std::vector<std::int32_t> out(regions.size());
  for (std::size_t i = 0; i < regions.size(); ++i) out[i] = region_class[static_cast<std::size_t>(regions[i])];
  return out;
}

Matrix<double> average_region_embeddings(const Matrix<double>& features, const Labels& regions, int num_regions) {
  if (features.rows() != static_cast<Index>(regions.size())) throw ShapeError("average_region_embeddings: pixel count");
  check_regions(regions, num_regions, "average_region_embeddings");
  Matrix<double> out = Matrix<double>::Zero(num_regions, features.cols());
  std::vector<int> count(static_cast<std::size_t>(num_regions), 0);
  for (std::size_t i = 0; i < regions.size(); ++i) {
    out.row(regions[i]) += features.row(static_cast<Index>(i));
    ++count[static_cast<std::size_t>(regions[i])];
  }
  for (int r = 0; r < num_regions; ++r) {
    if (count[static_cast<std::size_t>(r)] > 0) out.row(r) /= count[static_cast<std::size_t>(r)];
  }
  return out;
}

std::vector<int> region_majority_labels(const Labels& regions, const std::vector<std::int32_t>& gt, int num_regions,
                                        int num_classes, std::int32_t ignore_index) {
  if (regions.size() != gt.size()) throw ShapeError("region_majority_labels: size mismatch");
  check_regions(regions, num_regions, "region_majority_labels");
  Eigen::MatrixXi overlap = Eigen::MatrixXi::Zero(num_regions, num_classes);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore_index) continue;
    if (gt[i] < 0 || gt[i] >= num_classes) throw std::out_of_range("region_majority_labels: class " + std::to_string(gt[i]));
    ++overlap(regions[i], gt[i]);
  }
  std::vector<int> out(static_cast<std::size_t>(num_regions), -1);
  for (int r = 0; r < num_regions; ++r) {
    Index best = 0;
    if (overlap.row(r).maxCoeff(&best) > 0) out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

Matrix<double> region_matrix(const std::vector<RegionEmbedding>& regions) {
  if (regions.empty()) return {};
  const auto dim = static_cast<Index>(regions.front().embedding.size());
  Matrix<double> out(static_cast<Index>(regions.size()), dim);
  for (std::size_t r = 0; r < regions.size(); ++r) {
    if (static_cast<Index>(regions[r].embedding.size()) != dim) throw ShapeError("region_matrix: ragged embeddings");
    for (Index c = 0; c < dim; ++c) out(static_cast<Index>(r), c) = regions[r].embedding[static_cast<std::size_t>(c)];
  }
  return out;
}

}  // namespace acseg
