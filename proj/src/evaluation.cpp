#include "acseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "acseg/classifier.hpp"

namespace acseg {
namespace {

// Shortest-augmenting-path Hungarian algorithm with potentials, O(n^2 m),
// for n <= m. Returns the column assigned to each row.
std::vector<int> solve_rows_le_cols(const Matrix<double>& a) {
  const int n = static_cast<int>(a.rows());
  const int m = static_cast<int>(a.cols());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
  std::vector<int> p(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
    std::vector<bool> used(static_cast<std::size_t>(m + 1), false);
    do {
      used[static_cast<std::size_t>(j0)] = true;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = a(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j) {
    if (p[static_cast<std::size_t>(j)] != 0) row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  }
  return row_to_col;
}

struct Compact {
  std::map<std::int32_t, int> index;
  int add(std::int32_t v) { return index.emplace(v, static_cast<int>(index.size())).first->second; }
};

}  // namespace

Matching hungarian_min_cost(const Matrix<double>& cost) {
  if (cost.size() == 0) throw std::invalid_argument("hungarian: empty cost matrix");
  if (!cost.allFinite()) throw std::invalid_argument("hungarian: non-finite cost");
  Matching out;
  if (cost.rows() <= cost.cols()) {
    out.row_to_col = solve_rows_le_cols(cost);
  } else {
    const std::vector<int> col_to_row = solve_rows_le_cols(cost.transpose());
    out.row_to_col.assign(static_cast<std::size_t>(cost.rows()), -1);
    for (std::size_t c = 0; c < col_to_row.size(); ++c) {
      out.row_to_col[static_cast<std::size_t>(col_to_row[c])] = static_cast<int>(c);
    }
  }
  for (std::size_t r = 0; r < out.row_to_col.size(); ++r) {
    if (out.row_to_col[r] >= 0) out.total += cost(static_cast<Index>(r), out.row_to_col[r]);
  }
  return out;
}

Matching hungarian_match(const Matrix<double>& score) {
  if (score.size() == 0) throw std::invalid_argument("hungarian: empty score matrix");
  Matching m = hungarian_min_cost(-score);
  m.total = -m.total;
  return m;
}

ConfusionMatrix::ConfusionMatrix(int pred_classes, int gt_classes)
    : counts_(Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(pred_classes, gt_classes)) {}

void ConfusionMatrix::add(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gt,
                          std::int32_t ignore_index) {
  if (pred.size() != gt.size()) {
    throw ShapeError("confusion: prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                     std::to_string(gt.size()));
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt[i] == ignore_index) continue;
    if (pred[i] < 0 || pred[i] >= pred_classes() || gt[i] < 0 || gt[i] >= gt_classes()) {
      throw std::out_of_range("confusion: label out of range at pixel " + std::to_string(i));
    }
    ++counts_(pred[i], gt[i]);
    ++total_;
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.counts_.rows() != counts_.rows() || other.counts_.cols() != counts_.cols()) {
    throw ShapeError("confusion: merge of differently sized matrices");
  }
  counts_ += other.counts_;
  total_ += other.total_;
}

SegmentationScores scores_from_confusion(const ConfusionMatrix& cm) {
  const int c = cm.gt_classes();
  if (cm.pred_classes() != c) throw ShapeError("scores_from_confusion: confusion must be square");
  SegmentationScores s;
  s.iou.assign(static_cast<std::size_t>(c), std::numeric_limits<double>::quiet_NaN());
  s.present.assign(static_cast<std::size_t>(c), false);
  double sum = 0.0;
  int used = 0;
  std::int64_t correct = 0;
  for (int k = 0; k < c; ++k) {
    const std::int64_t tp = cm.at(k, k);
    const std::int64_t pred_total = cm.counts().row(k).sum();
    const std::int64_t gt_total = cm.counts().col(k).sum();
    correct += tp;
    const std::int64_t uni = pred_total + gt_total - tp;
    if (uni == 0) continue;
    s.present[static_cast<std::size_t>(k)] = true;
    s.iou[static_cast<std::size_t>(k)] = static_cast<double>(tp) / static_cast<double>(uni);
    sum += s.iou[static_cast<std::size_t>(k)];
    ++used;
  }
  s.mean_iou = used > 0 ? sum / used : 0.0;
  s.pixel_accuracy = cm.total() > 0 ? static_cast<double>(correct) / static_cast<double>(cm.total()) : 0.0;
  return s;
}

SegmentationScores miou(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gt, int num_classes,
                        std::int32_t ignore_index) {
  ConfusionMatrix cm(num_classes, num_classes);
  cm.add(pred, gt, ignore_index);
  return scores_from_confusion(cm);
}

std::vector<int> cluster_to_class(const ConfusionMatrix& cm) {
  return hungarian_match(cm.counts().cast<double>()).row_to_col;
}

double matched_pixel_accuracy(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gt,
                              std::int32_t ignore_index) {
  if (pred.size() != gt.size()) throw ShapeError("matched_pixel_accuracy: size mismatch");
  Compact pc, gc;
  std::vector<std::int32_t> p, g;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt[i] == ignore_index) continue;
    p.push_back(pc.add(pred[i]));
    g.push_back(gc.add(gt[i]));
  }
  if (p.empty()) return 0.0;
  ConfusionMatrix cm(static_cast<int>(pc.index.size()), static_cast<int>(gc.index.size()));
  cm.add(p, g, -1);
  const Matching m = hungarian_match(cm.counts().cast<double>());
  return m.total / static_cast<double>(cm.total());
}

ClusterEvaluation evaluate_clusters(const std::vector<std::vector<std::int32_t>>& preds,
                                    const std::vector<std::vector<std::int32_t>>& gts, int num_clusters,
                                    int num_classes, std::int32_t ignore_index) {
  if (preds.size() != gts.size()) throw ShapeError("evaluate_clusters: prediction/ground-truth count mismatch");
  ConfusionMatrix cm(num_clusters, num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) cm.add(preds[i], gts[i], ignore_index);
  ClusterEvaluation ev;
  ev.mapping = cluster_to_class(cm);

  // Pixels of unmatched clusters stay in their class's ground-truth total and
  // therefore count as misses.
  std::vector<std::int64_t> tp(static_cast<std::size_t>(num_classes), 0), predicted(tp), truth(tp);
  for (int p = 0; p < num_clusters; ++p) {
    const int cls = ev.mapping[static_cast<std::size_t>(p)];
    for (int g = 0; g < num_classes; ++g) {
      truth[static_cast<std::size_t>(g)] += cm.at(p, g);
      if (cls < 0) continue;
      predicted[static_cast<std::size_t>(cls)] += cm.at(p, g);
      if (cls == g) tp[static_cast<std::size_t>(g)] += cm.at(p, g);
    }
  }
  auto& s = ev.scores;
  s.iou.assign(static_cast<std::size_t>(num_classes), std::numeric_limits<double>::quiet_NaN());
  s.present.assign(static_cast<std::size_t>(num_classes), false);
  double sum = 0.0;
  int used = 0;
  std::int64_t correct = 0;
  for (std::size_t g = 0; g < tp.size(); ++g) {
    correct += tp[g];
    const std::int64_t uni = predicted[g] + truth[g] - tp[g];
    if (uni == 0) continue;
    s.present[g] = true;
    s.iou[g] = static_cast<double>(tp[g]) / static_cast<double>(uni);
    sum += s.iou[g];
    ++used;
  }
  s.mean_iou = used > 0 ? sum / used : 0.0;
  s.pixel_accuracy = cm.total() > 0 ? static_cast<double>(correct) / static_cast<double>(cm.total()) : 0.0;
  return ev;
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd r;
  if (values.empty()) return r;
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.stddev = std::sqrt(ss / static_cast<double>(values.size()));
  return r;
}

SegmentationScores retrieval_protocol(const Matrix<double>& bank, const Labels& bank_labels,
                                      const std::vector<RetrievalImage>& images, int k, int num_classes,
                                      std::int32_t ignore_index) {
  ConfusionMatrix cm(num_classes, num_classes);
  for (const auto& img : images) {
    const ClassPrediction pred = knn_classify(img.embeddings, bank, bank_labels, k, num_classes);
    cm.add(broadcast_classes(img.regions, pred.classes), img.gt, ignore_index);
  }
  return scores_from_confusion(cm);
}

}  // namespace acseg
