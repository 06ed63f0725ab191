#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "acseg/baselines.hpp"
#include "acseg/classifier.hpp"
#include "acseg/dataio.hpp"
#include "acseg/evaluation.hpp"
#include "acseg/synthetic.hpp"
#include "acseg/trainer.hpp"

using namespace acseg;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------- datasets

struct Dataset {
  std::string manifest_path;
  Manifest manifest;
  std::vector<std::string> paths;

  FeatureMap load(std::size_t i) const { return read_feature_file(paths.at(i)); }
  std::size_t size() const { return paths.size(); }

  std::vector<std::int32_t> ground_truth(const FeatureMap& fm) const {
    return manifest.remap.empty() ? fm.labels : manifest.remap_labels(fm.labels);
  }
};

// Accepts a manifest file or a directory holding manifest.txt.
Dataset open_dataset(const std::string& where) {
  Dataset d;
  d.manifest_path = fs::is_directory(where) ? (fs::path(where) / "manifest.txt").string() : where;
  d.manifest = read_manifest(d.manifest_path);
  d.paths = manifest_image_paths(d.manifest_path, d.manifest);
  if (d.paths.empty()) throw std::runtime_error(d.manifest_path + ": no images listed");
  return d;
}

std::vector<FeatureMap> load_all(const Dataset& d) {
  std::vector<FeatureMap> out;
  out.reserve(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out.push_back(d.load(i));
  return out;
}

int class_count(const Dataset& d, const std::vector<std::vector<std::int32_t>>& gts) {
  if (d.manifest.num_classes() > 0) return d.manifest.num_classes();
  std::int32_t hi = -1;
  for (const auto& g : gts)
    for (auto l : g)
      if (l != d.manifest.ignore_index) hi = std::max(hi, l);
  return hi + 1;
}

std::string file_stem(const std::string& id) {
  std::string s = id;
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

std::string pred_path(const std::string& dir, const std::string& id) {
  return (fs::path(dir) / (file_stem(id) + ".aclm")).string();
}

std::vector<std::int32_t> read_prediction(const std::string& dir, const FeatureMap& fm) {
  GridSize g;
  auto labels = read_label_map(pred_path(dir, fm.id), &g);
  if (!(g == fm.label_grid())) {
    throw ShapeError("prediction for " + fm.id + " is " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                     ", ground truth grid differs");
  }
  return labels;
}

void write_prediction(const std::string& dir, const FeatureMap& fm, const Labels& hard, bool pgm) {
  const std::vector<std::int32_t> labels(hard.begin(), hard.end());
  write_label_map(pred_path(dir, fm.id), labels, fm.label_grid());
  if (pgm) write_pgm((fs::path(dir) / (file_stem(fm.id) + ".pgm")).string(), labels, fm.label_grid());
}

// ----------------------------------------------------------------- reports

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json scores_json(const SegmentationScores& s) {
  json iou = json::array();
  for (std::size_t c = 0; c < s.iou.size(); ++c) iou.push_back(s.present[c] ? json(s.iou[c]) : json(nullptr));
  return {{"miou", s.mean_iou}, {"pixel_accuracy", s.pixel_accuracy}, {"per_class_iou", iou}};
}

// One row per class; with several runs, mean and std across them.
std::string iou_csv(const std::vector<std::vector<double>>& runs, const std::vector<std::string>& names) {
  const bool single = runs.size() == 1;
  std::ostringstream os;
  os << (single ? "class,name,iou\n" : "class,name,iou_mean,iou_std\n");
  char buf[96];
  for (std::size_t c = 0; c < runs.front().size(); ++c) {
    std::vector<double> v;
    for (const auto& r : runs)
      if (!std::isnan(r[c])) v.push_back(r[c]);
    os << c << "," << (c < names.size() ? names[c] : "") << ",";
    if (v.empty()) {
      os << (single ? "\n" : ",\n");
      continue;
    }
    const auto m = mean_std(v);
    if (single) {
      std::snprintf(buf, sizeof buf, "%.17g", m.mean);
    } else {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g", m.mean, m.stddev);
    }
    os << buf << "\n";
  }
  return os.str();
}

std::vector<double> present_iou(const SegmentationScores& s) {
  std::vector<double> out(s.iou.size());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = s.present[c] ? s.iou[c] : std::nan("");
  return out;
}

// Snapshot of every flag of the invoked subcommand, readable back with --config.
void snapshot(const CLI::App& app, const fs::path& dir) {
  std::string out;
  for (const auto* sub : app.get_subcommands()) out += "[" + sub->get_name() + "]\n" + sub->config_to_str(true, false);
  fs::create_directories(dir);
  write_text((dir / "config.toml").string(), out);
}

// Concept id per feature-grid pixel, sampled at pixel centres from a label
// map at the label resolution.
Labels sample_to_grid(const std::vector<std::int32_t>& labels, GridSize from, GridSize grid) {
  Labels out(static_cast<std::size_t>(grid.count()));
  for (int y = 0; y < grid.height; ++y) {
    const int sy = std::min(from.height - 1, static_cast<int>((y + 0.5) * from.height / grid.height));
    for (int x = 0; x < grid.width; ++x) {
      const int sx = std::min(from.width - 1, static_cast<int>((x + 0.5) * from.width / grid.width));
      out[static_cast<std::size_t>(y * grid.width + x)] = labels[static_cast<std::size_t>(sy * from.width + sx)];
    }
  }
  return out;
}

// Active concepts of one predicted image with their embeddings and
// foreground scores. Region rows follow the sorted concept ids.
struct ImageRegions {
  std::vector<int> concepts;
  Labels regions;  // per label-grid pixel, row into `embeddings`
  Matrix<double> embeddings;
  std::vector<double> scores;
  std::vector<int> labels;  // ground-truth class per region, -1 when unknown
};

ImageRegions collect_regions(const FeatureMap& fm, const std::vector<std::int32_t>& pred,
                             const std::vector<std::int32_t>& gt, int num_classes, std::int32_t ignore) {
  ImageRegions r;
  std::set<int> ids(pred.begin(), pred.end());
  r.concepts.assign(ids.begin(), ids.end());
  std::map<int, int> row;
  for (std::size_t i = 0; i < r.concepts.size(); ++i) row[r.concepts[i]] = static_cast<int>(i);
  const int m = static_cast<int>(r.concepts.size());
  r.regions.resize(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) r.regions[i] = row.at(pred[i]);

  Labels grid_regions = sample_to_grid(std::vector<std::int32_t>(r.regions.begin(), r.regions.end()),
                                       fm.label_grid(), fm.grid);
  const Matrix<double> averaged = average_region_embeddings(fm.features.cast<double>(), grid_regions, m);
  std::map<int, const RegionEmbedding*> supplied;
  for (const auto& reg : fm.regions) supplied[reg.concept_id] = &reg;

  const int dim = fm.regions.empty() ? fm.dim() : static_cast<int>(fm.regions.front().embedding.size());
  r.embeddings.resize(m, dim);
  r.scores.assign(static_cast<std::size_t>(m), 0.0);
  r.labels.assign(static_cast<std::size_t>(m), -1);
  const bool have_scores = !fm.regions.empty() || fm.has_attention();
  std::vector<double> attention_scores;
  if (fm.regions.empty() && fm.has_attention()) attention_scores = foreground_scores(fm.attention, grid_regions, m);
  const auto majority = gt.empty() ? std::vector<int>(static_cast<std::size_t>(m), -1)
                                   : region_majority_labels(r.regions, gt, m, num_classes, ignore);
  for (int i = 0; i < m; ++i) {
    const auto it = supplied.find(r.concepts[static_cast<std::size_t>(i)]);
    if (it != supplied.end()) {
      const auto& e = it->second->embedding;
      for (int j = 0; j < dim; ++j) r.embeddings(i, j) = e[static_cast<std::size_t>(j)];
      r.scores[static_cast<std::size_t>(i)] = it->second->foreground_score;
      r.labels[static_cast<std::size_t>(i)] = it->second->label;
    } else {
      if (!fm.regions.empty()) throw std::runtime_error(fm.id + ": no region embedding for concept " +
                                                        std::to_string(r.concepts[static_cast<std::size_t>(i)]));
      r.embeddings.row(i) = averaged.row(i);
      if (!attention_scores.empty()) r.scores[static_cast<std::size_t>(i)] = attention_scores[static_cast<std::size_t>(i)];
    }
    if (r.labels[static_cast<std::size_t>(i)] < 0) r.labels[static_cast<std::size_t>(i)] = majority[static_cast<std::size_t>(i)];
  }
  if (!have_scores) r.scores.assign(static_cast<std::size_t>(m), 1.0);
  return r;
}

struct Predicted {
  std::vector<FeatureMap> maps;
  std::vector<std::vector<std::int32_t>> gts;
  std::vector<ImageRegions> regions;
  int num_classes = 0;
};

Predicted load_predicted(const Dataset& d, const std::string& pred_dir) {
  Predicted p;
  p.maps = load_all(d);
  for (const auto& fm : p.maps) p.gts.push_back(d.ground_truth(fm));
  p.num_classes = class_count(d, p.gts);
  for (std::size_t i = 0; i < p.maps.size(); ++i) {
    p.regions.push_back(collect_regions(p.maps[i], read_prediction(pred_dir, p.maps[i]), p.gts[i], p.num_classes,
                                        d.manifest.ignore_index));
  }
  return p;
}

// -------------------------------------------------------------- subcommands

struct TrainFlags {
  std::string manifest, out;
  TrainConfig cfg;
  bool exclude_diagonal = false;
  bool sum_reduction = false;
};

void add_train_flags(CLI::App* sub, TrainFlags& f) {
  sub->add_option("--k", f.cfg.num_prototypes, "number of prototypes")->capture_default_str();
  sub->add_option("--steps", f.cfg.num_steps, "generator update steps")->capture_default_str();
  sub->add_option("--iters", f.cfg.iterations, "training iterations")->capture_default_str();
  sub->add_option("--batch", f.cfg.batch_size, "images per batch")->capture_default_str();
  sub->add_option("--lr", f.cfg.learning_rate, "learning rate")->capture_default_str();
  sub->add_option("--wd", f.cfg.weight_decay, "decoupled weight decay")->capture_default_str();
  sub->add_option("--heads", f.cfg.num_heads, "attention heads, 0 = d/64")->capture_default_str();
  sub->add_option("--ffn", f.cfg.ffn_expansion, "FFN expansion")->capture_default_str();
  sub->add_option("--init-std", f.cfg.prototype_init_std, "prototype init std")->capture_default_str();
  sub->add_option("--image-side", f.cfg.image_side, "extraction resolution (recorded)")->capture_default_str();
  sub->add_option("--seed", f.cfg.seed, "seed")->capture_default_str();
  sub->add_option("--threads", f.cfg.threads, "worker threads")->capture_default_str();
  sub->add_flag("--decay-all", f.cfg.decay_all, "apply weight decay to every parameter");
  sub->add_flag("--exclude-diagonal", f.exclude_diagonal, "drop i == j terms from the loss");
  sub->add_flag("--sum-reduction", f.sum_reduction, "sum image losses instead of averaging");
}

TrainConfig finish(TrainFlags& f) {
  TrainConfig cfg = f.cfg;
  cfg.include_diagonal = !f.exclude_diagonal;
  cfg.reduction = f.sum_reduction ? BatchReduction::kSum : BatchReduction::kMean;
  return cfg;
}

TrainResult run_training(const Dataset& d, const TrainConfig& cfg) {
  FileSource src(d.paths);
  return train(src, cfg, [&](int it, double loss) {
    if ((it + 1) % 50 == 0 || it + 1 == cfg.iterations) std::fprintf(stderr, "iter %d loss %.6f\n", it + 1, loss);
  });
}

void write_loss_csv(const std::string& path, const std::vector<double>& history) {
  std::ostringstream os;
  os << "iteration,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < history.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i + 1, history[i]);
    os << buf;
  }
  write_text(path, os.str());
}

template <typename Scalar>
json infer_dataset(const AcgParams<Scalar>& params, const Dataset& d, const std::string& out, bool pgm, int threads) {
  constexpr std::size_t kChunk = 256;
  fs::create_directories(out);
  json images = json::array();
  double seconds = 0.0;
  for (std::size_t begin = 0; begin < d.size(); begin += kChunk) {
    std::vector<FeatureMap> maps;
    for (std::size_t i = begin; i < std::min(d.size(), begin + kChunk); ++i) maps.push_back(d.load(i));
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = infer_batch(params, maps, threads);
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (std::size_t i = 0; i < maps.size(); ++i) {
      write_prediction(out, maps[i], results[i].assignment.hard, pgm);
      images.push_back({{"id", maps[i].id}, {"active_concepts", results[i].assignment.region_count()}});
    }
  }
  std::fprintf(stderr, "inference: %.1f images/s\n", static_cast<double>(d.size()) / std::max(seconds, 1e-9));
  return images;
}

struct ClusterReport {
  json report;
  double miou = 0.0;
  std::vector<double> iou;
};

ClusterReport evaluate_predictions(const Dataset& gt, const std::string& pred_dir) {
  std::vector<std::vector<std::int32_t>> preds, gts;
  int num_clusters = 0;
  double image_acc = 0.0;
  json images = json::array();
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const FeatureMap fm = gt.load(i);
    preds.push_back(read_prediction(pred_dir, fm));
    gts.push_back(gt.ground_truth(fm));
    for (auto l : preds.back()) {
      if (l < 0) throw std::runtime_error(fm.id + ": negative predicted label");
      num_clusters = std::max(num_clusters, l + 1);
    }
    const double acc = matched_pixel_accuracy(preds.back(), gts.back(), gt.manifest.ignore_index);
    image_acc += acc;
    const std::set<std::int32_t> active(preds.back().begin(), preds.back().end());
    images.push_back({{"id", fm.id}, {"active_concepts", active.size()}, {"matched_accuracy", acc}});
  }
  const int classes = class_count(gt, gts);
  const auto ev = evaluate_clusters(preds, gts, num_clusters, classes, gt.manifest.ignore_index);
  json report = scores_json(ev.scores);
  report["mean_image_accuracy"] = image_acc / static_cast<double>(gt.size());
  report["cluster_to_class"] = ev.mapping;
  report["images"] = images;
  return {report, ev.scores.mean_iou, present_iou(ev.scores)};
}

int cmd_synth(const CLI::App& app, const SyntheticSpec& base, int images, const std::string& clusters,
              const std::string& grid, const std::string& out) {
  SyntheticSpec spec = base;
  const auto dots = clusters.find("..");
  spec.min_clusters = std::stoi(clusters.substr(0, dots));
  spec.max_clusters = dots == std::string::npos ? spec.min_clusters : std::stoi(clusters.substr(dots + 2));
  const auto x = grid.find('x');
  if (x == std::string::npos) throw CLI::ValidationError("--grid", "expected HxW");
  spec.grid = {std::stoi(grid.substr(0, x)), std::stoi(grid.substr(x + 1))};
  spec.validate();

  fs::create_directories(out);
  Manifest m;
  for (int c = 0; c < spec.num_classes; ++c) m.class_names.push_back("class" + std::to_string(c));
  for (int i = 0; i < images; ++i) {
    const FeatureMap fm = generate_synthetic_image(spec, i);
    const std::string name = file_stem(fm.id) + ".acft";
    write_feature_file((fs::path(out) / name).string(), fm);
    m.images.push_back(name);
  }
  write_manifest((fs::path(out) / "manifest.txt").string(), m);
  snapshot(app, out);
  std::fprintf(stderr, "wrote %d images, separation/noise %.2f\n", images, spec.separation_to_noise());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive concept segmentation on pre-extracted features"};
  app.set_config("--config", "", "read flags from a snapshot written by an earlier run");
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic feature dataset");
  SyntheticSpec spec;
  int synth_images = 64;
  std::string synth_clusters = "2..4", synth_grid = "8x8", synth_out;
  synth->add_option("--images", synth_images, "number of images")->capture_default_str();
  synth->add_option("--clusters", synth_clusters, "cluster count range lo..hi")->capture_default_str();
  synth->add_option("--dim", spec.dim, "embedding width")->capture_default_str();
  synth->add_option("--grid", synth_grid, "feature grid HxW")->capture_default_str();
  synth->add_option("--noise", spec.noise_std, "per-coordinate noise std")->capture_default_str();
  synth->add_option("--scale", spec.feature_scale, "embedding scale, 0 = sqrt(dim)")->capture_default_str();
  synth->add_option("--max-cosine", spec.max_center_cosine, "center cosine bound")->capture_default_str();
  synth->add_option("--classes", spec.num_classes, "shared class bank size, 0 = fresh centers")->capture_default_str();
  synth->add_option("--jitter", spec.class_jitter, "per-image jitter of bank centers")->capture_default_str();
  synth->add_option("--attention-heads", spec.attention_heads, "emit synthetic attention")->capture_default_str();
  synth->add_option("--label-upscale", spec.label_upscale, "ground truth resolution factor")->capture_default_str();
  synth->add_option("--seed", spec.seed, "seed")->capture_default_str();
  synth->add_flag("--antipodal", spec.antipodal, "two-cluster images use opposite centers");
  synth->add_option("--out", synth_out, "output directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "train the concept generator");
  TrainFlags tf;
  train_cmd->add_option("--manifest", tf.manifest, "training manifest")->required();
  train_cmd->add_option("--out", tf.out, "run directory")->required();
  add_train_flags(train_cmd, tf);

  // infer
  auto* infer_cmd = app.add_subcommand("infer", "segment images with a trained checkpoint");
  std::string infer_ckpt, infer_manifest, infer_out;
  int infer_threads = 1;
  bool infer_pgm = false, infer_f32 = false;
  infer_cmd->add_option("--checkpoint", infer_ckpt, "checkpoint file")->required();
  infer_cmd->add_option("--manifest", infer_manifest, "images to segment")->required();
  infer_cmd->add_option("--out", infer_out, "prediction directory")->required();
  infer_cmd->add_option("--threads", infer_threads, "worker threads")->capture_default_str();
  infer_cmd->add_flag("--pgm", infer_pgm, "also write PGM previews");
  infer_cmd->add_flag("--f32", infer_f32, "single-precision inference");

  // baseline
  auto* base_cmd = app.add_subcommand("baseline", "per-image clustering baseline");
  std::string base_method = "kmeans", base_manifest, base_out;
  BaselineConfig bcfg;
  int base_clusters = 5;
  bool base_pgm = false;
  base_cmd->add_option("--method", base_method, "kmeans | spectral | affinity-propagation | agglomerative")
      ->capture_default_str();
  base_cmd->add_option("--manifest", base_manifest, "images to segment")->required();
  base_cmd->add_option("--out", base_out, "prediction directory")->required();
  base_cmd->add_option("--clusters", base_clusters, "clusters for kmeans and spectral")->capture_default_str();
  base_cmd->add_option("--preference", bcfg.affinity_propagation.preference, "affinity propagation preference")
      ->capture_default_str();
  base_cmd->add_option("--damping", bcfg.affinity_propagation.damping, "affinity propagation damping")
      ->capture_default_str();
  base_cmd->add_option("--threshold", bcfg.agglomerative.distance_threshold, "agglomerative cosine distance")
      ->capture_default_str();
  base_cmd->add_option("--seed", bcfg.kmeans.seed, "seed")->capture_default_str();
  base_cmd->add_flag("--pgm", base_pgm, "also write PGM previews");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "score predicted label maps against ground truth");
  std::string eval_pred, eval_gt, eval_out = "-", eval_csv;
  eval_cmd->add_option("--pred", eval_pred, "prediction directory")->required();
  eval_cmd->add_option("--gt", eval_gt, "manifest or dataset directory")->required();
  eval_cmd->add_option("--out", eval_out, "report path, - for stdout")->capture_default_str();
  eval_cmd->add_option("--csv", eval_csv, "per-class IoU table");

  // classify-kmeans
  auto* ckm = app.add_subcommand("classify-kmeans", "cluster foreground concepts into classes");
  std::string ckm_pred, ckm_manifest, ckm_out = "-", ckm_csv;
  KMeansClassifyOptions ckm_opt;
  bool ckm_no_bg = false;
  ckm->add_option("--pred", ckm_pred, "prediction directory")->required();
  ckm->add_option("--manifest", ckm_manifest, "dataset manifest")->required();
  ckm->add_option("--classes", ckm_opt.num_classes, "foreground clusters")->capture_default_str();
  ckm->add_option("--runs", ckm_opt.runs, "repetitions")->capture_default_str();
  ckm->add_option("--seed", ckm_opt.seed, "seed")->capture_default_str();
  ckm->add_flag("--no-background", ckm_no_bg, "dataset has no background class");
  ckm->add_option("--out", ckm_out, "report path, - for stdout")->capture_default_str();
  ckm->add_option("--csv", ckm_csv, "per-class IoU mean and std across runs");

  // classify-knn
  auto* cknn = app.add_subcommand("classify-knn", "label concepts from a labelled region bank");
  std::string knn_bank, knn_bank_pred, knn_pred, knn_manifest, knn_out = "-";
  int knn_k = 10;
  cknn->add_option("--bank", knn_bank, "bank manifest")->required();
  cknn->add_option("--bank-pred", knn_bank_pred, "bank prediction directory")->required();
  cknn->add_option("--pred", knn_pred, "query prediction directory")->required();
  cknn->add_option("--manifest", knn_manifest, "query manifest")->required();
  cknn->add_option("--k", knn_k, "neighbours")->capture_default_str();
  cknn->add_option("--out", knn_out, "report path, - for stdout")->capture_default_str();

  // classify-text
  auto* ctext = app.add_subcommand("classify-text", "label concepts by text-embedding similarity");
  std::string text_classes, text_pred, text_manifest, text_out = "-";
  bool text_bg = false;
  ctext->add_option("--classes", text_classes, "feature file whose rows are class embeddings")->required();
  ctext->add_option("--pred", text_pred, "prediction directory")->required();
  ctext->add_option("--manifest", text_manifest, "dataset manifest")->required();
  ctext->add_flag("--background", text_bg, "split background first; class rows map to classes 1..");
  ctext->add_option("--out", text_out, "report path, - for stdout")->capture_default_str();

  // sweep-prototypes
  auto* sweep = app.add_subcommand("sweep-prototypes", "train and evaluate over prototype counts");
  TrainFlags sf;
  std::string sweep_val;
  std::vector<int> sweep_ks{2, 5, 7, 10, 15};
  sweep->add_option("--manifest", sf.manifest, "training manifest")->required();
  sweep->add_option("--val", sweep_val, "evaluation manifest, defaults to the training set");
  sweep->add_option("--out", sf.out, "sweep directory")->required();
  sweep->add_option("--ks", sweep_ks, "prototype counts")->delimiter(',')->capture_default_str();
  add_train_flags(sweep, sf);

  for (auto* sub : app.get_subcommands({})) sub->configurable();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code != 0) std::cerr << "\n" << app.help();
    return code;
  }

  try {
    if (synth->parsed()) return cmd_synth(app, spec, synth_images, synth_clusters, synth_grid, synth_out);

    if (train_cmd->parsed()) {
      const Dataset d = open_dataset(tf.manifest);
      const TrainConfig cfg = finish(tf);
      const auto r = run_training(d, cfg);
      snapshot(app, tf.out);
      write_checkpoint((fs::path(tf.out) / "checkpoint.acck").string(), r.params);
      write_loss_csv((fs::path(tf.out) / "loss.csv").string(), r.loss_history);
      write_json((fs::path(tf.out) / "train.json").string(),
                 {{"iterations", cfg.iterations},
                  {"final_loss", r.loss_history.empty() ? 0.0 : r.loss_history.back()},
                  {"skipped_images", r.skipped_images},
                  {"parameters", parameter_count(r.params)}});
      return 0;
    }

    if (infer_cmd->parsed()) {
      const auto params = read_checkpoint(infer_ckpt);
      const Dataset d = open_dataset(infer_manifest);
      const json images = infer_f32 ? infer_dataset(cast_params<float>(params), d, infer_out, infer_pgm, infer_threads)
                                    : infer_dataset(params, d, infer_out, infer_pgm, infer_threads);
      snapshot(app, infer_out);
      write_json((fs::path(infer_out) / "infer.json").string(), {{"images", images}});
      return 0;
    }

    if (base_cmd->parsed()) {
      bcfg.method = parse_baseline_method(base_method);
      bcfg.kmeans.clusters = bcfg.spectral.clusters = base_clusters;
      bcfg.spectral.seed = bcfg.kmeans.seed;
      const Dataset d = open_dataset(base_manifest);
      fs::create_directories(base_out);
      json images = json::array();
      double seconds = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        const FeatureMap fm = d.load(i);
        const auto t0 = std::chrono::steady_clock::now();
        const auto r = cluster_image(fm.features.cast<double>(), bcfg);
        seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const int k = *std::max_element(r.labels.begin(), r.labels.end()) + 1;
        Matrix<double> onehot = Matrix<double>::Zero(fm.pixel_count(), k);
        for (int p = 0; p < fm.pixel_count(); ++p) onehot(p, r.labels[static_cast<std::size_t>(p)]) = 1.0;
        const auto a = assign_at_resolution(onehot, fm.grid, fm.image_size);
        write_prediction(base_out, fm, a.hard, base_pgm);
        images.push_back({{"id", fm.id}, {"clusters", a.region_count()}, {"flagged", r.flagged}});
      }
      std::fprintf(stderr, "%s: %.1f images/s\n", base_method.c_str(),
                   static_cast<double>(d.size()) / std::max(seconds, 1e-9));
      snapshot(app, base_out);
      write_json((fs::path(base_out) / "baseline.json").string(), {{"method", to_string(bcfg.method)}, {"images", images}});
      return 0;
    }

    if (eval_cmd->parsed()) {
      const Dataset d = open_dataset(eval_gt);
      const auto ev = evaluate_predictions(d, eval_pred);
      write_json(eval_out, ev.report);
      if (!eval_csv.empty()) write_text(eval_csv, iou_csv({ev.iou}, d.manifest.class_names));
      return 0;
    }

    if (ckm->parsed()) {
      const Dataset d = open_dataset(ckm_manifest);
      const Predicted p = load_predicted(d, ckm_pred);
      // Foreground regions of every image stacked in image order.
      std::vector<std::vector<bool>> background;
      std::vector<std::pair<std::size_t, int>> owner;
      std::vector<Matrix<double>> rows;
      int degenerate = 0;
      for (std::size_t i = 0; i < p.regions.size(); ++i) {
        const auto& r = p.regions[i];
        auto split = ckm_no_bg ? BackgroundSplit{std::vector<bool>(r.scores.size(), false), false}
                               : split_background(r.scores);
        degenerate += split.degenerate;
        for (int j = 0; j < static_cast<int>(r.concepts.size()); ++j) {
          if (split.background[static_cast<std::size_t>(j)]) continue;
          owner.emplace_back(i, j);
          rows.push_back(r.embeddings.row(j));
        }
        background.push_back(std::move(split.background));
      }
      Matrix<double> fg(static_cast<Index>(rows.size()), p.regions.front().embeddings.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) fg.row(static_cast<Index>(i)) = rows[i];
      const int offset = ckm_no_bg ? 0 : 1;
      std::vector<double> mious, accs;
      std::vector<std::vector<double>> per_class;
      json runs = json::array();
      for (const auto& assignment : kmeans_classify(fg, ckm_opt)) {
        std::vector<std::vector<int>> region_class(p.regions.size());
        for (std::size_t i = 0; i < p.regions.size(); ++i) region_class[i].assign(p.regions[i].concepts.size(), 0);
        for (std::size_t f = 0; f < owner.size(); ++f) {
          region_class[owner[f].first][static_cast<std::size_t>(owner[f].second)] = assignment[f] + offset;
        }
        std::vector<std::vector<std::int32_t>> preds;
        for (std::size_t i = 0; i < p.regions.size(); ++i) preds.push_back(broadcast_classes(p.regions[i].regions, region_class[i]));
        const auto ev = evaluate_clusters(preds, p.gts, ckm_opt.num_classes + offset, p.num_classes,
                                          d.manifest.ignore_index);
        mious.push_back(ev.scores.mean_iou);
        accs.push_back(ev.scores.pixel_accuracy);
        runs.push_back(scores_json(ev.scores));
        per_class.push_back(present_iou(ev.scores));
      }
      const auto m = mean_std(mious), a = mean_std(accs);
      write_json(ckm_out, {{"miou", m.mean},
                           {"miou_std", m.stddev},
                           {"pixel_accuracy", a.mean},
                           {"pixel_accuracy_std", a.stddev},
                           {"foreground_regions", owner.size()},
                           {"degenerate_background_splits", degenerate},
                           {"runs", runs}});
      if (!ckm_csv.empty()) write_text(ckm_csv, iou_csv(per_class, d.manifest.class_names));
      return 0;
    }

    if (cknn->parsed()) {
      const Dataset bank_set = open_dataset(knn_bank), query_set = open_dataset(knn_manifest);
      const Predicted bank = load_predicted(bank_set, knn_bank_pred);
      const Predicted query = load_predicted(query_set, knn_pred);
      std::vector<Matrix<double>> rows;
      Labels bank_labels;
      for (const auto& r : bank.regions) {
        for (std::size_t j = 0; j < r.concepts.size(); ++j) {
          if (r.labels[j] < 0) continue;
          rows.push_back(r.embeddings.row(static_cast<Index>(j)));
          bank_labels.push_back(r.labels[j]);
        }
      }
      if (rows.empty()) throw std::runtime_error("classify-knn: bank has no labelled regions");
      Matrix<double> bank_matrix(static_cast<Index>(rows.size()), rows.front().cols());
      for (std::size_t i = 0; i < rows.size(); ++i) bank_matrix.row(static_cast<Index>(i)) = rows[i];
      std::vector<RetrievalImage> images;
      for (std::size_t i = 0; i < query.regions.size(); ++i) {
        images.push_back({query.regions[i].embeddings, query.regions[i].regions, query.gts[i]});
      }
      const int classes = std::max(query.num_classes, bank.num_classes);
      const auto s = retrieval_protocol(bank_matrix, bank_labels, images, knn_k, classes, query_set.manifest.ignore_index);
      json report = scores_json(s);
      report["k"] = knn_k;
      report["bank_regions"] = rows.size();
      if (knn_k > static_cast<int>(rows.size())) report["k_clamped_to"] = rows.size();
      write_json(knn_out, report);
      return 0;
    }

    if (ctext->parsed()) {
      const Dataset d = open_dataset(text_manifest);
      const Predicted p = load_predicted(d, text_pred);
      const Matrix<double> classes = read_feature_file(text_classes).features.cast<double>();
      const int offset = text_bg ? 1 : 0;
      const int num_classes = std::max(p.num_classes, static_cast<int>(classes.rows()) + offset);
      ConfusionMatrix cm(num_classes, num_classes);
      int ties = 0;
      for (std::size_t i = 0; i < p.regions.size(); ++i) {
        const auto& r = p.regions[i];
        const auto pred = text_classify(r.embeddings, classes);
        const auto bg = text_bg ? split_background(r.scores).background : std::vector<bool>(r.scores.size(), false);
        std::vector<int> region_class(r.concepts.size());
        for (std::size_t j = 0; j < region_class.size(); ++j) {
          region_class[j] = bg[j] ? 0 : pred.classes[j] + offset;
          ties += pred.tied[j];
        }
        cm.add(broadcast_classes(r.regions, region_class), p.gts[i], d.manifest.ignore_index);
      }
      json report = scores_json(scores_from_confusion(cm));
      report["tied_regions"] = ties;
      write_json(text_out, report);
      return 0;
    }

    if (sweep->parsed()) {
      const Dataset train_set = open_dataset(sf.manifest);
      const Dataset val_set = open_dataset(sweep_val.empty() ? sf.manifest : sweep_val);
      json results = json::array();
      std::ostringstream csv;
      csv << "k,miou,pixel_accuracy,mean_image_accuracy,final_loss\n";
      for (int k : sweep_ks) {
        TrainConfig cfg = finish(sf);
        cfg.num_prototypes = k;
        std::fprintf(stderr, "k = %d\n", k);
        const auto r = run_training(train_set, cfg);
        const fs::path dir = fs::path(sf.out) / ("k" + std::to_string(k));
        fs::create_directories(dir);
        write_checkpoint((dir / "checkpoint.acck").string(), r.params);
        infer_dataset(r.params, val_set, (dir / "pred").string(), false, cfg.threads);
        const auto ev = evaluate_predictions(val_set, (dir / "pred").string());
        const double loss = r.loss_history.empty() ? 0.0 : r.loss_history.back();
        results.push_back({{"k", k},
                           {"miou", ev.report["miou"]},
                           {"pixel_accuracy", ev.report["pixel_accuracy"]},
                           {"mean_image_accuracy", ev.report["mean_image_accuracy"]},
                           {"final_loss", loss}});
        char line[160];
        std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g\n", k, ev.miou,
                      ev.report["pixel_accuracy"].get<double>(), ev.report["mean_image_accuracy"].get<double>(), loss);
        csv << line;
      }
      snapshot(app, sf.out);
      write_json((fs::path(sf.out) / "sweep.json").string(), {{"results", results}});
      write_text((fs::path(sf.out) / "sweep.csv").string(), csv.str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
