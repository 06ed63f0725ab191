// One PASS/FAIL line per acceptance criterion. Exit status is the number of
// failures. argv[1]: path to the acseg CLI, used for the end-to-end
// determinism check.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "acg_probe.hpp"
#include "acseg/baselines.hpp"
#include "acseg/dataio.hpp"
#include "acseg/evaluation.hpp"
#include "acseg/modularity.hpp"
#include "acseg/synthetic.hpp"
#include "acseg/trainer.hpp"
#include "gradcheck.hpp"

using namespace acseg;
using acseg::testing::random_matrix;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(bool ok, const char* name, const std::string& detail) {
  std::printf("%s  %-28s %s\n", ok ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  failures += !ok;
}

template <typename Fn>
double seconds(Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<std::int32_t> i32(const Labels& l) { return {l.begin(), l.end()}; }

// Held-out images start far past any training index.
constexpr int kHeldOutStart = 1000000;
constexpr int kHeldOut = 200;
constexpr int kTrainImages = 4000;

struct HeldOutScore {
  double accuracy = 0.0;
  double count_correct = 0.0;
};

HeldOutScore score(const AcgParams<double>& params, const std::vector<FeatureMap>& test) {
  HeldOutScore s;
  for (const auto& fm : test) {
    const auto r = infer(params, fm);
    s.accuracy += matched_pixel_accuracy(i32(r.assignment.hard), fm.labels);
    s.count_correct += r.assignment.region_count() == true_cluster_count(fm);
  }
  s.accuracy /= static_cast<double>(test.size());
  s.count_correct /= static_cast<double>(test.size());
  return s;
}

void gradient_check() {
  std::mt19937_64 rng(14);
  AcgConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_prototypes = 3;
  cfg.num_steps = 2;
  auto p = acseg::testing::test_params(cfg, rng);
  const Matrix<double> x = random_matrix(12, 8, rng);
  const auto graph = build_affinity(x);
  const Matrix<double> unit = normalize_rows(x);
  acseg::testing::GradientPair g;
  const double t = seconds([&] {
    g = acseg::testing::gradient_pair(
        [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
          const auto concepts = acg_forward(acseg::testing::unflatten(cfg, v), tape.constant(x));
          return modularity_loss(graph, soft_assign(tape.constant(unit), concepts));
        },
        acseg::testing::flatten(p));
  });
  const double err = acseg::testing::max_entry_error(g);
  report(err < 1e-3 && t < 30.0, "gradient check",
         fmt("max entry relative error %.2e (limit 1e-3), %.2f s (limit 30 s)", err, t));
}

void two_block_loss() {
  // Ten pixels: five copies of c, five of -c; concepts at c and -c.
  std::mt19937_64 rng(4);
  const Matrix<double> c = random_matrix(1, 6, rng);
  Matrix<double> x(10, 6);
  for (int i = 0; i < 10; ++i) x.row(i) = i < 5 ? c : (-c).eval();
  Matrix<double> concepts(2, 6);
  concepts << c, -c;
  const double loss = modularity_loss(build_affinity(x), soft_assign(x, concepts));
  report(std::abs(loss + 0.5) < 1e-6, "two-block loss value", fmt("L = %.12f (expected -0.5 within 1e-6)", loss));
}

void weight_sum() {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> size(2, 40), dim(2, 16);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Matrix<double> x = random_matrix(size(rng), dim(rng), rng);
    worst = std::max(worst, std::abs(modularity_weights(build_affinity(x)).sum()));
  }
  report(worst < 1e-9, "weight sum identity", fmt("max |sum w| = %.2e over 100 graphs (limit 1e-9)", worst));
}

double brute_force_max(const Matrix<double>& score) {
  const bool flip = score.rows() > score.cols();
  const Matrix<double> s = flip ? Matrix<double>(score.transpose()) : score;
  std::vector<int> cols(static_cast<std::size_t>(s.cols()));
  std::iota(cols.begin(), cols.end(), 0);
  double best = -std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (Index r = 0; r < s.rows(); ++r) total += s(r, cols[static_cast<std::size_t>(r)]);
    best = std::max(best, total);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

void matching_oracle() {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> side(1, 6);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  int agree = 0;
  for (int t = 0; t < 1000; ++t) {
    Matrix<double> s(side(rng), side(rng));
    for (Index i = 0; i < s.size(); ++i) s.data()[i] = u(rng);
    const auto m = hungarian_match(s);
    double total = 0.0;
    for (Index r = 0; r < s.rows(); ++r) {
      const int c = m.row_to_col[static_cast<std::size_t>(r)];
      if (c >= 0) total += s(r, c);
    }
    agree += std::abs(total - brute_force_max(s)) < 1e-9 && std::abs(total - m.total) < 1e-9;
  }
  report(agree == 1000, "matching vs brute force", fmt("%d / 1000 random matrices up to 6x6 agree", agree));
}

void iou_toy() {
  // 3x3 masks: class 0 predicted on 6 pixels, present on 4, overlapping on 3.
  const std::vector<std::int32_t> pred{0, 0, 0, 0, 0, 0, 1, 1, 1};
  const std::vector<std::int32_t> gt{0, 0, 0, 1, 1, 1, 0, 1, 1};
  const auto s = miou(pred, gt, 2);
  report(s.iou[0] == 3.0 / 7.0, "IoU toy masks", fmt("IoU = %.17g (expected 3/7 exactly)", s.iou[0]));
}

void baselines(const AcgParams<double>& params, const std::vector<FeatureMap>& test) {
  SyntheticSpec spec;
  spec.min_clusters = spec.max_clusters = 2;
  spec.noise_std = 0.0;
  spec.antipodal = true;
  const FeatureMap fm = generate_synthetic_image(spec, 0);
  const Matrix<double> x = fm.features.cast<double>();
  KMeansOptions ko;
  ko.clusters = 2;
  SpectralOptions so;
  so.clusters = so.components = 2;
  const double km = matched_pixel_accuracy(i32(kmeans(x, ko).labels), fm.labels);
  const double sp = matched_pixel_accuracy(i32(spectral_cluster(x, so)), fm.labels);

  // Best of three runs each; ACG in single precision.
  const auto acg32 = cast_params<float>(params);
  BaselineConfig bc;
  bc.method = BaselineMethod::kSpectral;
  double acg_time = 1e300, spectral_time = 1e300;
  for (int r = 0; r < 3; ++r) {
    acg_time = std::min(acg_time, seconds([&] { infer_batch(acg32, test, 1); }));
    spectral_time = std::min(spectral_time, seconds([&] {
      for (const auto& f : test) cluster_image(f.features.cast<double>(), bc);
    }));
  }
  const double acg_rate = static_cast<double>(test.size()) / acg_time;
  const double spectral_rate = static_cast<double>(test.size()) / spectral_time;
  report(km == 1.0 && sp == 1.0 && acg_rate >= 2.0 * spectral_rate, "baseline recovery and speed",
         fmt("kmeans acc %.3f, spectral acc %.3f; %.0f vs %.0f images/s (ratio %.1f, limit 2)", km, sp, acg_rate,
             spectral_rate, acg_rate / spectral_rate));
}

bool same_file(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  return std::string(std::istreambuf_iterator<char>(fa), {}) == std::string(std::istreambuf_iterator<char>(fb), {});
}

void determinism(const std::string& cli) {
  const std::vector<FeatureMap> data = generate_synthetic(SyntheticSpec{}, 32);
  InMemorySource src(data);
  TrainConfig cfg;
  cfg.iterations = 30;
  cfg.batch_size = 8;
  cfg.num_steps = 2;
  cfg.seed = 5;
  std::string a, b;
  {
    std::ostringstream oa, ob;
    write_checkpoint(oa, train(src, cfg).params);
    write_checkpoint(ob, train(src, cfg).params);
    a = oa.str();
    b = ob.str();
  }
  bool ok = a == b;
  std::string detail = ok ? "in-process checkpoints identical" : "in-process checkpoints differ";

  if (cli.empty()) {
    detail += "; CLI path not given";
    ok = false;
  } else {
    const fs::path dir = fs::temp_directory_path() / ("acseg_acceptance_" + std::to_string(std::random_device{}()));
    fs::create_directories(dir);
    auto run = [&](const std::string& args) {
      return std::system((cli + " " + args + " 2>/dev/null >/dev/null").c_str()) == 0;
    };
    const std::string d = dir.string();
    bool ran = run("synth --images 24 --out " + d + "/data");
    for (const char* r : {"a", "b"}) {
      const std::string out = d + "/" + r;
      ran = ran && run("train --manifest " + d + "/data --out " + out + " --iters 20 --batch 8 --steps 2 --seed 9");
      ran = ran && run("infer --checkpoint " + out + "/checkpoint.acck --manifest " + d + "/data --out " + out + "/pred");
      ran = ran && run("eval --pred " + out + "/pred --gt " + d + "/data --out " + out + "/report.json");
    }
    int identical = 0;
    const char* files[] = {"checkpoint.acck", "loss.csv", "train.json", "pred/infer.json", "report.json"};
    for (const char* f : files) identical += same_file(dir / "a" / f, dir / "b" / f);
    ok = ok && ran && identical == 5;
    detail += fmt("; CLI %s, %d / 5 artifacts identical", ran ? "ran" : "failed", identical);
    fs::remove_all(dir);
  }
  report(ok, "determinism", detail);
}

}  // namespace

int main(int argc, char** argv) {
  const std::string cli = argc > 1 ? argv[1] : "";

  gradient_check();
  two_block_loss();
  weight_sum();
  matching_oracle();
  iou_toy();

  // Adaptive concept count with the default training configuration.
  const SyntheticSpec spec;
  const auto train_set = generate_synthetic(spec, kTrainImages);
  const auto test_set = generate_synthetic(spec, kHeldOut, kHeldOutStart);
  InMemorySource src(train_set);
  TrainConfig cfg;
  AcgParams<double> k5;
  const double train_time = seconds([&] { k5 = train(src, cfg).params; });
  const HeldOutScore s5 = score(k5, test_set);
  report(s5.accuracy >= 0.95 && s5.count_correct >= 0.90 && train_time < 600.0, "adaptive concept count",
         fmt("accuracy %.4f (limit 0.95), count correct on %.1f%% (limit 90%%), %.0f s (limit 600 s)", s5.accuracy,
             100.0 * s5.count_correct, train_time));

  TrainConfig two = cfg;
  two.num_prototypes = 2;
  const HeldOutScore s2 = score(train(src, two).params, test_set);
  report(s2.accuracy < s5.accuracy, "prototype count ordering",
         fmt("held-out accuracy k=2 %.4f, k=5 %.4f", s2.accuracy, s5.accuracy));

  baselines(k5, test_set);
  determinism(cli);

  std::printf("%d failed\n", failures);
  return failures;
}
