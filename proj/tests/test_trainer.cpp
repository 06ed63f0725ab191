#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "acseg/dataio.hpp"
#include "acseg/synthetic.hpp"
#include "acseg/trainer.hpp"

using namespace acseg;

namespace {

std::vector<Matrix<double>> flat(const AcgParams<double>& p) {
  std::vector<Matrix<double>> out;
  for_each_parameter(p, [&](const std::string&, const Matrix<double>& m, bool) { out.push_back(m); });
  return out;
}

SyntheticSpec two_block_spec() {
  SyntheticSpec spec;
  spec.min_clusters = spec.max_clusters = 2;
  spec.antipodal = true;
  spec.noise_std = 0.0;
  spec.dim = 8;
  spec.grid = {4, 4};
  spec.min_blob_pixels = 8;  // equal halves
  return spec;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.iterations = 20;
  cfg.batch_size = 4;
  cfg.num_steps = 2;
  cfg.learning_rate = 1e-3;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("defaults") {
  TrainConfig cfg;
  CHECK(cfg.learning_rate == 1e-4);
  CHECK(cfg.weight_decay == 0.01);
  CHECK(cfg.iterations == 2500);
  CHECK(cfg.batch_size == 32);
  CHECK(cfg.num_prototypes == 5);
  CHECK(cfg.num_steps == 6);
  CHECK(cfg.image_side == 224);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  const auto data = generate_synthetic(two_block_spec(), 8);
  InMemorySource src(data);
  TrainConfig cfg = small_config();
  cfg.iterations = 1;
  cfg.learning_rate = 0.0;
  const auto start = init_acg<double>(cfg.acg_config(8));
  const auto r = train_from(start, src, cfg);
  const auto a = flat(start), b = flat(r.params);
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);
  CHECK(r.loss_history.size() == 1);
}

TEST_CASE("two-block data trains to near the analytic optimum") {
  SyntheticSpec spec = two_block_spec();
  spec.dim = 32;
  const auto data = generate_synthetic(spec, 64);
  InMemorySource src(data);
  TrainConfig cfg = small_config();
  cfg.iterations = 300;
  cfg.batch_size = 8;
  cfg.num_steps = 6;
  cfg.learning_rate = 3e-3;
  const auto r = train(src, cfg);
  const double final_loss = batch_loss(r.params, data);
  MESSAGE("two-block loss after 300 iterations: " << final_loss);
  CHECK(final_loss <= -0.45);
}

TEST_CASE("moving-average loss does not increase on the synthetic suite") {
  const auto data = generate_synthetic(two_block_spec(), 64);
  InMemorySource src(data);
  TrainConfig cfg = small_config();
  cfg.iterations = 300;
  cfg.batch_size = 8;
  const auto r = train(src, cfg);
  const auto avg = moving_average(r.loss_history, 50);
  // Block means over consecutive windows.
  for (std::size_t i = 50; i < avg.size(); i += 50) CHECK(avg[i] <= avg[i - 50] + 1e-3);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto data = generate_synthetic(two_block_spec(), 16);
  InMemorySource src(data);
  const auto a = train(src, small_config());
  const auto b = train(src, small_config());
  CHECK(a.loss_history == b.loss_history);
  std::ostringstream ca, cb;
  write_checkpoint(ca, a.params);
  write_checkpoint(cb, b.params);
  CHECK(ca.str() == cb.str());

  TrainConfig other = small_config();
  other.seed = 4;
  CHECK(train(src, other).loss_history != a.loss_history);
}

TEST_CASE("threaded training matches single-threaded") {
  const auto data = generate_synthetic(two_block_spec(), 16);
  InMemorySource src(data);
  TrainConfig cfg = small_config();
  cfg.threads = 3;
  CHECK(train(src, cfg).loss_history == train(src, small_config()).loss_history);
}

TEST_CASE("an image of identical pixels has one active concept") {
  AcgConfig acfg;
  acfg.embed_dim = 8;
  acfg.num_steps = 2;
  const auto params = init_acg<double>(acfg);
  FeatureMap fm;
  fm.id = "flat";
  fm.grid = {3, 3};
  fm.features = MatrixF::Ones(9, 8);
  CHECK(infer(params, fm).assignment.region_count() == 1);
}

TEST_CASE("inference upsamples to the original resolution") {
  SyntheticSpec spec = two_block_spec();
  spec.label_upscale = 4;
  const FeatureMap fm = generate_synthetic_image(spec, 0);
  AcgConfig acfg;
  acfg.embed_dim = 8;
  const auto r = infer(init_acg<double>(acfg), fm);
  CHECK(r.assignment.hard.size() == 256);
  CHECK(infer_batch(init_acg<double>(acfg), std::vector<FeatureMap>{fm, fm}, 2).size() == 2);
}

TEST_CASE("batched inference matches per-image inference") {
  SyntheticSpec spec;
  spec.dim = 16;
  auto maps = generate_synthetic(spec, 150);
  maps[7].grid = {4, 5};
  maps[7].features = maps[7].features.topRows(20).eval();
  maps[7].labels.resize(20);
  AcgConfig acfg;
  acfg.embed_dim = 16;
  acfg.num_heads = 2;
  acfg.num_steps = 3;
  const auto params = init_acg<double>(acfg);
  for (int threads : {1, 3}) {
    const auto batch = infer_batch(params, maps, threads);
    REQUIRE(batch.size() == maps.size());
    double worst = 0.0;
    bool same_labels = true;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      const auto single = infer(params, maps[i]);
      worst = std::max(worst, (batch[i].concepts.concepts - single.concepts.concepts).cwiseAbs().maxCoeff());
      same_labels = same_labels && batch[i].assignment.hard == single.assignment.hard &&
                    batch[i].concepts.image_id == maps[i].id;
    }
    CHECK(worst < 1e-12);
    CHECK(same_labels);
  }
}

TEST_CASE("feature dimension mismatch is reported") {
  auto data = generate_synthetic(two_block_spec(), 4);
  SyntheticSpec wide = two_block_spec();
  wide.dim = 16;
  data.push_back(generate_synthetic_image(wide, 0));
  InMemorySource src(data);
  TrainConfig cfg = small_config();
  cfg.iterations = 2;
  cfg.batch_size = 5;
  CHECK_THROWS_AS(train(src, cfg), ShapeError);
}

TEST_CASE("config validation") {
  std::vector<FeatureMap> empty;
  InMemorySource src(empty);
  CHECK_THROWS_AS(train(src, small_config()), std::invalid_argument);
  TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.learning_rate = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("moving average") {
  CHECK(moving_average({1, 2, 3, 4}, 2) == std::vector<double>{1.5, 2.5, 3.5});
  CHECK_THROWS(moving_average({1}, 0));
}
