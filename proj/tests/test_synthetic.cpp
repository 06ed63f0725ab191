#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "acseg/baselines.hpp"
#include "acseg/evaluation.hpp"
#include "acseg/modularity.hpp"
#include "acseg/synthetic.hpp"

using namespace acseg;

TEST_CASE("defaults") {
  SyntheticSpec spec;
  CHECK(spec.min_clusters == 2);
  CHECK(spec.max_clusters == 4);
  CHECK(spec.max_center_cosine == 0.3);
  CHECK(spec.separation_to_noise() > 5.0);
}

TEST_CASE("noise-free clusters have within-cluster cosine one") {
  SyntheticSpec spec;
  spec.noise_std = 0.0;
  for (const auto& fm : generate_synthetic(spec, 10)) {
    const Matrix<double> x = normalize_rows(fm.features.cast<double>());
    for (int i = 0; i < fm.pixel_count(); ++i) {
      for (int j = 0; j < fm.pixel_count(); ++j) {
        if (fm.labels[static_cast<std::size_t>(i)] == fm.labels[static_cast<std::size_t>(j)]) {
          REQUIRE(x.row(i).dot(x.row(j)) == doctest::Approx(1.0).epsilon(1e-6));
        }
      }
    }
  }
}

TEST_CASE("centers respect the cosine bound") {
  const MatrixF c = sample_centers(4, 32, 0.3, 7);
  for (int i = 0; i < 4; ++i) {
    CHECK(c.row(i).norm() == doctest::Approx(1.0f));
    for (int j = 0; j < i; ++j) CHECK(c.row(i).dot(c.row(j)) < 0.3f);
  }
  CHECK_THROWS_AS(sample_centers(40, 2, -0.5, 1, 5), std::runtime_error);
}

TEST_CASE("antipodal centers give a two-block graph") {
  SyntheticSpec spec;
  spec.min_clusters = spec.max_clusters = 2;
  spec.noise_std = 0.0;
  spec.antipodal = true;
  const FeatureMap fm = generate_synthetic_image(spec, 0);
  const auto g = build_affinity(fm.features.cast<double>());
  for (int i = 0; i < fm.pixel_count(); ++i) {
    for (int j = 0; j < fm.pixel_count(); ++j) {
      const bool same = fm.labels[static_cast<std::size_t>(i)] == fm.labels[static_cast<std::size_t>(j)];
      REQUIRE(g.weights(i, j) == doctest::Approx(same ? 1.0 : 0.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("every image has 2 to 4 contiguous-size clusters") {
  SyntheticSpec spec;
  for (const auto& fm : generate_synthetic(spec, 50)) {
    const int c = true_cluster_count(fm);
    REQUIRE(c >= 2);
    REQUIRE(c <= 4);
    std::vector<int> sizes(4, 0);
    for (auto l : fm.labels) ++sizes[static_cast<std::size_t>(l)];
    for (int k = 0; k < c; ++k) REQUIRE(sizes[static_cast<std::size_t>(k)] >= spec.grid.count() / (2 * c));
  }
}

TEST_CASE("default spec is separable by kmeans with the true count") {
  SyntheticSpec spec;
  double acc = 0.0;
  const auto images = generate_synthetic(spec, 100);
  for (const auto& fm : images) {
    KMeansOptions opt;
    opt.clusters = true_cluster_count(fm);
    const auto r = kmeans(fm.features.cast<double>(), opt);
    acc += matched_pixel_accuracy(std::vector<std::int32_t>(r.labels.begin(), r.labels.end()), fm.labels);
  }
  CHECK(acc / 100.0 >= 0.99);
}

TEST_CASE("images are deterministic and independent of stream position") {
  SyntheticSpec spec;
  const auto a = generate_synthetic(spec, 5);
  const auto b = generate_synthetic(spec, 3, 2);
  CHECK(a[2].features == b[0].features);
  CHECK(a[4].labels == b[2].labels);
  spec.seed = 2;
  CHECK_FALSE(generate_synthetic_image(spec, 0).features == a[0].features);
}

TEST_CASE("class bank and label upscaling") {
  SyntheticSpec spec;
  spec.num_classes = 6;
  spec.label_upscale = 2;
  const FeatureMap fm = generate_synthetic_image(spec, 3);
  CHECK(fm.label_grid() == GridSize{16, 16});
  for (auto l : fm.labels) CHECK((l >= 0 && l < 6));
  CHECK(fm.labels[0] == fm.labels[1]);
  fm.validate();
}

TEST_CASE("synthetic attention marks the largest blob as background") {
  SyntheticSpec spec;
  spec.attention_heads = 3;
  const FeatureMap fm = generate_synthetic_image(spec, 0);
  CHECK(fm.attention.rows() == 3);
  CHECK(fm.attention.row(0).sum() == doctest::Approx(0.9f));
}

TEST_CASE("invalid specs are rejected") {
  SyntheticSpec spec;
  spec.min_clusters = 5;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = {};
  spec.noise_std = -1;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = {};
  spec.num_classes = 3;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}
