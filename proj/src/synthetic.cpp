#include "acseg/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

namespace acseg {
namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Vector<double> random_unit(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vector<double> v(dim);
  do {
    for (int i = 0; i < dim; ++i) v(i) = g(rng);
  } while (v.norm() < 1e-9);
  return v.normalized();
}

Matrix<double> sample_centers_rng(std::mt19937_64& rng, int count, int dim, double max_cosine, int max_retries) {
  Matrix<double> centers(count, dim);
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    bool ok = true;
    for (int c = 0; c < count && ok; ++c) {
      centers.row(c) = random_unit(rng, dim).transpose();
      for (int p = 0; p < c; ++p) {
        if (centers.row(c).dot(centers.row(p)) >= max_cosine) {
          ok = false;
          break;
        }
      }
    }
    if (ok) return centers;
  }
  throw std::runtime_error("sample_centers: could not place " + std::to_string(count) + " centers in dim " +
                           std::to_string(dim) + " below cosine " + std::to_string(max_cosine) + " after " +
                           std::to_string(max_retries) + " attempts");
}

// Voronoi cells of `count` random seed pixels; every cell must reach the
// minimum size.
std::vector<int> sample_blobs(std::mt19937_64& rng, GridSize grid, int count, int min_pixels, int max_retries) {
  std::uniform_int_distribution<int> pick(0, grid.count() - 1);
  std::vector<int> owner(static_cast<std::size_t>(grid.count()));
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    std::set<int> seeds;
    while (static_cast<int>(seeds.size()) < count) seeds.insert(pick(rng));
    std::vector<int> seed_list(seeds.begin(), seeds.end());
    std::shuffle(seed_list.begin(), seed_list.end(), rng);
    std::vector<int> sizes(static_cast<std::size_t>(count), 0);
    for (int p = 0; p < grid.count(); ++p) {
      const int py = p / grid.width, px = p % grid.width;
      int best = 0;
      int best_d = std::numeric_limits<int>::max();
      for (int c = 0; c < count; ++c) {
        const int s = seed_list[static_cast<std::size_t>(c)];
        const int dy = py - s / grid.width, dx = px - s % grid.width;
        const int d = dy * dy + dx * dx;
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      owner[static_cast<std::size_t>(p)] = best;
      ++sizes[static_cast<std::size_t>(best)];
    }
    if (*std::min_element(sizes.begin(), sizes.end()) >= min_pixels) return owner;
  }
  throw std::runtime_error("sample_blobs: no layout with " + std::to_string(count) + " blobs of >= " +
                           std::to_string(min_pixels) + " pixels");
}

}  // namespace

double SyntheticSpec::separation_to_noise() const {
  // Unit centers at cosine <= max_center_cosine are at least sqrt(2 - 2 cos) apart.
  const double separation = std::sqrt(2.0 - 2.0 * max_center_cosine);
  const double noise = noise_std * std::sqrt(static_cast<double>(dim));
  return noise > 0.0 ? separation / noise : std::numeric_limits<double>::infinity();
}

double SyntheticSpec::scale() const {
  return feature_scale > 0.0 ? feature_scale : std::sqrt(static_cast<double>(dim));
}

void SyntheticSpec::validate() const {
  if (min_clusters < 1 || max_clusters < min_clusters) {
    throw std::invalid_argument("SyntheticSpec: invalid cluster range " + std::to_string(min_clusters) + ".." +
                                std::to_string(max_clusters));
  }
  if (dim < 1 || grid.count() < max_clusters) throw std::invalid_argument("SyntheticSpec: grid or dim too small");
  if (feature_scale < 0.0) throw std::invalid_argument("SyntheticSpec: negative feature scale");
  if (noise_std < 0.0 || class_jitter < 0.0) throw std::invalid_argument("SyntheticSpec: negative noise");
  if (num_classes > 0 && num_classes < max_clusters) {
    throw std::invalid_argument("SyntheticSpec: class bank smaller than max_clusters");
  }
  if (label_upscale < 1) throw std::invalid_argument("SyntheticSpec: label_upscale must be >= 1");
}

MatrixF sample_centers(int count, int dim, double max_cosine, std::uint64_t seed, int max_retries) {
  std::mt19937_64 rng(seed);
  return sample_centers_rng(rng, count, dim, max_cosine, max_retries).cast<float>();
}

FeatureMap generate_synthetic_image(const SyntheticSpec& spec, int index) {
  spec.validate();
  std::mt19937_64 rng(splitmix(spec.seed ^ splitmix(static_cast<std::uint64_t>(index) + 1)));
  std::uniform_int_distribution<int> count_dist(spec.min_clusters, spec.max_clusters);
  const int clusters = count_dist(rng);

  Matrix<double> centers;
  std::vector<int> class_of(static_cast<std::size_t>(clusters));
  if (spec.num_classes > 0) {
    std::mt19937_64 bank_rng(splitmix(spec.seed));
    const Matrix<double> bank =
        sample_centers_rng(bank_rng, spec.num_classes, spec.dim, spec.max_center_cosine, spec.max_retries);
    std::vector<int> order(static_cast<std::size_t>(spec.num_classes));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    centers.resize(clusters, spec.dim);
    std::normal_distribution<double> jitter(0.0, spec.class_jitter);
    for (int c = 0; c < clusters; ++c) {
      class_of[static_cast<std::size_t>(c)] = order[static_cast<std::size_t>(c)];
      Vector<double> v = bank.row(order[static_cast<std::size_t>(c)]).transpose();
      if (spec.class_jitter > 0.0) {
        for (int i = 0; i < spec.dim; ++i) v(i) += jitter(rng);
      }
      centers.row(c) = v.normalized().transpose();
    }
  } else if (spec.antipodal && clusters == 2) {
    centers.resize(2, spec.dim);
    centers.row(0) = random_unit(rng, spec.dim).transpose();
    centers.row(1) = -centers.row(0);
    class_of = {0, 1};
  } else {
    centers = sample_centers_rng(rng, clusters, spec.dim, spec.max_center_cosine, spec.max_retries);
    std::iota(class_of.begin(), class_of.end(), 0);
  }

  const int min_pixels = spec.min_blob_pixels > 0 ? spec.min_blob_pixels
                                                  : std::max(1, spec.grid.count() / (2 * clusters));
  const std::vector<int> owner = sample_blobs(rng, spec.grid, clusters, min_pixels, spec.max_retries);

  FeatureMap fm;
  fm.id = "synth_" + std::to_string(index);
  fm.grid = spec.grid;
  fm.features.resize(spec.grid.count(), spec.dim);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double amplitude = spec.scale();
  for (int p = 0; p < spec.grid.count(); ++p) {
    const int c = owner[static_cast<std::size_t>(p)];
    for (int i = 0; i < spec.dim; ++i) {
      const double e = spec.noise_std > 0.0 ? spec.noise_std * noise(rng) : 0.0;
      fm.features(p, i) = static_cast<float>(amplitude * (centers(c, i) + e));
    }
  }

  const int up = spec.label_upscale;
  if (up > 1) fm.image_size = {spec.grid.height * up, spec.grid.width * up};
  const GridSize lg = fm.label_grid();
  fm.labels.resize(static_cast<std::size_t>(lg.count()));
  for (int y = 0; y < lg.height; ++y) {
    for (int x = 0; x < lg.width; ++x) {
      const int c = owner[static_cast<std::size_t>((y / up) * spec.grid.width + x / up)];
      fm.labels[static_cast<std::size_t>(y * lg.width + x)] = class_of[static_cast<std::size_t>(c)];
    }
  }

  if (spec.attention_heads > 0) {
    // The largest blob plays background: low attention in every head.
    std::vector<int> sizes(static_cast<std::size_t>(clusters), 0);
    for (int o : owner) ++sizes[static_cast<std::size_t>(o)];
    const int background = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    std::uniform_real_distribution<double> u(0.5, 1.5);
    fm.attention.resize(spec.attention_heads, spec.grid.count());
    for (int h = 0; h < spec.attention_heads; ++h) {
      double total = 0.0;
      for (int p = 0; p < spec.grid.count(); ++p) {
        const double base = owner[static_cast<std::size_t>(p)] == background ? 0.05 : 1.0;
        fm.attention(h, p) = static_cast<float>(base * u(rng));
        total += fm.attention(h, p);
      }
      fm.attention.row(h) *= static_cast<float>(0.9 / total);
    }
  }
  return fm;
}

std::vector<FeatureMap> generate_synthetic(const SyntheticSpec& spec, int count, int first_index) {
  std::vector<FeatureMap> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_synthetic_image(spec, first_index + i));
  return out;
}

int true_cluster_count(const FeatureMap& fm) {
  std::set<std::int32_t> s;
  for (auto l : fm.labels) {
    if (l != kIgnoreLabel) s.insert(l);
  }
  return static_cast<int>(s.size());
}

}  // namespace acseg
