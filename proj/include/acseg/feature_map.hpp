#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "acseg/types.hpp"

namespace acseg {

using MatrixF = Matrix<float>;

inline constexpr std::int32_t kIgnoreLabel = 255;

// One region's summary vector, produced outside this library (masked ViT
// re-encoding or masked averaging of vision-language pixel features).
struct RegionEmbedding {
  enum class Source : std::uint8_t { kVitMatting = 0, kClipAverage = 1, kPixelAverage = 2 };

  std::int32_t concept_id = 0;
  std::int32_t pixel_count = 1;
  std::int32_t label = -1;  // ground-truth class, -1 when unknown
  Source source = Source::kPixelAverage;
  float foreground_score = 0.0f;
  std::vector<float> embedding;
};

// Pixel-level embeddings of one image plus whatever side data was extracted
// with them. Pixels are row-major over the grid, origin top-left.
struct FeatureMap {
  std::string id;
  GridSize grid;
  MatrixF features;               // n x d
  MatrixF attention;              // heads x n, empty when absent
  GridSize image_size;            // original resolution, {0,0} when absent
  std::vector<std::int32_t> labels;  // ground truth at label_grid(), empty when absent
  std::vector<RegionEmbedding> regions;

  int pixel_count() const { return grid.count(); }
  int dim() const { return static_cast<int>(features.cols()); }
  bool has_attention() const { return attention.size() > 0; }
  bool has_labels() const { return !labels.empty(); }
  GridSize label_grid() const { return image_size.count() > 0 ? image_size : grid; }

  void validate() const {
    if (grid.height <= 0 || grid.width <= 0) throw std::invalid_argument("FeatureMap " + id + ": empty grid");
    if (features.rows() != grid.count()) {
      throw ShapeError("FeatureMap " + id + ": " + std::to_string(features.rows()) + " feature rows for grid " +
                       std::to_string(grid.height) + "x" + std::to_string(grid.width));
    }
    if (has_attention() && attention.cols() != grid.count()) {
      throw ShapeError("FeatureMap " + id + ": attention has " + std::to_string(attention.cols()) + " columns");
    }
    if (has_labels() && static_cast<int>(labels.size()) != label_grid().count()) {
      throw ShapeError("FeatureMap " + id + ": " + std::to_string(labels.size()) + " labels for label grid");
    }
  }
};

}  // namespace acseg
