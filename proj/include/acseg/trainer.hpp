#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "acseg/acg.hpp"
#include "acseg/adamw.hpp"
#include "acseg/assignment.hpp"
#include "acseg/feature_map.hpp"
#include "acseg/modularity.hpp"

namespace acseg {

enum class BatchReduction { kMean, kSum };

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  int iterations = 2500;
  int batch_size = 32;
  int num_prototypes = 5;
  int num_steps = 6;
  int image_side = 224;  // resolution the features were extracted at; recorded only
  int num_heads = 0;
  int ffn_expansion = 4;
  double prototype_init_std = 0.02;
  std::uint64_t seed = 0;
  int threads = 1;
  bool include_diagonal = true;
  bool decay_all = false;
  BatchReduction reduction = BatchReduction::kMean;

  void validate() const;
  AcgConfig acg_config(int embed_dim) const;
};

struct TrainResult {
  AcgParams<double> params;
  std::vector<double> loss_history;  // batch loss per iteration
  int skipped_images = 0;            // images with zero total edge weight
};

using ProgressFn = std::function<void(int iteration, double loss)>;

// Random-access view over a training corpus, so large corpora can be streamed
// from disk.
class FeatureSource {
 public:
  virtual ~FeatureSource() = default;
  virtual std::size_t size() const = 0;
  virtual FeatureMap get(std::size_t index) const = 0;
};

class InMemorySource : public FeatureSource {
 public:
  explicit InMemorySource(const std::vector<FeatureMap>& maps) : maps_(maps) {}
  std::size_t size() const override { return maps_.size(); }
  FeatureMap get(std::size_t index) const override { return maps_.at(index); }

 private:
  const std::vector<FeatureMap>& maps_;
};

// Loss and parameter gradients for one image.
struct ImageGradient {
  double loss = 0.0;
  bool skipped = false;
  AcgParams<double> grads;
};

ImageGradient image_gradient(const AcgParams<double>& params, const MatrixF& features,
                             const ModularityOptions& opt = {});

// Batch loss for fixed parameters, without gradients.
double batch_loss(const AcgParams<double>& params, const std::vector<FeatureMap>& batch,
                  const ModularityOptions& opt = {}, BatchReduction reduction = BatchReduction::kMean);

TrainResult train(const FeatureSource& data, const TrainConfig& cfg, const ProgressFn& progress = {});

// Continues from existing parameters (e.g. lr-0 sanity runs or fine-tuning).
TrainResult train_from(AcgParams<double> params, const FeatureSource& data, const TrainConfig& cfg,
                       const ProgressFn& progress = {});

template <typename Scalar>
struct InferenceResult {
  ConceptSet<Scalar> concepts;
  AssignmentMatrix<Scalar> assignment;  // at the original resolution when known
};

// concepts -> cosine soft assignment -> bilinear upsampling -> argmax.
template <typename Scalar>
InferenceResult<Scalar> infer(const AcgParams<Scalar>& params, const FeatureMap& fm) {
  fm.validate();
  const Matrix<Scalar> x = fm.features.cast<Scalar>();
  auto concepts = generate_concepts(params, x, fm.id);
  const Matrix<Scalar> soft = soft_assign(x, concepts.concepts);
  return {std::move(concepts), assign_at_resolution(soft, fm.grid, fm.image_size)};
}

template <typename Scalar>
std::vector<InferenceResult<Scalar>> infer_batch(const AcgParams<Scalar>& params, const std::vector<FeatureMap>& maps,
                                                 int threads = 1);

// Moving average over `window` entries.
std::vector<double> moving_average(const std::vector<double>& values, int window);

}  // namespace acseg
