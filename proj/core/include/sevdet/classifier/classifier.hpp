#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sevdet/classifier/labels.hpp"
#include "sevdet/nn/adam.hpp"
#include "sevdet/nn/checkpoint.hpp"
#include "sevdet/nn/layers.hpp"
#include "sevdet/synth/synth.hpp"

namespace sevdet::classifier {

using nn::Tensor;

/// Which label space a classifier predicts in.
enum class Taxonomy { Nine, Ten };

std::size_t num_classes(Taxonomy t);
std::string_view class_name(Taxonomy t, std::size_t index);

struct ClassifierConfig {
  std::size_t input_size = 64;
  std::vector<std::size_t> channels{16, 32, 64};
  Taxonomy taxonomy = Taxonomy::Nine;

  void validate() const;
};

/// conv3x3/bn/relu/pool stages on RGB input; output is a [B,C,H,W] feature map.
nn::Sequential build_backbone(const std::vector<std::size_t>& channels, Rng& rng);

struct ClassifierOutput {
  std::vector<double> probs;
  std::size_t top_index = 0;
  double top_prob = 0.0;
};

/// Softmax row to output; top_index is the first maximum.
ClassifierOutput make_output(std::span<const double> probs);

/// Backbone, global average pool, dense head, softmax.
class Classifier {
 public:
  Classifier(const ClassifierConfig& config, std::uint64_t seed);
  /// Custom backbone producing `feature_channels` channels.
  Classifier(const ClassifierConfig& config, nn::Sequential backbone, std::size_t feature_channels,
             std::uint64_t seed);

  const ClassifierConfig& config() const { return config_; }

  Tensor logits(const Tensor& images) const;
  std::vector<ClassifierOutput> predict(const Tensor& images) const;

  /// Train-mode fused softmax cross-entropy (batch mean); caches for backward.
  double forward_train(const Tensor& images, std::span<const std::size_t> labels);
  void backward();
  /// Train-mode forward that only updates BatchNorm running statistics.
  void update_batch_stats(const Tensor& images);

  std::vector<Tensor*> trainable();
  std::vector<nn::LayerParams*> all_params();

  nn::Checkpoint to_checkpoint() const;
  static Classifier from_checkpoint(const nn::Checkpoint& ckpt);

 private:
  void check_input(const Tensor& images) const;

  ClassifierConfig config_;
  nn::Sequential net_;
  Tensor dlogits_;
};

/// Accepts iff top_prob > tau (strict). Requires tau in [0,1).
std::optional<ClassifierOutput> classify_with_threshold(const ClassifierOutput& out, double tau);
std::optional<ClassifierOutput> classify_with_threshold(const Classifier& model, const Tensor& image,
                                                        double tau);

struct AugmentConfig {
  bool enabled = true;
  double scale = 0.10;       ///< relative, symmetric
  double rotate_deg = 10.0;  ///< symmetric
  double shift = 0.10;       ///< fraction of the side, symmetric per axis
  double flip_prob = 0.5;
  /// Allow horizontal flips of LeftPenaltyArea/RightPenaltyArea images.
  bool flip_sided_scenes = false;
};

struct Sample {
  const Tensor* image;
  std::size_t label;
};

/// Nine-class samples (cards merged); pool images are skipped.
std::vector<Sample> nine_class_samples(const std::vector<synth::LabeledImage>& images);
/// Ten-class samples; pool images are skipped.
std::vector<Sample> ten_class_samples(const std::vector<synth::LabeledImage>& images);

/// True when a flip of class `label` changes its meaning.
bool is_sided(Taxonomy t, std::size_t label);

/// Draws one augmentation for a sample of class `label`.
Tensor augment(const Tensor& image, Taxonomy t, std::size_t label, const AugmentConfig& cfg,
               Rng& rng);

struct TrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  nn::AdamConfig adam{};
  AugmentConfig augment{};
  std::uint64_t seed = 1;
  /// Return the weights of the epoch with the best validation accuracy (the
  /// latest on ties) instead of the final epoch.
  bool keep_best = true;
  /// After each epoch, recompute BatchNorm running statistics as exact
  /// averages over the unaugmented training set.
  bool precise_bn = true;
};

struct TrainResult {
  Classifier model;
  std::vector<double> train_loss;    ///< mean cross-entropy per epoch
  std::vector<double> val_accuracy;  ///< argmax accuracy per epoch
  std::size_t best_epoch = 0;        ///< epoch whose weights `model` holds
};

/// Throws InvalidArgument if any class of the taxonomy has no training sample.
TrainResult train_classifier(const ClassifierConfig& config, std::span<const Sample> train,
                             std::span<const Sample> val, const TrainOptions& opts);

/// Batched prediction over individual images.
std::vector<ClassifierOutput> predict_all(const Classifier& model,
                                          std::span<const Tensor* const> images,
                                          std::size_t batch_size = 32);

double argmax_accuracy(const Classifier& model, std::span<const Sample> samples);

/// CSV with columns frame_id, one probability per class, top_class, decision,
/// where decision is one of accepted, scene, low_confidence.
void write_predictions_csv(std::ostream& os, Taxonomy t, std::span<const std::string> frame_ids,
                           std::span<const ClassifierOutput> outputs, double tau);

}  // namespace sevdet::classifier
