#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sevdet/classifier/classifier.hpp"
#include "sevdet/nn/adam.hpp"
#include "sevdet/nn/checkpoint.hpp"
#include "sevdet/nn/layers.hpp"
#include "sevdet/synth/synth.hpp"

namespace sevdet::finegrain {

using nn::Shape;
using nn::Tensor;

enum class CardColor : std::size_t { Yellow = 0, Red = 1 };

std::string_view to_string(CardColor c);
/// Yellow/Red for the two card labels; nullopt otherwise.
std::optional<CardColor> card_color_of(ClassLabel c);
EventKind event_kind_of(CardColor c);

struct CardVerdict {
  CardColor color;
  double confidence;  ///< max of the two-way softmax, in [0.5,1]
};

/// Per-branch attended features and excitation masks for a batch.
struct AttentionFeatures {
  std::vector<Tensor> features;  ///< P tensors of [B,D]
  std::vector<Tensor> masks;     ///< P tensors of [B,C], entries in (0,1)
};

/// One-squeeze multi-excitation: a shared global-average squeeze feeding P
/// excitation branches m_p = sigmoid(W2 relu(W1 s)), each producing
/// f_p = W3 gap(m_p * map).
class Osme {
 public:
  Osme(std::size_t channels, std::size_t branches, std::size_t feature_dim, std::size_t reduction,
       Rng& rng);

  std::size_t channels() const { return channels_; }
  std::size_t branches() const { return branches_.size(); }
  std::size_t feature_dim() const { return feature_dim_; }

  AttentionFeatures forward(const Tensor& map, nn::Mode mode);
  AttentionFeatures infer(const Tensor& map) const;
  /// Gradient w.r.t. the feature map given per-branch feature gradients.
  Tensor backward(std::span<const Tensor> grad_features);

  /// Branch p layers are named osme<p>_{squeeze,excite,project}.
  std::vector<std::pair<std::string, nn::LayerParams*>> named_params();
  std::vector<std::pair<std::string, const nn::LayerParams*>> named_params() const;

 private:
  struct Branch {
    nn::Dense squeeze;  ///< C -> C/r
    nn::Relu relu;
    nn::Dense excite;  ///< C/r -> C
    nn::Sigmoid gate;
    nn::Dense project;  ///< C -> D
    Tensor mask;
  };

  void check_map(const Tensor& map) const;

  std::size_t channels_;
  std::size_t feature_dim_;
  std::vector<Branch> branches_;
  Shape map_shape_;
  Tensor squeezed_;
};

AttentionFeatures osme_forward(const Tensor& feature_map, const Osme& osme);

struct MamcResult {
  double loss;
  std::vector<Tensor> grad;  ///< d loss / d features, per branch
};

/// N-pair softmax contrast per (sample, branch) anchor over L2-normalized
/// features: -ln(sum_pos e^sim / sum_all e^sim), averaged over anchors.
/// Positives share the anchor's class and branch; "all" is every other sample
/// of the same branch. Throws if any present class has a single sample.
MamcResult mamc_loss(std::span<const Tensor> features, std::span<const std::size_t> labels);

struct FinegrainConfig {
  std::size_t input_size = 64;
  std::vector<std::size_t> channels{16, 32, 64};
  std::size_t branches = 2;
  std::size_t feature_dim = 64;
  std::size_t reduction = 4;
  double lambda_mamc = 0.5;

  void validate() const;
};

struct FinegrainLoss {
  double ce;
  double mamc;
  double total;  ///< ce + lambda * mamc
};

/// Backbone feature map -> OSME -> concatenated branch features -> 2-way head.
class FinegrainModel {
 public:
  FinegrainModel(const FinegrainConfig& config, std::uint64_t seed);

  const FinegrainConfig& config() const { return config_; }

  AttentionFeatures attention(const Tensor& images) const;
  Tensor logits(const Tensor& images) const;
  std::vector<CardVerdict> predict(const Tensor& images) const;

  /// Train-mode loss; `lambda` overrides the config weight.
  FinegrainLoss forward_train(const Tensor& images, std::span<const std::size_t> labels, double lambda);
  void backward();
  /// Train-mode backbone forward that only updates BatchNorm running statistics.
  void update_batch_stats(const Tensor& images);

  std::vector<Tensor*> trainable();
  std::vector<nn::LayerParams*> all_params();

  nn::Checkpoint to_checkpoint() const;
  static FinegrainModel from_checkpoint(const nn::Checkpoint& ckpt);

 private:
  void check_input(const Tensor& images) const;
  Tensor concat(const AttentionFeatures& a) const;

  FinegrainConfig config_;
  nn::Sequential backbone_;
  Osme osme_;
  nn::Dense head_;

  double lambda_ = 0.0;
  Tensor dlogits_;
  std::vector<Tensor> dmamc_;
};

CardVerdict classify_card(const FinegrainModel& model, const Tensor& image);

struct CardSample {
  const Tensor* image;
  CardColor color;
};

/// Card images only; everything else is skipped.
std::vector<CardSample> card_samples(const std::vector<synth::LabeledImage>& images);

struct FinegrainTrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;  ///< even; each batch holds half of each colour
  nn::AdamConfig adam{};
  classifier::AugmentConfig augment{};
  std::uint64_t seed = 1;
  bool keep_best = true;   ///< same rule as classifier::TrainOptions
  bool precise_bn = true;  ///< same rule as classifier::TrainOptions
};

struct FinegrainTrainResult {
  FinegrainModel model;
  std::vector<double> train_loss;
  std::vector<double> val_accuracy;
  std::size_t best_epoch = 0;
};

/// Throws InvalidArgument unless both colours have at least two samples.
FinegrainTrainResult train_finegrain(const FinegrainConfig& config, std::span<const CardSample> train,
                                     std::span<const CardSample> val, const FinegrainTrainOptions& opts);

double card_accuracy(const FinegrainModel& model, std::span<const CardSample> samples);

/// CSV: frame_id,p_Yellow,p_Red,color,confidence.
void write_card_csv(std::ostream& os, std::span<const std::string> frame_ids, const FinegrainModel& model,
                    std::span<const Tensor* const> images);

}  // namespace sevdet::finegrain
