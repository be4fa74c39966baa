#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sevdet/nn/adam.hpp"
#include "sevdet/nn/checkpoint.hpp"
#include "sevdet/nn/layers.hpp"
#include "sevdet/synth/synth.hpp"

namespace sevdet::vae {

using nn::Tensor;

struct VaeConfig {
  std::size_t input_size = 64;
  std::size_t latent_dim = 32;
  std::vector<std::size_t> channels{16, 32, 64, 128};
  /// Zero until calibrated; gate decisions compare total loss against it.
  double loss_threshold = 0.0;

  /// Spatial extent after the encoder's pools.
  std::size_t bottleneck_size() const;
  std::size_t flatten_width() const;
  void validate() const;
};

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

struct GaussianCode {
  Tensor mu;      ///< [B,Q]
  Tensor logvar;  ///< [B,Q], clamped to [kLogvarMin, kLogvarMax]
};

/// Per-image loss terms; total[i] == recon[i] + kl[i].
struct VaeLossReport {
  std::vector<double> recon;
  std::vector<double> kl;
  std::vector<double> total;
  double mean_total() const;
};

/// z = mu + exp(logvar/2) * noise.
Tensor reparameterize(const GaussianCode& code, const Tensor& noise);

/// KL divergence of N(mu, exp(logvar)) from N(0,1), summed over the latent.
double kl_divergence(std::span<const double> mu, std::span<const double> logvar);

/// Bernoulli negative log-likelihood (summed per image) plus KL per image.
/// `recon` holds probabilities in [0,1]; images must lie in [0,1].
VaeLossReport elbo_loss(const Tensor& images, const Tensor& recon, const GaussianCode& code);

/// Convolutional VAE: four conv/bn/relu/pool stages, twin dense heads, and a
/// mirrored upsample/transposed-conv decoder ending in a sigmoid.
class Vae {
 public:
  Vae(const VaeConfig& config, std::uint64_t seed);

  const VaeConfig& config() const { return config_; }
  void set_threshold(double t) { config_.loss_threshold = t; }

  /// Infer-mode encoder; logvar is clamped.
  GaussianCode encode(const Tensor& images) const;
  /// Infer-mode decoder returning probabilities in (0,1).
  Tensor decode(const Tensor& z) const;
  /// Deterministic per-image loss with z = mu.
  VaeLossReport loss(const Tensor& images) const;

  /// Train-mode pass with injected noise; caches activations for `backward`.
  VaeLossReport forward_train(const Tensor& images, const Tensor& noise);
  /// Accumulates gradients of the batch-mean total loss from the last
  /// `forward_train` into every trainable tensor.
  void backward();

  std::vector<Tensor*> trainable();
  /// Every stored array, for f32 snapping.
  std::vector<nn::LayerParams*> all_params();

  nn::Checkpoint to_checkpoint() const;
  static Vae from_checkpoint(const nn::Checkpoint& ckpt);

 private:
  Tensor encoder_trunk_infer(const Tensor& images) const;
  void check_input(const Tensor& images) const;

  VaeConfig config_;
  nn::Sequential encoder_;
  nn::Dense mu_head_;
  nn::Dense logvar_head_;
  nn::Sequential decoder_;

  // Training cache.
  Tensor images_, noise_, mu_, logvar_raw_, logvar_, logits_;
};

struct VaeTrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  nn::AdamConfig adam{};
  std::uint64_t seed = 1;
};

struct VaeTrainResult {
  Vae model;
  std::vector<double> train_loss;  ///< mean sampled total loss per epoch
  std::vector<double> val_loss;    ///< mean deterministic total loss per epoch
};

/// Trains on event-class images only. Throws InvalidArgument on an empty set
/// or on any scene-class / pool image. Parameters are snapped to f32 at the end.
VaeTrainResult train_vae(const VaeConfig& config, const std::vector<synth::LabeledImage>& train,
                         const std::vector<synth::LabeledImage>& val, const VaeTrainOptions& opts);

/// Deterministic per-image losses, evaluated in batches.
std::vector<double> image_losses(const Vae& model, const std::vector<const Tensor*>& images,
                                 std::size_t batch_size = 32);

struct GateDecision {
  bool accepted;
  double loss;
};

/// Accepts iff the deterministic loss is <= threshold.
GateDecision gate(const Vae& model, const Tensor& image, double threshold);
GateDecision gate_from_loss(double loss, double threshold);

struct Calibration {
  double threshold;
  double balanced_accuracy;
};

/// Balanced accuracy of "accept iff loss <= t" with `in` as positives.
double balanced_accuracy(const std::vector<double>& in, const std::vector<double>& out, double t);

/// Sweeps every decision boundary between the pooled sorted losses (below the
/// minimum, midpoints of adjacent distinct values, and the maximum) and returns
/// the first threshold of maximal balanced accuracy.
Calibration calibrate_threshold(const std::vector<double>& in, const std::vector<double>& out);

/// Structured calibration report: key/value header lines, then a CSV
/// histogram with shared bin edges for both loss populations.
std::string calibration_report(const Calibration& cal, const std::vector<double>& in,
                               const std::vector<double>& out, std::size_t bins = 30);

}  // namespace sevdet::vae
