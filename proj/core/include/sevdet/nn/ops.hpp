#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "sevdet/nn/tensor.hpp"
#include "sevdet/random.hpp"

namespace sevdet::nn {

enum class LayerKind { Conv, ConvTranspose, Dense, BatchNorm };
enum class Padding { Same, Valid };
enum class Mode { Train, Infer };
enum class Activation { Relu, Sigmoid, SoftmaxRows };

std::string_view to_string(LayerKind kind);

struct LayerHyper {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  Padding padding = Padding::Same;
  double momentum = 0.1;  // BatchNorm running-stat update rate
  double eps = 1e-5;      // BatchNorm variance floor
};

/// Weights and hyperparameters of one parametric layer.
///
/// Weight layouts:
///   Conv           [out, in, k, k]
///   ConvTranspose  [in, out, k, k]   (the adjoint of a Conv with the same tensor)
///   Dense          [out, in]
///   BatchNorm      weights = scale[C], bias = shift[C], running_mean/var [C]
struct LayerParams {
  LayerKind kind = LayerKind::Dense;
  LayerHyper hyper;
  Tensor weights;
  Tensor bias;
  Tensor running_mean;
  Tensor running_var;

  static LayerParams conv(std::size_t in, std::size_t out, std::size_t kernel,
                          std::size_t stride = 1, Padding pad = Padding::Same);
  static LayerParams conv_transpose(std::size_t in, std::size_t out, std::size_t kernel,
                                    std::size_t stride = 1, Padding pad = Padding::Same);
  static LayerParams dense(std::size_t in, std::size_t out);
  static LayerParams batchnorm(std::size_t channels, double momentum = 0.1,
                               double eps = 1e-5);

  /// He-uniform weights, zero bias. No-op for BatchNorm.
  void init_he_uniform(Rng& rng);

  /// Throws ShapeError/InvalidArgument when weights disagree with `hyper`
  /// or BatchNorm running variance is not strictly positive.
  void validate() const;

  /// Trainable tensors (weights, bias).
  std::vector<Tensor*> trainable();
};

std::size_t padding_amount(Padding pad, std::size_t kernel);
std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             Padding pad);
std::size_t conv_transpose_output_size(std::size_t in, std::size_t kernel,
                                       std::size_t stride, Padding pad);

// ---- Forward ops -----------------------------------------------------------

Tensor conv2d(const Tensor& input, const LayerParams& params, std::size_t stride,
              Padding pad);
Tensor conv_transpose2d(const Tensor& input, const LayerParams& params,
                        std::size_t stride, Padding pad = Padding::Same);
Tensor maxpool2(const Tensor& input);
Tensor upsample2(const Tensor& input);
/// Train mode normalizes with batch statistics and updates running stats.
Tensor batchnorm(const Tensor& input, LayerParams& params, Mode mode);
/// Infer-mode only; never mutates params.
Tensor batchnorm_infer(const Tensor& input, const LayerParams& params);
Tensor dense(const Tensor& input, const LayerParams& params);
Tensor activation(const Tensor& input, Activation kind);
Tensor relu(const Tensor& input);
Tensor sigmoid(const Tensor& input);
Tensor softmax_rows(const Tensor& logits);
Tensor global_avg_pool(const Tensor& input);

/// Mean of −ln p[label] over the batch. Rows must sum to one.
double cross_entropy(const Tensor& probs, std::span<const std::size_t> labels);

struct SoftmaxCrossEntropy {
  double loss = 0.0;
  Tensor probs;
  Tensor dlogits;  // d(mean loss)/d logits
};

/// Fused softmax + cross-entropy over rows of `logits`.
SoftmaxCrossEntropy softmax_cross_entropy(const Tensor& logits,
                                          std::span<const std::size_t> labels);

// ---- Backward ops ------------------------------------------------------------
// Each takes the forward input and the upstream gradient, returns the input
// gradient, and accumulates parameter gradients into params.weights/bias.grad.

Tensor conv2d_backward(const Tensor& input, LayerParams& params, std::size_t stride,
                       Padding pad, const Tensor& grad_out);
Tensor conv_transpose2d_backward(const Tensor& input, LayerParams& params,
                                 std::size_t stride, Padding pad, const Tensor& grad_out);
Tensor maxpool2_backward(const Tensor& input, const Tensor& grad_out);
Tensor upsample2_backward(const Tensor& grad_out);
Tensor batchnorm_backward(const Tensor& input, LayerParams& params, Mode mode,
                          const Tensor& grad_out);
Tensor dense_backward(const Tensor& input, LayerParams& params, const Tensor& grad_out);
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);
/// Takes the sigmoid *output*.
Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_out);
Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out);

}  // namespace sevdet::nn
