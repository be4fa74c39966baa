#pragma once

#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sevdet/nn/ops.hpp"

namespace sevdet::nn {

/// A differentiable stage.
///
/// `forward` caches whatever `backward` needs and may update BatchNorm running
/// statistics in train mode. `infer` is const and never touches the cache, so
/// a trained model can serve concurrent inference.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual Tensor infer(const Tensor& x) const = 0;
  virtual std::string_view name() const = 0;
  virtual LayerParams* params() { return nullptr; }
  virtual const LayerParams* params() const { return nullptr; }
};

class Conv2d final : public Layer {
 public:
  explicit Conv2d(LayerParams p) : p_(std::move(p)) { p_.validate(); }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& g) override;
  Tensor infer(const Tensor& x) const override;
  std::string_view name() const override { return "conv"; }
  LayerParams* params() override { return &p_; }
  const LayerParams* params() const override { return &p_; }

 private:
  LayerParams p_;
  Tensor input_;
};

class ConvTranspose2d final : public Layer {
 public:
  explicit ConvTranspose2d(LayerParams p) : p_(std::move(p)) { p_.validate(); }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& g) override;
  Tensor infer(const Tensor& x) const override;
  std::string_view name() const override { return "conv_transpose"; }
  LayerParams* params() override { return &p_; }
  const LayerParams* params() const override { return &p_; }

 private:
  LayerParams p_;
  Tensor input_;
};

class BatchNorm final : public Layer {
 public:
  explicit BatchNorm(LayerParams p) : p_(std::move(p)) { p_.validate(); }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& g) override;
  Tensor infer(const Tensor& x) const override;
  std::string_view name() const override { return "batchnorm"; }
  LayerParams* params() override { return &p_; }
  const LayerParams* params() const override { return &p_; }

 private:
  LayerParams p_;
  Tensor input_;
  Mode mode_ = Mode::Train;
};

class Dense final : public Layer {
 public:
  explicit Dense(LayerParams p) : p_(std::move(p)) { p_.validate(); }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& g) override;
  Tensor infer(const Tensor& x) const override;
  std::string_view name() const override { return "dense"; }
  LayerParams* params() override { return &p_; }
  const LayerParams* params() const override { return &p_; }

 private:
  LayerParams p_;
  Tensor input_;
};

class Relu final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& g) override;
  Tensor infer(const Tensor& x) const override { return relu(x); }
  std::string_view name() const override { return "relu"; }

 private:
  Tensor input_;
};

class Sigmoid final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& g) override;
  Tensor infer(const Tensor& x) const override { return sigmoid(x); }
  std::string_view name() const override { return "sigmoid"; }

 private:
  Tensor output_;
};

class MaxPool2 final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& g) override;
  Tensor infer(const Tensor& x) const override { return maxpool2(x); }
  std::string_view name() const override { return "maxpool2"; }

 private:
  Tensor input_;
};

class Upsample2 final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode) override { return upsample2(x); }
  Tensor backward(const Tensor& g) override { return upsample2_backward(g); }
  Tensor infer(const Tensor& x) const override { return upsample2(x); }
  std::string_view name() const override { return "upsample2"; }
};

class GlobalAvgPool final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& g) override;
  Tensor infer(const Tensor& x) const override { return global_avg_pool(x); }
  std::string_view name() const override { return "global_avg_pool"; }

 private:
  Shape in_shape_;
};

/// Reshapes every batch row to `tail` (the batch dim is kept).
class Reshape final : public Layer {
 public:
  explicit Reshape(Shape tail) : tail_(std::move(tail)) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& g) override;
  Tensor infer(const Tensor& x) const override;
  std::string_view name() const override { return "reshape"; }

 private:
  Shape tail_;
  Shape in_shape_;
};

/// Ordered stack of layers.
class Sequential {
 public:
  Sequential() = default;
  Sequential(Sequential&&) = default;
  Sequential& operator=(Sequential&&) = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& grad_out);
  Tensor infer(const Tensor& x) const;

  std::size_t size() const { return layers_.size(); }
  Layer& at(std::size_t i) { return *layers_.at(i); }
  const Layer& at(std::size_t i) const { return *layers_.at(i); }

  /// Parametric layers named `<prefix><index>_<kind>` in stack order.
  std::vector<std::pair<std::string, LayerParams*>> named_params(const std::string& prefix);
  std::vector<std::pair<std::string, const LayerParams*>> named_params(
      const std::string& prefix) const;
  std::vector<Tensor*> trainable();

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// Appends `stages` of conv3x3(same)+batchnorm+relu+maxpool2 to `net`, each
/// stage using the next entry of `channels`. He-uniform initialized.
void add_conv_pool_stages(Sequential& net, std::size_t in_channels,
                          const std::vector<std::size_t>& channels, Rng& rng);

/// Re-estimates BatchNorm running statistics as a sample-weighted average over
/// one pass of train-mode forwards, replacing the exponential moving average.
/// Momentum is restored when the pass ends.
class BatchStatsPass {
 public:
  explicit BatchStatsPass(std::span<LayerParams* const> params);
  ~BatchStatsPass();
  BatchStatsPass(const BatchStatsPass&) = delete;
  BatchStatsPass& operator=(const BatchStatsPass&) = delete;

  /// Call before each forward of the pass with that batch's size.
  void next_batch(std::size_t batch_size);

 private:
  std::vector<std::pair<LayerParams*, double>> bn_;
  std::size_t seen_ = 0;
};

}  // namespace sevdet::nn
