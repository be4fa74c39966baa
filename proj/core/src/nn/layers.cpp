#include "sevdet/nn/layers.hpp"

#include "sevdet/error.hpp"

namespace sevdet::nn {

Tensor Conv2d::forward(const Tensor& x, Mode) {
  input_ = x;
  return conv2d(x, p_, p_.hyper.stride, p_.hyper.padding);
}

Tensor Conv2d::backward(const Tensor& g) {
  return conv2d_backward(input_, p_, p_.hyper.stride, p_.hyper.padding, g);
}

Tensor Conv2d::infer(const Tensor& x) const {
  return conv2d(x, p_, p_.hyper.stride, p_.hyper.padding);
}

Tensor ConvTranspose2d::forward(const Tensor& x, Mode) {
  input_ = x;
  return conv_transpose2d(x, p_, p_.hyper.stride, p_.hyper.padding);
}

Tensor ConvTranspose2d::backward(const Tensor& g) {
  return conv_transpose2d_backward(input_, p_, p_.hyper.stride, p_.hyper.padding, g);
}

Tensor ConvTranspose2d::infer(const Tensor& x) const {
  return conv_transpose2d(x, p_, p_.hyper.stride, p_.hyper.padding);
}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  input_ = x;
  mode_ = mode;
  return batchnorm(x, p_, mode);
}

Tensor BatchNorm::backward(const Tensor& g) { return batchnorm_backward(input_, p_, mode_, g); }

Tensor BatchNorm::infer(const Tensor& x) const { return batchnorm_infer(x, p_); }

Tensor Dense::forward(const Tensor& x, Mode) {
  input_ = x;
  return dense(x, p_);
}

Tensor Dense::backward(const Tensor& g) { return dense_backward(input_, p_, g); }

Tensor Dense::infer(const Tensor& x) const { return dense(x, p_); }

Tensor Relu::forward(const Tensor& x, Mode) {
  input_ = x;
  return relu(x);
}

Tensor Relu::backward(const Tensor& g) { return relu_backward(input_, g); }

Tensor Sigmoid::forward(const Tensor& x, Mode) {
  output_ = sigmoid(x);
  return output_;
}

Tensor Sigmoid::backward(const Tensor& g) { return sigmoid_backward(output_, g); }

Tensor MaxPool2::forward(const Tensor& x, Mode) {
  input_ = x;
  return maxpool2(x);
}

Tensor MaxPool2::backward(const Tensor& g) { return maxpool2_backward(input_, g); }

Tensor GlobalAvgPool::forward(const Tensor& x, Mode) {
  in_shape_ = x.shape();
  return global_avg_pool(x);
}

Tensor GlobalAvgPool::backward(const Tensor& g) {
  return global_avg_pool_backward(in_shape_, g);
}

Tensor Reshape::forward(const Tensor& x, Mode) {
  in_shape_ = x.shape();
  return infer(x);
}

Tensor Reshape::backward(const Tensor& g) { return g.reshaped(in_shape_); }

Tensor Reshape::infer(const Tensor& x) const {
  if (x.rank() == 0) throw ShapeError("reshape: empty input");
  Shape s{x.dim(0)};
  s.insert(s.end(), tail_.begin(), tail_.end());
  return x.reshaped(std::move(s));
}

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  Tensor h = x;
  for (auto& l : layers_) h = l->forward(h, mode);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

Tensor Sequential::infer(const Tensor& x) const {
  Tensor h = x;
  for (const auto& l : layers_) h = l->infer(h);
  return h;
}

std::vector<std::pair<std::string, LayerParams*>> Sequential::named_params(
    const std::string& prefix) {
  std::vector<std::pair<std::string, LayerParams*>> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (auto* p = layers_[i]->params()) {
      out.emplace_back(prefix + std::to_string(i) + "_" + std::string(layers_[i]->name()), p);
    }
  }
  return out;
}

std::vector<std::pair<std::string, const LayerParams*>> Sequential::named_params(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, const LayerParams*>> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (const auto* p = std::as_const(*layers_[i]).params()) {
      out.emplace_back(prefix + std::to_string(i) + "_" + std::string(layers_[i]->name()), p);
    }
  }
  return out;
}

std::vector<Tensor*> Sequential::trainable() {
  std::vector<Tensor*> out;
  for (auto& l : layers_) {
    if (auto* p = l->params()) {
      out.push_back(&p->weights);
      out.push_back(&p->bias);
    }
  }
  return out;
}

void add_conv_pool_stages(Sequential& net, std::size_t in_channels,
                          const std::vector<std::size_t>& channels, Rng& rng) {
  std::size_t cin = in_channels;
  for (std::size_t c : channels) {
    auto conv = LayerParams::conv(cin, c, 3, 1, Padding::Same);
    conv.init_he_uniform(rng);
    net.add<Conv2d>(std::move(conv));
    net.add<BatchNorm>(LayerParams::batchnorm(c));
    net.add<Relu>();
    net.add<MaxPool2>();
    cin = c;
  }
}

BatchStatsPass::BatchStatsPass(std::span<LayerParams* const> params) {
  for (LayerParams* p : params) {
    if (p->kind == LayerKind::BatchNorm) bn_.emplace_back(p, p->hyper.momentum);
  }
}

BatchStatsPass::~BatchStatsPass() {
  for (auto& [p, momentum] : bn_) p->hyper.momentum = momentum;
}

void BatchStatsPass::next_batch(std::size_t batch_size) {
  if (batch_size == 0) throw InvalidArgument("BatchStatsPass: empty batch");
  seen_ += batch_size;
  const double m = static_cast<double>(batch_size) / static_cast<double>(seen_);
  for (auto& [p, momentum] : bn_) p->hyper.momentum = m;
}

}  // namespace sevdet::nn
