#include "sevdet/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "sevdet/error.hpp"
#include "sevdet/nn/gemm.hpp"

namespace sevdet::nn {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::ConvTranspose: return "conv_transpose";
    case LayerKind::Dense: return "dense";
    case LayerKind::BatchNorm: return "batchnorm";
  }
  return "?";
}

LayerParams LayerParams::conv(std::size_t in, std::size_t out, std::size_t kernel,
                              std::size_t stride, Padding pad) {
  LayerParams p;
  p.kind = LayerKind::Conv;
  p.hyper = {in, out, kernel, stride, pad};
  p.weights = Tensor::zeros({out, in, kernel, kernel});
  p.bias = Tensor::zeros({out});
  return p;
}

LayerParams LayerParams::conv_transpose(std::size_t in, std::size_t out,
                                        std::size_t kernel, std::size_t stride,
                                        Padding pad) {
  LayerParams p;
  p.kind = LayerKind::ConvTranspose;
  p.hyper = {in, out, kernel, stride, pad};
  p.weights = Tensor::zeros({in, out, kernel, kernel});
  p.bias = Tensor::zeros({out});
  return p;
}

LayerParams LayerParams::dense(std::size_t in, std::size_t out) {
  LayerParams p;
  p.kind = LayerKind::Dense;
  p.hyper.in_channels = in;
  p.hyper.out_channels = out;
  p.weights = Tensor::zeros({out, in});
  p.bias = Tensor::zeros({out});
  return p;
}

LayerParams LayerParams::batchnorm(std::size_t channels, double momentum, double eps) {
  LayerParams p;
  p.kind = LayerKind::BatchNorm;
  p.hyper.in_channels = channels;
  p.hyper.out_channels = channels;
  p.hyper.momentum = momentum;
  p.hyper.eps = eps;
  p.weights = Tensor({channels}, 1.0);
  p.bias = Tensor::zeros({channels});
  p.running_mean = Tensor::zeros({channels});
  p.running_var = Tensor({channels}, 1.0);
  return p;
}

void LayerParams::init_he_uniform(Rng& rng) {
  std::size_t fan_in = 0;
  switch (kind) {
    case LayerKind::Conv:
    case LayerKind::ConvTranspose:
      fan_in = hyper.in_channels * hyper.kernel * hyper.kernel;
      break;
    case LayerKind::Dense:
      fan_in = hyper.in_channels;
      break;
    case LayerKind::BatchNorm:
      return;
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& w : weights.values()) w = uniform(rng, -bound, bound);
  for (auto& b : bias.values()) b = 0.0;
}

void LayerParams::validate() const {
  const auto& h = hyper;
  switch (kind) {
    case LayerKind::Conv:
      weights.expect_shape({h.out_channels, h.in_channels, h.kernel, h.kernel}, "conv weights");
      bias.expect_shape({h.out_channels}, "conv bias");
      break;
    case LayerKind::ConvTranspose:
      weights.expect_shape({h.in_channels, h.out_channels, h.kernel, h.kernel},
                           "conv_transpose weights");
      bias.expect_shape({h.out_channels}, "conv_transpose bias");
      break;
    case LayerKind::Dense:
      weights.expect_shape({h.out_channels, h.in_channels}, "dense weights");
      bias.expect_shape({h.out_channels}, "dense bias");
      break;
    case LayerKind::BatchNorm:
      weights.expect_shape({h.in_channels}, "batchnorm scale");
      bias.expect_shape({h.in_channels}, "batchnorm shift");
      running_mean.expect_shape({h.in_channels}, "batchnorm running_mean");
      running_var.expect_shape({h.in_channels}, "batchnorm running_var");
      for (double v : running_var.values()) {
        if (!(v > 0.0)) throw InvalidArgument("batchnorm running_var must be strictly positive");
      }
      break;
  }
  if (kind != LayerKind::BatchNorm && (h.kernel == 0) != (kind == LayerKind::Dense)) {
    throw InvalidArgument("kernel size must be set for convolutions only");
  }
}

std::vector<Tensor*> LayerParams::trainable() { return {&weights, &bias}; }

std::size_t padding_amount(Padding pad, std::size_t kernel) {
  return pad == Padding::Same ? (kernel - 1) / 2 : 0;
}

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             Padding pad) {
  const std::size_t p = padding_amount(pad, kernel);
  if (in + 2 * p < kernel) {
    throw ShapeError("conv input extent " + std::to_string(in) +
                     " smaller than kernel " + std::to_string(kernel));
  }
  return (in + 2 * p - kernel) / stride + 1;
}

std::size_t conv_transpose_output_size(std::size_t in, std::size_t kernel,
                                       std::size_t stride, Padding pad) {
  return pad == Padding::Same ? in * stride : (in - 1) * stride + kernel;
}

namespace {

struct Geometry {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;
};

// cols[(c*k + ki)*k + kj][oh*out_w + ow] = image[c][oh*s - p + ki][ow*s - p + kj]
void im2col(const Geometry& g, const double* image, double* cols) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = image + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width))
                          ? 0.0
                          : src[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the image.
void col2im(const Geometry& g, const double* cols, double* image) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* dst = image + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          const double* src = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.width)) {
              dst[static_cast<std::size_t>(iw)] += src[ow];
            }
          }
        }
      }
    }
  }
}

void expect_kind(const LayerParams& p, LayerKind kind, const char* op) {
  if (p.kind != kind) {
    throw InvalidArgument(std::string(op) + ": expected " + std::string(to_string(kind)) +
                          " params, got " + std::string(to_string(p.kind)));
  }
}

// Geometry for a Conv reading `input`; also checks channel agreement.
Geometry conv_geometry(const Tensor& input, const LayerParams& p, std::size_t stride,
                       Padding pad, const char* op) {
  input.expect_rank(4, op);
  if (input.dim(1) != p.hyper.in_channels) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(p.hyper.in_channels) +
                     " input channels, got shape " + shape_str(input.shape()));
  }
  if (stride == 0) throw InvalidArgument(std::string(op) + ": stride must be positive");
  const std::size_t k = p.hyper.kernel;
  return {input.dim(1),
          input.dim(2),
          input.dim(3),
          k,
          stride,
          padding_amount(pad, k),
          conv_output_size(input.dim(2), k, stride, pad),
          conv_output_size(input.dim(3), k, stride, pad)};
}

// ConvTranspose is conv-backward-data: geometry is that of the Conv whose
// output has the transpose's input extent.
Geometry conv_transpose_geometry(const Tensor& input, const LayerParams& p,
                                 std::size_t stride, Padding pad, const char* op) {
  input.expect_rank(4, op);
  if (input.dim(1) != p.hyper.in_channels) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(p.hyper.in_channels) +
                     " input channels, got shape " + shape_str(input.shape()));
  }
  if (stride == 0) throw InvalidArgument(std::string(op) + ": stride must be positive");
  const std::size_t k = p.hyper.kernel;
  return {p.hyper.out_channels,
          conv_transpose_output_size(input.dim(2), k, stride, pad),
          conv_transpose_output_size(input.dim(3), k, stride, pad),
          k,
          stride,
          padding_amount(pad, k),
          input.dim(2),
          input.dim(3)};
}

}  // namespace

Tensor conv2d(const Tensor& input, const LayerParams& params, std::size_t stride,
              Padding pad) {
  expect_kind(params, LayerKind::Conv, "conv2d");
  const Geometry g = conv_geometry(input, params, stride, pad, "conv2d");
  const std::size_t batch = input.dim(0);
  const std::size_t cout = params.hyper.out_channels;
  const std::size_t kdim = g.channels * g.kernel * g.kernel;
  const std::size_t plane = g.out_h * g.out_w;
  params.weights.expect_shape({cout, g.channels, g.kernel, g.kernel}, "conv2d weights");

  Tensor out({batch, cout, g.out_h, g.out_w});
  std::vector<double> cols(kdim * plane);
  const std::size_t in_stride = g.channels * g.height * g.width;
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(g, input.data() + b * in_stride, cols.data());
    double* ob = out.data() + b * cout * plane;
    for (std::size_t co = 0; co < cout; ++co) {
      std::fill(ob + co * plane, ob + (co + 1) * plane, params.bias[co]);
    }
    gemm_acc(cout, plane, kdim, params.weights.data(), cols.data(), ob);
  }
  return out;
}

Tensor conv2d_backward(const Tensor& input, LayerParams& params, std::size_t stride,
                       Padding pad, const Tensor& grad_out) {
  expect_kind(params, LayerKind::Conv, "conv2d_backward");
  const Geometry g = conv_geometry(input, params, stride, pad, "conv2d_backward");
  const std::size_t batch = input.dim(0);
  const std::size_t cout = params.hyper.out_channels;
  const std::size_t kdim = g.channels * g.kernel * g.kernel;
  const std::size_t plane = g.out_h * g.out_w;
  grad_out.expect_shape({batch, cout, g.out_h, g.out_w}, "conv2d_backward grad_out");
  params.weights.ensure_grad();
  params.bias.ensure_grad();

  Tensor grad_in = Tensor::zeros_like(input);
  std::vector<double> cols(kdim * plane);
  std::vector<double> cols_t(plane * kdim);
  std::vector<double> w_t(kdim * cout);
  transpose(cout, kdim, params.weights.data(), w_t.data());
  auto wgrad = params.weights.grad();
  auto bgrad = params.bias.grad();
  const std::size_t in_stride = g.channels * g.height * g.width;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* gb = grad_out.data() + b * cout * plane;
    im2col(g, input.data() + b * in_stride, cols.data());
    transpose(kdim, plane, cols.data(), cols_t.data());
    gemm_acc(cout, kdim, plane, gb, cols_t.data(), wgrad.data());
    for (std::size_t co = 0; co < cout; ++co) {
      double acc = 0.0;
      for (std::size_t j = 0; j < plane; ++j) acc += gb[co * plane + j];
      bgrad[co] += acc;
    }
    std::fill(cols.begin(), cols.end(), 0.0);
    gemm_acc(kdim, plane, cout, w_t.data(), gb, cols.data());
    col2im(g, cols.data(), grad_in.data() + b * in_stride);
  }
  return grad_in;
}

Tensor conv_transpose2d(const Tensor& input, const LayerParams& params,
                        std::size_t stride, Padding pad) {
  expect_kind(params, LayerKind::ConvTranspose, "conv_transpose2d");
  const Geometry g = conv_transpose_geometry(input, params, stride, pad, "conv_transpose2d");
  const std::size_t batch = input.dim(0);
  const std::size_t cin = params.hyper.in_channels;
  const std::size_t kdim = g.channels * g.kernel * g.kernel;
  const std::size_t plane = g.out_h * g.out_w;  // input plane of the transpose
  params.weights.expect_shape({cin, g.channels, g.kernel, g.kernel},
                              "conv_transpose2d weights");

  Tensor out({batch, g.channels, g.height, g.width});
  std::vector<double> w_t(kdim * cin);
  transpose(cin, kdim, params.weights.data(), w_t.data());
  std::vector<double> cols(kdim * plane);
  const std::size_t out_stride = g.channels * g.height * g.width;
  const std::size_t out_plane = g.height * g.width;
  for (std::size_t b = 0; b < batch; ++b) {
    std::fill(cols.begin(), cols.end(), 0.0);
    gemm_acc(kdim, plane, cin, w_t.data(), input.data() + b * cin * plane, cols.data());
    double* ob = out.data() + b * out_stride;
    col2im(g, cols.data(), ob);
    for (std::size_t c = 0; c < g.channels; ++c) {
      const double bias = params.bias[c];
      for (std::size_t j = 0; j < out_plane; ++j) ob[c * out_plane + j] += bias;
    }
  }
  return out;
}

Tensor conv_transpose2d_backward(const Tensor& input, LayerParams& params,
                                 std::size_t stride, Padding pad,
                                 const Tensor& grad_out) {
  expect_kind(params, LayerKind::ConvTranspose, "conv_transpose2d_backward");
  const Geometry g =
      conv_transpose_geometry(input, params, stride, pad, "conv_transpose2d_backward");
  const std::size_t batch = input.dim(0);
  const std::size_t cin = params.hyper.in_channels;
  const std::size_t kdim = g.channels * g.kernel * g.kernel;
  const std::size_t plane = g.out_h * g.out_w;
  grad_out.expect_shape({batch, g.channels, g.height, g.width},
                        "conv_transpose2d_backward grad_out");
  params.weights.ensure_grad();
  params.bias.ensure_grad();

  Tensor grad_in = Tensor::zeros_like(input);
  std::vector<double> cols(kdim * plane);
  std::vector<double> cols_t(plane * kdim);
  auto wgrad = params.weights.grad();
  auto bgrad = params.bias.grad();
  const std::size_t out_stride = g.channels * g.height * g.width;
  const std::size_t out_plane = g.height * g.width;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* gb = grad_out.data() + b * out_stride;
    im2col(g, gb, cols.data());
    // d input = W[cin, kdim] * cols[kdim, plane]
    gemm_acc(cin, plane, kdim, params.weights.data(), cols.data(),
             grad_in.data() + b * cin * plane);
    // dW[cin, kdim] += input[cin, plane] * cols^T[plane, kdim]
    transpose(kdim, plane, cols.data(), cols_t.data());
    gemm_acc(cin, kdim, plane, input.data() + b * cin * plane, cols_t.data(), wgrad.data());
    for (std::size_t c = 0; c < g.channels; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < out_plane; ++j) acc += gb[c * out_plane + j];
      bgrad[c] += acc;
    }
  }
  return grad_in;
}

Tensor maxpool2(const Tensor& input) {
  input.expect_rank(4, "maxpool2");
  const std::size_t b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2: spatial dims must be even, got shape " +
                     shape_str(input.shape()));
  }
  Tensor out({b, c, h / 2, w / 2});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < h / 2; ++i) {
        for (std::size_t j = 0; j < w / 2; ++j) {
          double m = input.at(n, ch, 2 * i, 2 * j);
          m = std::max(m, input.at(n, ch, 2 * i, 2 * j + 1));
          m = std::max(m, input.at(n, ch, 2 * i + 1, 2 * j));
          m = std::max(m, input.at(n, ch, 2 * i + 1, 2 * j + 1));
          out.at(n, ch, i, j) = m;
        }
      }
    }
  }
  return out;
}

Tensor maxpool2_backward(const Tensor& input, const Tensor& grad_out) {
  input.expect_rank(4, "maxpool2_backward");
  const std::size_t b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  grad_out.expect_shape({b, c, h / 2, w / 2}, "maxpool2_backward grad_out");
  Tensor grad_in = Tensor::zeros_like(input);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < h / 2; ++i) {
        for (std::size_t j = 0; j < w / 2; ++j) {
          // First row-major maximum wins ties.
          std::size_t bi = 2 * i, bj = 2 * j;
          double best = input.at(n, ch, bi, bj);
          for (std::size_t di = 0; di < 2; ++di) {
            for (std::size_t dj = 0; dj < 2; ++dj) {
              const double v = input.at(n, ch, 2 * i + di, 2 * j + dj);
              if (v > best) {
                best = v;
                bi = 2 * i + di;
                bj = 2 * j + dj;
              }
            }
          }
          grad_in.at(n, ch, bi, bj) += grad_out.at(n, ch, i, j);
        }
      }
    }
  }
  return grad_in;
}

Tensor upsample2(const Tensor& input) {
  input.expect_rank(4, "upsample2");
  const std::size_t b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  Tensor out({b, c, 2 * h, 2 * w});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < 2 * h; ++i) {
        for (std::size_t j = 0; j < 2 * w; ++j) out.at(n, ch, i, j) = input.at(n, ch, i / 2, j / 2);
      }
    }
  }
  return out;
}

Tensor upsample2_backward(const Tensor& grad_out) {
  grad_out.expect_rank(4, "upsample2_backward");
  const std::size_t b = grad_out.dim(0), c = grad_out.dim(1);
  const std::size_t h = grad_out.dim(2) / 2, w = grad_out.dim(3) / 2;
  Tensor grad_in({b, c, h, w});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          grad_in.at(n, ch, i, j) =
              grad_out.at(n, ch, 2 * i, 2 * j) + grad_out.at(n, ch, 2 * i, 2 * j + 1) +
              grad_out.at(n, ch, 2 * i + 1, 2 * j) + grad_out.at(n, ch, 2 * i + 1, 2 * j + 1);
        }
      }
    }
  }
  return grad_in;
}

namespace {

// View of a [B,C] or [B,C,H,W] tensor as batch x channel x plane.
struct BnView {
  std::size_t batch, channels, plane;
};

BnView bn_view(const Tensor& input, const LayerParams& params, const char* op) {
  if (input.rank() != 2 && input.rank() != 4) {
    throw ShapeError(std::string(op) + ": expected rank 2 or 4 tensor, got shape " +
                     shape_str(input.shape()));
  }
  const std::size_t plane = input.rank() == 4 ? input.dim(2) * input.dim(3) : 1;
  if (input.dim(1) != params.hyper.in_channels) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(params.hyper.in_channels) +
                     " channels, got shape " + shape_str(input.shape()));
  }
  return {input.dim(0), input.dim(1), plane};
}

struct BatchStats {
  std::vector<double> mean, var;
};

// Two-pass mean and biased variance per channel.
BatchStats batch_stats(const Tensor& input, const BnView& v) {
  BatchStats s{std::vector<double>(v.channels, 0.0), std::vector<double>(v.channels, 0.0)};
  const double n = static_cast<double>(v.batch * v.plane);
  for (std::size_t c = 0; c < v.channels; ++c) {
    double acc = 0.0;
    for (std::size_t b = 0; b < v.batch; ++b) {
      const double* p = input.data() + (b * v.channels + c) * v.plane;
      for (std::size_t j = 0; j < v.plane; ++j) acc += p[j];
    }
    const double mean = acc / n;
    double sq = 0.0;
    for (std::size_t b = 0; b < v.batch; ++b) {
      const double* p = input.data() + (b * v.channels + c) * v.plane;
      for (std::size_t j = 0; j < v.plane; ++j) sq += (p[j] - mean) * (p[j] - mean);
    }
    s.mean[c] = mean;
    s.var[c] = sq / n;
  }
  return s;
}

Tensor bn_apply(const Tensor& input, const BnView& v, const LayerParams& params,
                const std::vector<double>& mean, const std::vector<double>& var) {
  Tensor out(input.shape());
  for (std::size_t c = 0; c < v.channels; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + params.hyper.eps);
    const double scale = params.weights[c] * inv;
    const double shift = params.bias[c] - mean[c] * scale;
    for (std::size_t b = 0; b < v.batch; ++b) {
      const std::size_t off = (b * v.channels + c) * v.plane;
      for (std::size_t j = 0; j < v.plane; ++j) out[off + j] = input[off + j] * scale + shift;
    }
  }
  return out;
}

}  // namespace

Tensor batchnorm(const Tensor& input, LayerParams& params, Mode mode) {
  expect_kind(params, LayerKind::BatchNorm, "batchnorm");
  if (mode == Mode::Infer) return batchnorm_infer(input, params);
  const BnView v = bn_view(input, params, "batchnorm");
  const std::size_t n = v.batch * v.plane;
  if (n < 2) throw InvalidArgument("batchnorm: train mode needs at least two values per channel");
  const BatchStats s = batch_stats(input, v);
  const double m = params.hyper.momentum;
  const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
  for (std::size_t c = 0; c < v.channels; ++c) {
    params.running_mean[c] = (1.0 - m) * params.running_mean[c] + m * s.mean[c];
    params.running_var[c] = (1.0 - m) * params.running_var[c] + m * s.var[c] * unbias;
  }
  return bn_apply(input, v, params, s.mean, s.var);
}

Tensor batchnorm_infer(const Tensor& input, const LayerParams& params) {
  expect_kind(params, LayerKind::BatchNorm, "batchnorm");
  const BnView v = bn_view(input, params, "batchnorm");
  if (v.batch == 0) throw InvalidArgument("batchnorm: empty batch");
  const auto rm = params.running_mean.values();
  const auto rv = params.running_var.values();
  return bn_apply(input, v, params, {rm.begin(), rm.end()}, {rv.begin(), rv.end()});
}

Tensor batchnorm_backward(const Tensor& input, LayerParams& params, Mode mode,
                          const Tensor& grad_out) {
  expect_kind(params, LayerKind::BatchNorm, "batchnorm_backward");
  const BnView v = bn_view(input, params, "batchnorm_backward");
  grad_out.expect_shape(input.shape(), "batchnorm_backward grad_out");
  params.weights.ensure_grad();
  params.bias.ensure_grad();
  auto gscale = params.weights.grad();
  auto gshift = params.bias.grad();
  Tensor grad_in(input.shape());

  std::vector<double> mean(v.channels), var(v.channels);
  if (mode == Mode::Train) {
    BatchStats s = batch_stats(input, v);
    mean = std::move(s.mean);
    var = std::move(s.var);
  } else {
    for (std::size_t c = 0; c < v.channels; ++c) {
      mean[c] = params.running_mean[c];
      var[c] = params.running_var[c];
    }
  }
  const double n = static_cast<double>(v.batch * v.plane);
  for (std::size_t c = 0; c < v.channels; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + params.hyper.eps);
    const double gamma = params.weights[c];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < v.batch; ++b) {
      const std::size_t off = (b * v.channels + c) * v.plane;
      for (std::size_t j = 0; j < v.plane; ++j) {
        const double xhat = (input[off + j] - mean[c]) * inv;
        sum_dy += grad_out[off + j];
        sum_dy_xhat += grad_out[off + j] * xhat;
      }
    }
    gscale[c] += sum_dy_xhat;
    gshift[c] += sum_dy;
    for (std::size_t b = 0; b < v.batch; ++b) {
      const std::size_t off = (b * v.channels + c) * v.plane;
      for (std::size_t j = 0; j < v.plane; ++j) {
        if (mode == Mode::Train) {
          const double xhat = (input[off + j] - mean[c]) * inv;
          grad_in[off + j] =
              gamma * inv * (grad_out[off + j] - sum_dy / n - xhat * sum_dy_xhat / n);
        } else {
          grad_in[off + j] = gamma * inv * grad_out[off + j];
        }
      }
    }
  }
  return grad_in;
}

Tensor dense(const Tensor& input, const LayerParams& params) {
  expect_kind(params, LayerKind::Dense, "dense");
  input.expect_rank(2, "dense");
  const std::size_t batch = input.dim(0);
  const std::size_t in = params.hyper.in_channels;
  const std::size_t out_dim = params.hyper.out_channels;
  if (input.dim(1) != in) {
    throw ShapeError("dense: expected input width " + std::to_string(in) + ", got shape " +
                     shape_str(input.shape()));
  }
  params.weights.expect_shape({out_dim, in}, "dense weights");
  Tensor out({batch, out_dim});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_dim; ++o) out[b * out_dim + o] = params.bias[o];
  }
  std::vector<double> w_t(in * out_dim);
  transpose(out_dim, in, params.weights.data(), w_t.data());
  gemm_acc(batch, out_dim, in, input.data(), w_t.data(), out.data());
  return out;
}

Tensor dense_backward(const Tensor& input, LayerParams& params, const Tensor& grad_out) {
  expect_kind(params, LayerKind::Dense, "dense_backward");
  const std::size_t batch = input.dim(0);
  const std::size_t in = params.hyper.in_channels;
  const std::size_t out_dim = params.hyper.out_channels;
  grad_out.expect_shape({batch, out_dim}, "dense_backward grad_out");
  params.weights.ensure_grad();
  params.bias.ensure_grad();
  std::vector<double> g_t(out_dim * batch);
  transpose(batch, out_dim, grad_out.data(), g_t.data());
  gemm_acc(out_dim, in, batch, g_t.data(), input.data(), params.weights.grad().data());
  auto bgrad = params.bias.grad();
  for (std::size_t o = 0; o < out_dim; ++o) {
    double acc = 0.0;
    for (std::size_t b = 0; b < batch; ++b) acc += grad_out[b * out_dim + o];
    bgrad[o] += acc;
  }
  Tensor grad_in({batch, in});
  gemm_acc(batch, in, out_dim, grad_out.data(), params.weights.data(), grad_in.data());
  return grad_in;
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  grad_out.expect_shape(input.shape(), "relu_backward");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(input[i] > 0.0)) g[i] = 0.0;
  }
  return g;
}

namespace {
double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& input) {
  Tensor out = input;
  for (auto& v : out.values()) v = stable_sigmoid(v);
  return out;
}

Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_out) {
  grad_out.expect_shape(output.shape(), "sigmoid_backward");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= output[i] * (1.0 - output[i]);
  return g;
}

Tensor softmax_rows(const Tensor& logits) {
  logits.expect_rank(2, "softmax_rows");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = logits.data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= sum;
  }
  return out;
}

Tensor activation(const Tensor& input, Activation kind) {
  switch (kind) {
    case Activation::Relu: return relu(input);
    case Activation::Sigmoid: return sigmoid(input);
    case Activation::SoftmaxRows: return softmax_rows(input);
  }
  throw InvalidArgument("activation: unknown kind");
}

Tensor global_avg_pool(const Tensor& input) {
  input.expect_rank(4, "global_avg_pool");
  const std::size_t b = input.dim(0), c = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  Tensor out({b, c});
  for (std::size_t i = 0; i < b * c; ++i) {
    double acc = 0.0;
    const double* p = input.data() + i * plane;
    for (std::size_t j = 0; j < plane; ++j) acc += p[j];
    out[i] = acc / static_cast<double>(plane);
  }
  return out;
}

Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out) {
  if (input_shape.size() != 4) throw ShapeError("global_avg_pool_backward: rank-4 shape required");
  grad_out.expect_shape({input_shape[0], input_shape[1]}, "global_avg_pool_backward grad_out");
  const std::size_t plane = input_shape[2] * input_shape[3];
  Tensor g(input_shape);
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    const double v = grad_out[i] / static_cast<double>(plane);
    std::fill(g.data() + i * plane, g.data() + (i + 1) * plane, v);
  }
  return g;
}

namespace {
void check_labels(const Tensor& t, std::span<const std::size_t> labels, const char* op) {
  t.expect_rank(2, op);
  if (labels.size() != t.dim(0)) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(t.dim(0)));
  }
  for (auto l : labels) {
    if (l >= t.dim(1)) {
      throw InvalidArgument(std::string(op) + ": label " + std::to_string(l) +
                            " out of range for " + std::to_string(t.dim(1)) + " classes");
    }
  }
}
}  // namespace

double cross_entropy(const Tensor& probs, std::span<const std::size_t> labels) {
  check_labels(probs, labels, "cross_entropy");
  const std::size_t rows = probs.dim(0), cols = probs.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += probs[r * cols + c];
    if (std::abs(sum - 1.0) > 1e-6) {
      throw InvalidArgument("cross_entropy: row " + std::to_string(r) + " sums to " +
                            std::to_string(sum));
    }
    const double p = std::max(probs[r * cols + labels[r]], std::numeric_limits<double>::min());
    total -= std::log(p);
  }
  return total / static_cast<double>(rows);
}

SoftmaxCrossEntropy softmax_cross_entropy(const Tensor& logits,
                                          std::span<const std::size_t> labels) {
  check_labels(logits, labels, "softmax_cross_entropy");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  SoftmaxCrossEntropy r;
  r.probs = softmax_rows(logits);
  r.dlogits = r.probs;
  const double inv_rows = 1.0 / static_cast<double>(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* in = logits.data() + i * cols;
    const double mx = *std::max_element(in, in + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(in[c] - mx);
    // −log softmax computed in log space keeps the loss finite for large logits.
    r.loss += (std::log(sum) + mx - in[labels[i]]) * inv_rows;
    r.dlogits[i * cols + labels[i]] -= 1.0;
    for (std::size_t c = 0; c < cols; ++c) r.dlogits[i * cols + c] *= inv_rows;
  }
  return r;
}

}  // namespace sevdet::nn
