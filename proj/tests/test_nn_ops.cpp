#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "sevdet/error.hpp"
#include "sevdet/nn/adam.hpp"
#include "sevdet/nn/grad_check.hpp"
#include "sevdet/nn/layers.hpp"
#include "sevdet/nn/ops.hpp"
#include "grad_suite.hpp"
#include "test_util.hpp"

using namespace sevdet;
using namespace sevdet::nn;
using sevdet::test::fill_random;
using sevdet::test::random_tensor;

namespace {

// Direct nested-sum convolution; independent of im2col/gemm.
Tensor conv_oracle(const Tensor& x, const LayerParams& p, std::size_t stride, Padding pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t K = p.hyper.kernel, O = p.hyper.out_channels;
  const auto P = static_cast<long>(padding_amount(pad, K));
  const std::size_t Ho = conv_output_size(H, K, stride, pad);
  const std::size_t Wo = conv_output_size(W, K, stride, pad);
  Tensor out({B, O, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = p.bias[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ki = 0; ki < K; ++ki)
              for (std::size_t kj = 0; kj < K; ++kj) {
                const long ii = static_cast<long>(i * stride + ki) - P;
                const long jj = static_cast<long>(j * stride + kj) - P;
                if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W))
                  continue;
                acc += x.at(b, c, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj)) *
                       p.weights.at(o, c, ki, kj);
              }
          out.at(b, o, i, j) = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d counts overlapped ones with same padding") {
  Tensor x({1, 1, 3, 3}, 1.0);
  auto p = LayerParams::conv(1, 1, 3);
  for (auto& w : p.weights.values()) w = 1.0;
  Tensor y = conv2d(x, p, 1, Padding::Same);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y.at(0, 0, 1, 1) == 9.0);
  CHECK(y.at(0, 0, 0, 0) == 4.0);
  CHECK(y.at(0, 0, 0, 1) == 6.0);
}

TEST_CASE("conv2d with a zero kernel is zero") {
  Tensor x = random_tensor({2, 3, 5, 5}, 3);
  auto p = LayerParams::conv(3, 2, 3);
  Tensor y = conv2d(x, p, 1, Padding::Same);
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("conv2d matches the nested-sum oracle") {
  Tensor x = random_tensor({2, 3, 8, 8}, 11);
  auto p = LayerParams::conv(3, 4, 3);
  fill_random(p.weights, 12);
  fill_random(p.bias, 13);
  for (std::size_t stride : {1u, 2u}) {
    for (Padding pad : {Padding::Same, Padding::Valid}) {
      Tensor got = conv2d(x, p, stride, pad);
      Tensor want = conv_oracle(x, p, stride, pad);
      REQUIRE(got.shape() == want.shape());
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);
    }
  }
  auto p5 = LayerParams::conv(3, 2, 5);
  fill_random(p5.weights, 14);
  Tensor got = conv2d(x, p5, 1, Padding::Same);
  Tensor want = conv_oracle(x, p5, 1, Padding::Same);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);
}

TEST_CASE("conv2d rejects mismatched channels with a shape message") {
  Tensor x({1, 2, 4, 4});
  auto p = LayerParams::conv(3, 1, 3);
  CHECK_THROWS_AS(conv2d(x, p, 1, Padding::Same), ShapeError);
  try {
    conv2d(x, p, 1, Padding::Same);
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("[1,2,4,4]") != std::string::npos);
  }
  CHECK_THROWS_AS(conv2d(Tensor({2, 3}), p, 1, Padding::Same), ShapeError);
}

TEST_CASE("conv_transpose2d spreads a single tap") {
  Tensor x({1, 1, 1, 1}, 1.0);
  auto p = LayerParams::conv_transpose(1, 1, 3);
  for (auto& w : p.weights.values()) w = 1.0;
  Tensor y = conv_transpose2d(x, p, 1, Padding::Valid);
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  for (double v : y.values()) CHECK(v == 1.0);

  Tensor zero({2, 1, 4, 4});
  Tensor z = conv_transpose2d(zero, p, 1);
  for (double v : z.values()) CHECK(v == 0.0);
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t cin = 1 + uniform_index(rng, 3);
    const std::size_t cout = 1 + uniform_index(rng, 3);
    const std::size_t stride = 1 + uniform_index(rng, 2);
    const Padding pad = uniform_index(rng, 2) ? Padding::Same : Padding::Valid;
    const std::size_t kernel = uniform_index(rng, 2) ? 3 : 1;
    std::size_t h = 2 * (2 + uniform_index(rng, 4));
    // A valid strided conv only covers the whole input when the extent is odd.
    if (pad == Padding::Valid && stride == 2) h += 1;
    auto conv = LayerParams::conv(cin, cout, kernel, stride, pad);
    fill_random(conv.weights, 1000 + trial);
    auto convt = LayerParams::conv_transpose(cout, cin, kernel, stride, pad);
    convt.weights = conv.weights;  // [cout, cin, k, k] is the transpose layout

    Tensor x = random_tensor({2, cin, h, h}, 2000 + trial);
    Tensor cx = conv2d(x, conv, stride, pad);
    Tensor y = random_tensor(cx.shape(), 3000 + trial);
    Tensor ty = conv_transpose2d(y, convt, stride, pad);
    REQUIRE(ty.shape() == x.shape());
    const double lhs = dot(cx, y);
    const double rhs = dot(x, ty);
    CHECK(std::abs(lhs - rhs) < 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("maxpool2 picks window maxima") {
  Tensor x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  CHECK(maxpool2(x)[0] == 4.0);
  Tensor c({1, 2, 4, 4}, 2.5);
  Tensor pooled = maxpool2(c);
  for (double v : pooled.values()) CHECK(v == 2.5);
  CHECK_THROWS_AS(maxpool2(Tensor({1, 1, 3, 4})), ShapeError);

  Tensor r = random_tensor({1, 1, 6, 6}, 5);
  Tensor y = maxpool2(r);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double m = -1e300;
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) m = std::max(m, r.at(0, 0, 2 * i + a, 2 * j + b));
      CHECK(y.at(0, 0, i, j) == m);
    }
}

TEST_CASE("maxpool2 backward routes to the first maximum on ties") {
  Tensor x({1, 1, 2, 2}, 7.0);
  Tensor g({1, 1, 1, 1}, 1.0);
  Tensor dx = maxpool2_backward(x, g);
  CHECK(dx[0] == 1.0);
  CHECK(dx[1] == 0.0);
  CHECK(dx[2] == 0.0);
  CHECK(dx[3] == 0.0);
}

TEST_CASE("upsample2 replicates and sums back") {
  Tensor x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor y = upsample2(x);
  const std::vector<double> want{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  CHECK(std::vector<double>(y.values().begin(), y.values().end()) == want);

  Tensor r = random_tensor({2, 3, 3, 5}, 8);
  Tensor back = maxpool2(upsample2(r));
  CHECK(std::vector<double>(back.values().begin(), back.values().end()) ==
        std::vector<double>(r.values().begin(), r.values().end()));

  Tensor ones(y.shape(), 1.0);
  Tensor summed = upsample2_backward(ones);
  for (double v : summed.values()) CHECK(v == 4.0);
}

TEST_CASE("batchnorm train mode normalizes each channel") {
  Tensor x = random_tensor({4, 3, 5, 5}, 21, -3.0, 7.0);
  auto p = LayerParams::batchnorm(3);
  Tensor y = batchnorm(x, p, Mode::Train);
  const double n = 4 * 25;
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) mean += y[(b * 3 + c) * 25 + i];
    mean /= n;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) var += std::pow(y[(b * 3 + c) * 25 + i] - mean, 2);
    var /= n;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
  CHECK(p.running_mean[0] != 0.0);
}

TEST_CASE("batchnorm matches the two-pass statistics oracle") {
  Tensor x = random_tensor({3, 2, 4, 4}, 22, -2.0, 5.0);
  auto p = LayerParams::batchnorm(2);
  fill_random(p.weights, 23, 0.5, 2.0);
  fill_random(p.bias, 24);
  Tensor y = batchnorm(x, p, Mode::Train);
  for (std::size_t c = 0; c < 2; ++c) {
    std::vector<double> vals;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < 16; ++i) vals.push_back(x[(b * 2 + c) * 16 + i]);
    double mean = 0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(vals.size());
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < 16; ++i) {
        const std::size_t k = (b * 2 + c) * 16 + i;
        const double want = p.weights[c] * (x[k] - mean) / std::sqrt(var + 1e-5) + p.bias[c];
        CHECK(std::abs(y[k] - want) < 1e-10);
      }
  }
}

TEST_CASE("batchnorm infer mode is the identity at default params and pure") {
  Tensor x = random_tensor({2, 3, 2, 2}, 25);
  auto p = LayerParams::batchnorm(3, 0.1, 0.0);
  Tensor y = batchnorm(x, p, Mode::Infer);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
  auto q = LayerParams::batchnorm(3);
  fill_random(q.running_mean, 26);
  fill_random(q.running_var, 27, 0.5, 1.5);
  Tensor a = batchnorm_infer(x, q);
  Tensor b = batchnorm_infer(x, q);
  CHECK(std::vector<double>(a.values().begin(), a.values().end()) ==
        std::vector<double>(b.values().begin(), b.values().end()));
}

TEST_CASE("batchnorm rejects a zero batch and non-positive running variance") {
  auto p = LayerParams::batchnorm(2);
  CHECK_THROWS_AS(batchnorm(Tensor({1, 2}), p, Mode::Train), InvalidArgument);
  p.running_var[1] = 0.0;
  CHECK_THROWS_AS(p.validate(), InvalidArgument);
}

TEST_CASE("dense is an affine map") {
  auto id = LayerParams::dense(3, 3);
  for (std::size_t i = 0; i < 3; ++i) id.weights[i * 3 + i] = 1.0;
  Tensor x = random_tensor({2, 3}, 31);
  Tensor y = dense(x, id);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);

  auto ones = LayerParams::dense(7, 1);
  for (auto& w : ones.weights.values()) w = 1.0;
  CHECK(dense(Tensor({1, 7}, 1.0), ones)[0] == 7.0);

  auto p = LayerParams::dense(5, 4);
  fill_random(p.weights, 32);
  fill_random(p.bias, 33);
  Tensor in = random_tensor({3, 5}, 34);
  Tensor out = dense(in, p);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t o = 0; o < 4; ++o) {
      double acc = p.bias[o];
      for (std::size_t i = 0; i < 5; ++i) acc += p.weights[o * 5 + i] * in[b * 5 + i];
      CHECK(std::abs(out[b * 4 + o] - acc) < 1e-12);
    }
  CHECK_THROWS_AS(dense(Tensor({3, 4}), p), ShapeError);
}

TEST_CASE("activations") {
  Tensor r = relu(Tensor({3}, std::vector<double>{-1, 0, 2}));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 2.0);
  CHECK(sigmoid(Tensor({1}, 0.0))[0] == 0.5);
  Tensor u = softmax_rows(Tensor({1, 9}, 0.3));
  for (double v : u.values()) CHECK(v == doctest::Approx(1.0 / 9.0).epsilon(1e-15));
  CHECK_THROWS_AS(softmax_rows(Tensor({9})), ShapeError);

  Tensor logits = random_tensor({50, 9}, 41, -30.0, 30.0);
  Tensor p = softmax_rows(logits);
  for (std::size_t i = 0; i < 50; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < 9; ++c) {
      CHECK(p[i * 9 + c] > 0.0);
      CHECK(p[i * 9 + c] < 1.0);
      s += p[i * 9 + c];
    }
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
  Tensor big = softmax_rows(Tensor({1, 3}, std::vector<double>{1000, 999, 998}));
  CHECK(big.all_finite());
}

TEST_CASE("softmax argmax is invariant to a constant logit shift") {
  Tensor logits = random_tensor({20, 9}, 42, -5.0, 5.0);
  Tensor shifted = logits;
  for (auto& v : shifted.values()) v += 123.25;
  Tensor a = softmax_rows(logits), b = softmax_rows(shifted);
  for (std::size_t i = 0; i < 20; ++i) {
    auto ra = a.values().subspan(i * 9, 9), rb = b.values().subspan(i * 9, 9);
    CHECK(std::max_element(ra.begin(), ra.end()) - ra.begin() ==
          std::max_element(rb.begin(), rb.end()) - rb.begin());
  }
}

TEST_CASE("cross_entropy values and gradient") {
  Tensor onehot({1, 3}, std::vector<double>{0, 1, 0});
  std::vector<std::size_t> l1{1};
  CHECK(cross_entropy(onehot, l1) == 0.0);
  Tensor uni({2, 9}, 1.0 / 9.0);
  std::vector<std::size_t> l2{0, 8};
  CHECK(cross_entropy(uni, l2) == doctest::Approx(std::log(9.0)).epsilon(1e-12));
  CHECK(std::log(9.0) == doctest::Approx(2.1972).epsilon(1e-4));
  std::vector<std::size_t> bad{9, 0};
  CHECK_THROWS_AS(cross_entropy(uni, bad), InvalidArgument);
  CHECK_THROWS_AS(cross_entropy(Tensor({1, 2}, 0.7), l1), InvalidArgument);

  Tensor logits = random_tensor({4, 5}, 43, -2.0, 2.0);
  std::vector<std::size_t> labels{0, 3, 4, 1};
  auto fused = softmax_cross_entropy(logits, labels);
  CHECK(fused.loss == doctest::Approx(cross_entropy(fused.probs, labels)).epsilon(1e-12));
  std::vector<GradProbe> probes{
      {"logits", &logits, {fused.dlogits.values().begin(), fused.dlogits.values().end()}}};
  auto rep = grad_check([&] { return softmax_cross_entropy(logits, labels).loss; }, probes,
                        {.coords_per_probe = 20});
  CHECK_MESSAGE(rep.passed, rep.worst);
}

TEST_CASE("adam_step") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Tensor w({3}, std::vector<double>{1, -2, 3});
    w.ensure_grad();
    OptimizerState st;
    std::vector<Tensor*> ps{&w};
    adam_step(ps, st);
    CHECK(w[0] == 1.0);
    CHECK(w[1] == -2.0);
    CHECK(w[2] == 3.0);
  }
  SUBCASE("one step on w^2 descends") {
    Tensor w({1}, 1.0);
    w.ensure_grad();
    w.grad()[0] = 2.0;
    OptimizerState st;
    st.config.learning_rate = 0.1;
    std::vector<Tensor*> ps{&w};
    adam_step(ps, st);
    CHECK(w[0] < 1.0);
  }
  SUBCASE("200 steps on a 2-d quadratic match the scalar reference") {
    Tensor w({2}, std::vector<double>{1.0, -0.5});
    OptimizerState st;
    st.config.learning_rate = 0.02;
    std::vector<Tensor*> ps{&w};
    double ref[2] = {1.0, -0.5}, m[2] = {0, 0}, v[2] = {0, 0};
    for (int t = 1; t <= 200; ++t) {
      w.zero_grad();
      w.grad()[0] = 2.0 * w[0];
      w.grad()[1] = 20.0 * w[1];
      adam_step(ps, st);
      const double g[2] = {2.0 * ref[0], 20.0 * ref[1]};
      for (int i = 0; i < 2; ++i) {
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
        const double mh = m[i] / (1 - std::pow(0.9, t));
        const double vh = v[i] / (1 - std::pow(0.999, t));
        ref[i] -= 0.02 * mh / (std::sqrt(vh) + 1e-8);
      }
    }
    CHECK(w[0] == doctest::Approx(ref[0]).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(ref[1]).epsilon(1e-12));
    CHECK(std::hypot(w[0], w[1]) < 1e-2);
    CHECK(st.step == 200);
  }
  SUBCASE("non-finite gradient is rejected before any update") {
    Tensor a({1}, 1.0), b({1}, 2.0);
    a.ensure_grad();
    b.ensure_grad();
    a.grad()[0] = 1.0;
    b.grad()[0] = std::nan("");
    OptimizerState st;
    std::vector<Tensor*> ps{&a, &b};
    CHECK_THROWS_AS(adam_step(ps, st), InvalidArgument);
    CHECK(a[0] == 1.0);
  }
}

TEST_CASE("gradient checks of every differentiable op") {
  const auto suite = test::op_gradient_suite();
  CHECK(suite.size() >= 14);
  for (const auto& e : suite) {
    INFO(e.name);
    CHECK_MESSAGE(e.passed(), e.worst);
  }
}

TEST_CASE("operations are bit-deterministic") {
  auto run = [] {
    Rng rng(5);
    Sequential net;
    add_conv_pool_stages(net, 3, {4, 8}, rng);
    Tensor x = random_tensor({2, 3, 8, 8}, 6);
    Tensor y = net.forward(x, Mode::Train);
    Tensor g = net.backward(Tensor(y.shape(), 1.0));
    std::vector<double> out(y.values().begin(), y.values().end());
    out.insert(out.end(), g.values().begin(), g.values().end());
    return out;
  };
  CHECK(run() == run());
}
