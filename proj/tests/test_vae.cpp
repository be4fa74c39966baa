#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "sevdet/error.hpp"
#include "sevdet/nn/adam.hpp"
#include "sevdet/nn/checkpoint.hpp"
#include "sevdet/vae/vae.hpp"
#include "grad_util.hpp"
#include "test_util.hpp"

using namespace sevdet;
using namespace sevdet::vae;
using nn::Tensor;

namespace {

VaeConfig tiny_config() {
  VaeConfig c;
  c.input_size = 16;
  c.latent_dim = 4;
  c.channels = {2, 3, 4, 4};
  return c;
}

std::vector<synth::LabeledImage> event_images(std::size_t per_class, std::uint64_t seed,
                                              std::size_t size) {
  synth::SynthSpec spec = synth::SynthSpec::uniform(seed, size, {1, 1, 1});
  std::vector<synth::LabeledImage> out;
  for (EventKind k : kAllEventKinds) {
    const auto cls = static_cast<synth::SynthClass>(index_of(k));
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::uint64_t s = derive_seed(seed, index_of(k) * 1000 + i);
      out.push_back({synth::render(cls, s, s + 1, spec), cls, "img"});
    }
  }
  return out;
}

}  // namespace

TEST_CASE("kl divergence is zero at the prior and non-negative elsewhere") {
  const std::vector<double> zeros(5, 0.0);
  CHECK(kl_divergence(zeros, zeros) == 0.0);
  Rng rng(3);
  for (int t = 0; t < 2000; ++t) {
    std::vector<double> mu(4), lv(4);
    for (auto& v : mu) v = uniform(rng, -5, 5);
    for (auto& v : lv) v = uniform(rng, kLogvarMin, kLogvarMax);
    CHECK(kl_divergence(mu, lv) >= 0.0);
  }
  // Closed form for one dimension: 0.5 (mu^2 + e^lv - 1 - lv).
  const std::vector<double> mu{1.5}, lv{0.7};
  CHECK(kl_divergence(mu, lv) == doctest::Approx(0.5 * (2.25 + std::exp(0.7) - 1.0 - 0.7)));
}

TEST_CASE("elbo splits into reconstruction and kl per image") {
  Tensor images({2, 1, 1, 2}, std::vector<double>{1.0, 0.0, 0.5, 0.25});
  Tensor recon({2, 1, 1, 2}, std::vector<double>{0.8, 0.1, 0.5, 0.5});
  GaussianCode code{Tensor({2, 1}, std::vector<double>{0.0, 1.0}),
                    Tensor({2, 1}, std::vector<double>{0.0, 0.0})};
  const VaeLossReport r = elbo_loss(images, recon, code);
  CHECK(r.recon[0] == doctest::Approx(-std::log(0.8) - std::log(0.9)));
  CHECK(r.recon[1] == doctest::Approx(2 * std::log(2.0)));
  CHECK(r.kl[0] == 0.0);
  CHECK(r.kl[1] == doctest::Approx(0.5));
  for (std::size_t i = 0; i < 2; ++i) CHECK(r.total[i] == r.recon[i] + r.kl[i]);
  CHECK(r.mean_total() == doctest::Approx((r.total[0] + r.total[1]) / 2));

  images[0] = 1.5;
  CHECK_THROWS_AS(elbo_loss(images, recon, code), InvalidArgument);
}

TEST_CASE("reparameterize is mu plus scaled noise") {
  GaussianCode code{Tensor({1, 2}, std::vector<double>{1.0, -1.0}),
                    Tensor({1, 2}, std::vector<double>{0.0, std::log(4.0)})};
  const Tensor z = reparameterize(code, Tensor({1, 2}, std::vector<double>{0.5, 0.5}));
  CHECK(z[0] == doctest::Approx(1.5));
  CHECK(z[1] == doctest::Approx(0.0));
  CHECK_THROWS_AS(reparameterize(code, Tensor({2, 2})), ShapeError);
}

TEST_CASE("vae config validation") {
  VaeConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  CHECK(c.bottleneck_size() == 1);
  SUBCASE("indivisible size") { c.input_size = 20; }
  SUBCASE("zero latent") { c.latent_dim = 0; }
  SUBCASE("negative threshold") { c.loss_threshold = -1; }
  SUBCASE("empty channels") { c.channels.clear(); }
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("vae rejects wrong input shapes") {
  Vae model(tiny_config(), 1);
  CHECK_THROWS_AS(model.loss(Tensor({1, 3, 32, 32})), ShapeError);
  CHECK_THROWS_AS(model.decode(Tensor({1, 5})), ShapeError);
}

TEST_CASE("gradient check of a tiny vae") {
  Vae model(tiny_config(), 11);
  const Tensor images = test::random_tensor({3, 3, 16, 16}, 12, 0.0, 1.0);
  const Tensor noise = test::random_tensor({3, 4}, 13, -1.0, 1.0);
  auto params = model.trainable();
  nn::zero_grads(params);
  model.forward_train(images, noise);
  model.backward();
  const auto rep = test::check_model_gradients(
      [&] { return model.forward_train(images, noise).mean_total(); }, params, 14);
  CHECK_MESSAGE(rep.passed(), rep.worst());
  CHECK(rep.live_tensors > rep.dead_tensors);
}

TEST_CASE("infer-mode loss uses z = mu and is deterministic") {
  Vae model(tiny_config(), 2);
  const Tensor images = test::random_tensor({2, 3, 16, 16}, 3, 0.0, 1.0);
  const VaeLossReport a = model.loss(images);
  const VaeLossReport b = model.loss(images);
  CHECK(a.total == b.total);
  const GaussianCode code = model.encode(images);
  const VaeLossReport manual = elbo_loss(images, model.decode(code.mu), code);
  for (std::size_t i = 0; i < 2; ++i) CHECK(a.total[i] == doctest::Approx(manual.total[i]).epsilon(1e-9));
  for (double v : code.logvar.values()) {
    CHECK(v >= kLogvarMin);
    CHECK(v <= kLogvarMax);
  }
}

TEST_CASE("checkpoint round trip preserves losses exactly") {
  test::TempDir dir("vae_ckpt");
  Vae model(tiny_config(), 4);
  for (auto* p : model.all_params()) nn::snap_to_f32(*p);
  model.set_threshold(123.5);
  nn::save_checkpoint(dir / "vae.ckpt", model.to_checkpoint());
  CHECK(std::filesystem::exists(dir / "vae.ckpt.manifest"));
  const Vae back = Vae::from_checkpoint(nn::load_checkpoint(dir / "vae.ckpt"));
  CHECK(back.config().loss_threshold == 123.5);
  CHECK(back.config().latent_dim == 4);
  const Tensor images = test::random_tensor({2, 3, 16, 16}, 5, 0.0, 1.0);
  CHECK(back.loss(images).total == model.loss(images).total);
}

TEST_CASE("training lowers the validation loss and is seed-deterministic") {
  const auto train = event_images(4, 1, 16);
  const auto val = event_images(2, 2, 16);
  VaeTrainOptions opts;
  opts.epochs = 6;
  opts.batch_size = 8;
  opts.adam.learning_rate = 3e-3;
  opts.seed = 5;
  const VaeTrainResult a = train_vae(tiny_config(), train, val, opts);
  REQUIRE(a.val_loss.size() == 6);
  CHECK(a.val_loss.back() < a.val_loss.front());
  const VaeTrainResult b = train_vae(tiny_config(), train, val, opts);
  CHECK(a.val_loss == b.val_loss);
  CHECK(a.train_loss == b.train_loss);
}

TEST_CASE("training rejects scene images and empty sets") {
  auto train = event_images(1, 1, 16);
  const auto val = train;
  train.push_back({Tensor({3, 16, 16}), synth::SynthClass::CenterCircle, "scene"});
  VaeTrainOptions opts;
  opts.epochs = 1;
  CHECK_THROWS_AS(train_vae(tiny_config(), train, val, opts), InvalidArgument);
  CHECK_THROWS_AS(train_vae(tiny_config(), {}, val, opts), InvalidArgument);
}

TEST_CASE("gate accepts at the threshold and rejects above it") {
  CHECK(gate_from_loss(10.0, 10.0).accepted);
  CHECK_FALSE(gate_from_loss(std::nextafter(10.0, 11.0), 10.0).accepted);
  Vae model(tiny_config(), 6);
  const Tensor image = test::random_tensor({3, 16, 16}, 7, 0.0, 1.0);
  const double loss = gate(model, image, 0.0).loss;
  CHECK(gate(model, image, loss).accepted);
  CHECK_FALSE(gate(model, image, std::nextafter(loss, 0.0)).accepted);
  const Tensor* ptrs[] = {&image, &image};
  const auto losses = image_losses(model, {ptrs[0], ptrs[1]});
  CHECK(losses[0] == doctest::Approx(loss).epsilon(1e-12));
}

TEST_CASE("calibration finds the brute-force optimum") {
  Rng rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> in(1 + uniform_index(rng, 20)), out(1 + uniform_index(rng, 20));
    // Coarse values force ties between and within populations.
    for (auto& v : in) v = std::floor(uniform(rng, 0, 12));
    for (auto& v : out) v = std::floor(uniform(rng, 4, 16));
    const Calibration cal = calibrate_threshold(in, out);
    double best = balanced_accuracy(in, out, -1.0);
    for (double v : in) best = std::max(best, balanced_accuracy(in, out, v));
    for (double v : out) best = std::max(best, balanced_accuracy(in, out, v));
    CHECK(cal.balanced_accuracy == doctest::Approx(best));
    CHECK(balanced_accuracy(in, out, cal.threshold) == doctest::Approx(cal.balanced_accuracy));
  }
  CHECK(calibrate_threshold({1.0, 2.0}, {5.0, 6.0}).balanced_accuracy == 1.0);
  CHECK(calibrate_threshold({1.0, 2.0}, {5.0, 6.0}).threshold == 3.5);
  CHECK_THROWS_AS(calibrate_threshold({}, {1.0}), InvalidArgument);
  CHECK_THROWS_AS(calibrate_threshold({NAN}, {1.0}), InvalidArgument);
}

TEST_CASE("calibration report lists the threshold and both histograms") {
  const std::vector<double> in{1, 2, 3}, out{7, 8, 9};
  const std::string rep = calibration_report(calibrate_threshold(in, out), in, out, 4);
  CHECK(rep.find("threshold") != std::string::npos);
  CHECK(rep.find("balanced_accuracy") != std::string::npos);
  CHECK(std::count(rep.begin(), rep.end(), '\n') >= 5);
}
