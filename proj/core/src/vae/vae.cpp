#include "sevdet/vae/vae.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "sevdet/error.hpp"
#include "sevdet/image.hpp"
#include "sevdet/random.hpp"

namespace sevdet::vae {

using nn::LayerParams;
using nn::Mode;
using nn::shape_str;

namespace {

constexpr double kProbFloor = 1e-12;

nn::LayerParams he_dense(std::size_t in, std::size_t out, Rng& rng) {
  auto p = LayerParams::dense(in, out);
  p.init_he_uniform(rng);
  return p;
}

double clamp_logvar(double v) { return std::clamp(v, kLogvarMin, kLogvarMax); }

// Stable -[x ln s(l) + (1-x) ln(1-s(l))] for logit l.
double bce_logit(double x, double l) {
  return std::max(l, 0.0) - l * x + std::log1p(std::exp(-std::abs(l)));
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoul(tok));
  return out;
}

VaeLossReport report_from_logits(const Tensor& images, const Tensor& logits, const Tensor& mu,
                                 const Tensor& logvar) {
  const std::size_t b = images.dim(0), per = images.size() / b, q = mu.dim(1);
  VaeLossReport r;
  for (std::size_t i = 0; i < b; ++i) {
    double rec = 0.0;
    for (std::size_t j = 0; j < per; ++j) rec += bce_logit(images[i * per + j], logits[i * per + j]);
    const double kl = kl_divergence(mu.values().subspan(i * q, q), logvar.values().subspan(i * q, q));
    r.recon.push_back(rec);
    r.kl.push_back(kl);
    r.total.push_back(rec + kl);
  }
  return r;
}

}  // namespace

std::size_t VaeConfig::bottleneck_size() const {
  return input_size >> channels.size();
}

std::size_t VaeConfig::flatten_width() const {
  const std::size_t s = bottleneck_size();
  return channels.back() * s * s;
}

void VaeConfig::validate() const {
  if (channels.empty()) throw InvalidArgument("vae: channel plan is empty");
  const std::size_t factor = std::size_t{1} << channels.size();
  if (input_size == 0 || input_size % factor != 0) {
    throw InvalidArgument("vae: input_size " + std::to_string(input_size) +
                          " is not divisible by " + std::to_string(factor));
  }
  if (latent_dim == 0) throw InvalidArgument("vae: latent_dim must be at least 1");
  for (std::size_t c : channels) {
    if (c == 0) throw InvalidArgument("vae: zero channel count");
  }
  if (loss_threshold < 0.0 || !std::isfinite(loss_threshold)) {
    throw InvalidArgument("vae: loss_threshold must be finite and non-negative");
  }
}

double VaeLossReport::mean_total() const {
  if (total.empty()) return 0.0;
  return std::accumulate(total.begin(), total.end(), 0.0) / static_cast<double>(total.size());
}

Tensor reparameterize(const GaussianCode& code, const Tensor& noise) {
  noise.expect_shape(code.mu.shape(), "reparameterize noise");
  code.logvar.expect_shape(code.mu.shape(), "reparameterize logvar");
  Tensor z(code.mu.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = code.mu[i] + std::exp(0.5 * code.logvar[i]) * noise[i];
  }
  return z;
}

double kl_divergence(std::span<const double> mu, std::span<const double> logvar) {
  // Per-term form 0.5*(mu^2 + (e^lv - 1 - lv)); each bracket is >= 0.
  double kl = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    kl += 0.5 * (mu[i] * mu[i] + std::expm1(logvar[i]) - logvar[i]);
  }
  return kl;
}

VaeLossReport elbo_loss(const Tensor& images, const Tensor& recon, const GaussianCode& code) {
  images.expect_rank(4, "elbo_loss images");
  recon.expect_shape(images.shape(), "elbo_loss recon");
  const std::size_t b = images.dim(0);
  code.mu.expect_rank(2, "elbo_loss mu");
  if (code.mu.dim(0) != b) throw ShapeError("elbo_loss: code batch differs from image batch");
  code.logvar.expect_shape(code.mu.shape(), "elbo_loss logvar");
  for (double v : images.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("elbo_loss: image value outside [0,1]");
  }
  const std::size_t per = images.size() / b, q = code.mu.dim(1);
  VaeLossReport r;
  for (std::size_t i = 0; i < b; ++i) {
    double rec = 0.0;
    for (std::size_t j = 0; j < per; ++j) {
      const double x = images[i * per + j];
      const double p = std::clamp(recon[i * per + j], kProbFloor, 1.0 - kProbFloor);
      rec -= x * std::log(p) + (1.0 - x) * std::log1p(-p);
    }
    const double kl =
        kl_divergence(code.mu.values().subspan(i * q, q), code.logvar.values().subspan(i * q, q));
    r.recon.push_back(rec);
    r.kl.push_back(kl);
    r.total.push_back(rec + kl);
  }
  return r;
}

Vae::Vae(const VaeConfig& config, std::uint64_t seed)
    : config_(config),
      mu_head_(LayerParams::dense(1, 1)),
      logvar_head_(LayerParams::dense(1, 1)) {
  config_.validate();
  Rng rng(seed);
  nn::add_conv_pool_stages(encoder_, 3, config_.channels, rng);
  encoder_.add<nn::Reshape>(nn::Shape{config_.flatten_width()});
  mu_head_ = nn::Dense(he_dense(config_.flatten_width(), config_.latent_dim, rng));
  logvar_head_ = nn::Dense(he_dense(config_.flatten_width(), config_.latent_dim, rng));

  const std::size_t s = config_.bottleneck_size();
  const std::size_t top = config_.channels.back();
  decoder_.add<nn::Dense>(he_dense(config_.latent_dim, config_.flatten_width(), rng));
  decoder_.add<nn::Reshape>(nn::Shape{top, s, s});
  std::size_t cin = top;
  for (auto it = config_.channels.rbegin(); it != config_.channels.rend(); ++it) {
    decoder_.add<nn::Upsample2>();
    auto ct = LayerParams::conv_transpose(cin, *it, 3);
    ct.init_he_uniform(rng);
    decoder_.add<nn::ConvTranspose2d>(std::move(ct));
    decoder_.add<nn::BatchNorm>(LayerParams::batchnorm(*it));
    decoder_.add<nn::Relu>();
    cin = *it;
  }
  auto out = LayerParams::conv_transpose(cin, 3, 3);
  out.init_he_uniform(rng);
  decoder_.add<nn::ConvTranspose2d>(std::move(out));
}

void Vae::check_input(const Tensor& images) const {
  images.expect_rank(4, "vae input");
  const std::size_t s = config_.input_size;
  if (images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s) {
    throw ShapeError("vae: expected [B,3," + std::to_string(s) + "," + std::to_string(s) +
                     "], got " + shape_str(images.shape()));
  }
}

Tensor Vae::encoder_trunk_infer(const Tensor& images) const {
  check_input(images);
  return encoder_.infer(images);
}

GaussianCode Vae::encode(const Tensor& images) const {
  const Tensor h = encoder_trunk_infer(images);
  GaussianCode code{mu_head_.infer(h), logvar_head_.infer(h)};
  for (double& v : code.logvar.values()) v = clamp_logvar(v);
  return code;
}

Tensor Vae::decode(const Tensor& z) const {
  z.expect_rank(2, "vae decode");
  if (z.dim(1) != config_.latent_dim) {
    throw ShapeError("vae decode: expected width " + std::to_string(config_.latent_dim) +
                     ", got " + shape_str(z.shape()));
  }
  return nn::sigmoid(decoder_.infer(z));
}

VaeLossReport Vae::loss(const Tensor& images) const {
  const GaussianCode code = encode(images);
  const Tensor logits = decoder_.infer(code.mu);
  return report_from_logits(images, logits, code.mu, code.logvar);
}

VaeLossReport Vae::forward_train(const Tensor& images, const Tensor& noise) {
  check_input(images);
  for (double v : images.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("vae: image value outside [0,1]");
  }
  noise.expect_shape({images.dim(0), config_.latent_dim}, "vae noise");
  images_ = images;
  noise_ = noise;
  const Tensor h = encoder_.forward(images, Mode::Train);
  mu_ = mu_head_.forward(h, Mode::Train);
  logvar_raw_ = logvar_head_.forward(h, Mode::Train);
  logvar_ = logvar_raw_;
  for (double& v : logvar_.values()) v = clamp_logvar(v);
  const Tensor z = reparameterize({mu_, logvar_}, noise_);
  logits_ = decoder_.forward(z, Mode::Train);
  return report_from_logits(images_, logits_, mu_, logvar_);
}

void Vae::backward() {
  if (logits_.empty()) throw InvalidArgument("vae: backward without forward_train");
  const double inv_b = 1.0 / static_cast<double>(images_.dim(0));
  Tensor dlogits(logits_.shape());
  for (std::size_t i = 0; i < dlogits.size(); ++i) {
    dlogits[i] = (1.0 / (1.0 + std::exp(-logits_[i])) - images_[i]) * inv_b;
  }
  const Tensor dz = decoder_.backward(dlogits);
  Tensor dmu(mu_.shape()), dlv(mu_.shape());
  for (std::size_t i = 0; i < dmu.size(); ++i) {
    dmu[i] = dz[i] + mu_[i] * inv_b;
    const double sd = std::exp(0.5 * logvar_[i]);
    const bool clamped = logvar_raw_[i] < kLogvarMin || logvar_raw_[i] > kLogvarMax;
    dlv[i] = clamped ? 0.0 : dz[i] * noise_[i] * 0.5 * sd + 0.5 * std::expm1(logvar_[i]) * inv_b;
  }
  Tensor dh = mu_head_.backward(dmu);
  const Tensor dh2 = logvar_head_.backward(dlv);
  for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += dh2[i];
  encoder_.backward(dh);
}

std::vector<Tensor*> Vae::trainable() {
  std::vector<Tensor*> out = encoder_.trainable();
  for (nn::Dense* d : {&mu_head_, &logvar_head_}) {
    for (Tensor* t : d->params()->trainable()) out.push_back(t);
  }
  for (Tensor* t : decoder_.trainable()) out.push_back(t);
  return out;
}

std::vector<LayerParams*> Vae::all_params() {
  std::vector<LayerParams*> out;
  for (auto& [name, p] : encoder_.named_params("enc")) out.push_back(p);
  out.push_back(mu_head_.params());
  out.push_back(logvar_head_.params());
  for (auto& [name, p] : decoder_.named_params("dec")) out.push_back(p);
  return out;
}

nn::Checkpoint Vae::to_checkpoint() const {
  nn::Checkpoint ck;
  ck.meta["model"] = "vae";
  ck.meta["input_size"] = std::to_string(config_.input_size);
  ck.meta["latent_dim"] = std::to_string(config_.latent_dim);
  ck.meta["channels"] = join(config_.channels);
  ck.meta["loss_threshold"] = fmt(config_.loss_threshold);
  for (const auto& [name, p] : encoder_.named_params("enc")) ck.layers.emplace_back(name, *p);
  ck.layers.emplace_back("mu_head", *mu_head_.params());
  ck.layers.emplace_back("logvar_head", *logvar_head_.params());
  for (const auto& [name, p] : decoder_.named_params("dec")) ck.layers.emplace_back(name, *p);
  return ck;
}

Vae Vae::from_checkpoint(const nn::Checkpoint& ck) {
  if (ck.meta_at("model") != "vae") throw InvalidArgument("checkpoint is not a vae model");
  VaeConfig cfg;
  try {
    cfg.input_size = std::stoul(ck.meta_at("input_size"));
    cfg.latent_dim = std::stoul(ck.meta_at("latent_dim"));
    cfg.channels = parse_list(ck.meta_at("channels"));
    cfg.loss_threshold = std::stod(ck.meta_at("loss_threshold"));
  } catch (const std::logic_error&) {
    throw InvalidArgument("vae checkpoint has malformed metadata");
  }
  Vae model(cfg, 0);
  for (auto& [name, p] : model.encoder_.named_params("enc")) nn::assign_params(*p, ck.layer(name), name);
  nn::assign_params(*model.mu_head_.params(), ck.layer("mu_head"), "mu_head");
  nn::assign_params(*model.logvar_head_.params(), ck.layer("logvar_head"), "logvar_head");
  for (auto& [name, p] : model.decoder_.named_params("dec")) nn::assign_params(*p, ck.layer(name), name);
  return model;
}

VaeTrainResult train_vae(const VaeConfig& config, const std::vector<synth::LabeledImage>& train,
                         const std::vector<synth::LabeledImage>& val,
                         const VaeTrainOptions& opts) {
  if (train.empty()) throw InvalidArgument("train_vae: empty training set");
  if (val.empty()) throw InvalidArgument("train_vae: empty validation set");
  if (opts.epochs == 0 || opts.batch_size == 0) {
    throw InvalidArgument("train_vae: epochs and batch_size must be positive");
  }
  for (const auto* set : {&train, &val}) {
    for (const auto& s : *set) {
      const auto label = s.label();
      if (!label || !is_event(*label)) {
        throw InvalidArgument("train_vae: non-event image '" + s.path + "' in training data");
      }
    }
  }
  VaeTrainResult result{Vae(config, derive_seed(opts.seed, 1)), {}, {}};
  Vae& model = result.model;
  nn::OptimizerState state{opts.adam, 0, {}, {}};
  const auto params = model.trainable();
  std::vector<const Tensor*> val_images;
  for (const auto& s : val) val_images.push_back(&s.image);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(opts.seed, 2));
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    double sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      std::vector<const Tensor*> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(&train[order[k]].image);
      const Tensor x = stack_images(batch);
      Tensor noise({batch.size(), config.latent_dim});
      for (double& v : noise.values()) v = standard_normal(rng);
      nn::zero_grads(params);
      const VaeLossReport r = model.forward_train(x, noise);
      model.backward();
      nn::adam_step(params, state);
      sum += std::accumulate(r.total.begin(), r.total.end(), 0.0);
    }
    result.train_loss.push_back(sum / static_cast<double>(train.size()));
    const auto losses = image_losses(model, val_images);
    result.val_loss.push_back(std::accumulate(losses.begin(), losses.end(), 0.0) /
                              static_cast<double>(losses.size()));
  }
  for (LayerParams* p : model.all_params()) nn::snap_to_f32(*p);
  return result;
}

std::vector<double> image_losses(const Vae& model, const std::vector<const Tensor*>& images,
                                 std::size_t batch_size) {
  std::vector<double> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t end = std::min(images.size(), start + batch_size);
    const std::vector<const Tensor*> batch(images.begin() + static_cast<std::ptrdiff_t>(start),
                                           images.begin() + static_cast<std::ptrdiff_t>(end));
    const VaeLossReport r = model.loss(stack_images(batch));
    out.insert(out.end(), r.total.begin(), r.total.end());
  }
  return out;
}

GateDecision gate_from_loss(double loss, double threshold) { return {loss <= threshold, loss}; }

GateDecision gate(const Vae& model, const Tensor& image, double threshold) {
  const Tensor* one[] = {&image};
  return gate_from_loss(model.loss(stack_images(one)).total.front(), threshold);
}

double balanced_accuracy(const std::vector<double>& in, const std::vector<double>& out, double t) {
  if (in.empty() || out.empty()) throw InvalidArgument("balanced_accuracy: empty loss set");
  const auto accepted = [&](const std::vector<double>& v) {
    return static_cast<double>(std::count_if(v.begin(), v.end(), [&](double l) { return l <= t; }));
  };
  const double tpr = accepted(in) / static_cast<double>(in.size());
  const double tnr = 1.0 - accepted(out) / static_cast<double>(out.size());
  return 0.5 * (tpr + tnr);
}

Calibration calibrate_threshold(const std::vector<double>& in, const std::vector<double>& out) {
  if (in.empty() || out.empty()) throw InvalidArgument("calibrate_threshold: empty loss set");
  // (loss, is_in) sorted ascending; sweeping t upward accepts one value group at a time.
  std::vector<std::pair<double, bool>> pooled;
  for (double v : in) pooled.emplace_back(v, true);
  for (double v : out) pooled.emplace_back(v, false);
  for (const auto& [v, tag] : pooled) {
    if (!std::isfinite(v)) throw InvalidArgument("calibrate_threshold: non-finite loss");
  }
  std::sort(pooled.begin(), pooled.end());
  const double n_in = static_cast<double>(in.size()), n_out = static_cast<double>(out.size());
  const double lowest = pooled.front().first;
  Calibration best{lowest > 0.0 ? 0.5 * lowest : lowest - 1.0, 0.5};
  std::size_t acc_in = 0, acc_out = 0;
  for (std::size_t i = 0; i < pooled.size();) {
    const double v = pooled[i].first;
    for (; i < pooled.size() && pooled[i].first == v; ++i) (pooled[i].second ? acc_in : acc_out)++;
    const double t = i < pooled.size() ? 0.5 * (v + pooled[i].first) : v;
    const double ba = 0.5 * (static_cast<double>(acc_in) / n_in + 1.0 - static_cast<double>(acc_out) / n_out);
    if (ba > best.balanced_accuracy) best = {t, ba};
  }
  return best;
}

std::string calibration_report(const Calibration& cal, const std::vector<double>& in,
                               const std::vector<double>& out, std::size_t bins) {
  if (in.empty() || out.empty() || bins == 0) throw InvalidArgument("calibration_report: empty input");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* v : {&in, &out}) {
    for (double x : *v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  if (hi <= lo) hi = lo + 1.0;
  const double width = (hi - lo) / static_cast<double>(bins);
  std::vector<std::size_t> hin(bins, 0), hout(bins, 0);
  const auto bin_of = [&](double x) {
    return std::min(bins - 1, static_cast<std::size_t>((x - lo) / width));
  };
  for (double x : in) ++hin[bin_of(x)];
  for (double x : out) ++hout[bin_of(x)];
  std::ostringstream os;
  os << "# threshold: " << fmt(cal.threshold) << '\n'
     << "# balanced_accuracy: " << fmt(cal.balanced_accuracy) << '\n'
     << "# loss_units: per-image summed binary cross-entropy plus KL (nats)\n"
     << "# in_distribution_count: " << in.size() << '\n'
     << "# out_distribution_count: " << out.size() << '\n'
     << "bin_lo,bin_hi,in_distribution,out_distribution\n";
  for (std::size_t b = 0; b < bins; ++b) {
    os << fmt(lo + width * static_cast<double>(b)) << ',' << fmt(lo + width * static_cast<double>(b + 1))
       << ',' << hin[b] << ',' << hout[b] << '\n';
  }
  return os.str();
}

}  // namespace sevdet::vae
