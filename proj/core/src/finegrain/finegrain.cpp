#include "sevdet/finegrain/finegrain.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "sevdet/error.hpp"
#include "sevdet/image.hpp"
#include "sevdet/random.hpp"

namespace sevdet::finegrain {

using nn::LayerParams;
using nn::Mode;
using nn::shape_str;

namespace {

constexpr double kNormFloor = 1e-12;

LayerParams he_dense(std::size_t in, std::size_t out, Rng& rng) {
  auto p = LayerParams::dense(in, out);
  p.init_he_uniform(rng);
  return p;
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

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

}  // namespace

std::string_view to_string(CardColor c) { return c == CardColor::Yellow ? "Yellow" : "Red"; }

std::optional<CardColor> card_color_of(ClassLabel c) {
  if (c == ClassLabel::YellowCard) return CardColor::Yellow;
  if (c == ClassLabel::RedCard) return CardColor::Red;
  return std::nullopt;
}

EventKind event_kind_of(CardColor c) {
  return c == CardColor::Yellow ? EventKind::YellowCard : EventKind::RedCard;
}

Osme::Osme(std::size_t channels, std::size_t branches, std::size_t feature_dim, std::size_t reduction,
           Rng& rng)
    : channels_(channels), feature_dim_(feature_dim) {
  if (branches < 2) throw InvalidArgument("osme: at least two branches are required");
  if (channels == 0 || feature_dim == 0 || reduction == 0) throw InvalidArgument("osme: zero dimension");
  const std::size_t hidden = std::max<std::size_t>(1, channels / reduction);
  for (std::size_t p = 0; p < branches; ++p) {
    branches_.push_back(Branch{nn::Dense(he_dense(channels, hidden, rng)), nn::Relu{},
                               nn::Dense(he_dense(hidden, channels, rng)), nn::Sigmoid{},
                               nn::Dense(he_dense(channels, feature_dim, rng)), Tensor{}});
  }
}

void Osme::check_map(const Tensor& map) const {
  map.expect_rank(4, "osme input");
  if (map.dim(1) != channels_) {
    throw ShapeError("osme: expected " + std::to_string(channels_) + " channels, got " +
                     shape_str(map.shape()));
  }
}

AttentionFeatures Osme::forward(const Tensor& map, Mode mode) {
  check_map(map);
  map_shape_ = map.shape();
  squeezed_ = nn::global_avg_pool(map);
  AttentionFeatures out;
  for (Branch& b : branches_) {
    const Tensor e = b.excite.forward(b.relu.forward(b.squeeze.forward(squeezed_, mode), mode), mode);
    b.mask = b.gate.forward(e, mode);
    // gap(m * map) == m * gap(map) because m is constant over each channel plane.
    out.features.push_back(b.project.forward(hadamard(b.mask, squeezed_), mode));
    out.masks.push_back(b.mask);
  }
  return out;
}

AttentionFeatures Osme::infer(const Tensor& map) const {
  check_map(map);
  const Tensor s = nn::global_avg_pool(map);
  AttentionFeatures out;
  for (const Branch& b : branches_) {
    Tensor m = b.gate.infer(b.excite.infer(b.relu.infer(b.squeeze.infer(s))));
    out.features.push_back(b.project.infer(hadamard(m, s)));
    out.masks.push_back(std::move(m));
  }
  return out;
}

Tensor Osme::backward(std::span<const Tensor> grad_features) {
  if (grad_features.size() != branches_.size()) throw ShapeError("osme backward: branch count mismatch");
  if (squeezed_.empty()) throw InvalidArgument("osme: backward without forward");
  Tensor ds = Tensor::zeros_like(squeezed_);
  for (std::size_t p = 0; p < branches_.size(); ++p) {
    Branch& b = branches_[p];
    const Tensor dg = b.project.backward(grad_features[p]);
    const Tensor de = b.gate.backward(hadamard(dg, squeezed_));
    const Tensor ds_exc = b.squeeze.backward(b.relu.backward(b.excite.backward(de)));
    for (std::size_t i = 0; i < ds.size(); ++i) ds[i] += dg[i] * b.mask[i] + ds_exc[i];
  }
  return nn::global_avg_pool_backward(map_shape_, ds);
}

std::vector<std::pair<std::string, LayerParams*>> Osme::named_params() {
  std::vector<std::pair<std::string, LayerParams*>> out;
  for (std::size_t p = 0; p < branches_.size(); ++p) {
    const std::string pre = "osme" + std::to_string(p) + "_";
    out.emplace_back(pre + "squeeze", branches_[p].squeeze.params());
    out.emplace_back(pre + "excite", branches_[p].excite.params());
    out.emplace_back(pre + "project", branches_[p].project.params());
  }
  return out;
}

std::vector<std::pair<std::string, const LayerParams*>> Osme::named_params() const {
  std::vector<std::pair<std::string, const LayerParams*>> out;
  for (std::size_t p = 0; p < branches_.size(); ++p) {
    const std::string pre = "osme" + std::to_string(p) + "_";
    out.emplace_back(pre + "squeeze", branches_[p].squeeze.params());
    out.emplace_back(pre + "excite", branches_[p].excite.params());
    out.emplace_back(pre + "project", branches_[p].project.params());
  }
  return out;
}

AttentionFeatures osme_forward(const Tensor& feature_map, const Osme& osme) {
  return osme.infer(feature_map);
}

MamcResult mamc_loss(std::span<const Tensor> features, std::span<const std::size_t> labels) {
  if (features.empty()) throw InvalidArgument("mamc_loss: no branches");
  const std::size_t n = labels.size();
  std::map<std::size_t, std::size_t> support;
  for (std::size_t l : labels) ++support[l];
  for (const auto& [cls, count] : support) {
    if (count < 2) {
      throw InvalidArgument("mamc_loss: class " + std::to_string(cls) + " has a single sample in the batch");
    }
  }
  MamcResult r{0.0, {}};
  const double anchors = static_cast<double>(n * features.size());
  for (const Tensor& f : features) {
    f.expect_rank(2, "mamc_loss features");
    if (f.dim(0) != n) throw ShapeError("mamc_loss: feature batch differs from label count");
    const std::size_t d = f.dim(1);
    std::vector<double> norm(n);
    Tensor u(f.shape());
    for (std::size_t b = 0; b < n; ++b) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += f[b * d + k] * f[b * d + k];
      norm[b] = std::max(std::sqrt(s), kNormFloor);
      for (std::size_t k = 0; k < d; ++k) u[b * d + k] = f[b * d + k] / norm[b];
    }
    std::vector<double> sim(n * n);
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += u[a * d + k] * u[j * d + k];
        sim[a * n + j] = s;
      }
    }
    Tensor gu = Tensor::zeros_like(u);
    for (std::size_t a = 0; a < n; ++a) {
      double pos = 0.0, all = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == a) continue;
        const double e = std::exp(sim[a * n + j]);
        all += e;
        if (labels[j] == labels[a]) pos += e;
      }
      r.loss += (std::log(all) - std::log(pos)) / anchors;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == a) continue;
        const double e = std::exp(sim[a * n + j]);
        const double w = (e / all - (labels[j] == labels[a] ? e / pos : 0.0)) / anchors;
        for (std::size_t k = 0; k < d; ++k) {
          gu[a * d + k] += w * u[j * d + k];
          gu[j * d + k] += w * u[a * d + k];
        }
      }
    }
    // Back through normalization: (I - u u^T) g / |f|.
    Tensor gf(f.shape());
    for (std::size_t b = 0; b < n; ++b) {
      double proj = 0.0;
      for (std::size_t k = 0; k < d; ++k) proj += gu[b * d + k] * u[b * d + k];
      for (std::size_t k = 0; k < d; ++k) gf[b * d + k] = (gu[b * d + k] - proj * u[b * d + k]) / norm[b];
    }
    r.grad.push_back(std::move(gf));
  }
  return r;
}

void FinegrainConfig::validate() const {
  if (channels.empty()) throw InvalidArgument("finegrain: channel plan is empty");
  const std::size_t factor = std::size_t{1} << channels.size();
  if (input_size == 0 || input_size % factor != 0) {
    throw InvalidArgument("finegrain: input_size " + std::to_string(input_size) +
                          " is not divisible by " + std::to_string(factor));
  }
  if (branches < 2) throw InvalidArgument("finegrain: at least two attention branches are required");
  if (feature_dim == 0 || reduction == 0) throw InvalidArgument("finegrain: zero feature_dim or reduction");
  if (!(lambda_mamc >= 0.0) || !std::isfinite(lambda_mamc)) {
    throw InvalidArgument("finegrain: lambda_mamc must be finite and non-negative");
  }
}

namespace {
FinegrainConfig validated(const FinegrainConfig& c) {
  c.validate();
  return c;
}
}  // namespace

FinegrainModel::FinegrainModel(const FinegrainConfig& config, std::uint64_t seed)
    : config_(validated(config)),
      backbone_([&] {
        Rng rng(derive_seed(seed, 1));
        return classifier::build_backbone(config_.channels, rng);
      }()),
      osme_([&] {
        Rng rng(derive_seed(seed, 2));
        return Osme(config_.channels.back(), config_.branches, config_.feature_dim, config_.reduction, rng);
      }()),
      head_([&] {
        Rng rng(derive_seed(seed, 3));
        return he_dense(config_.branches * config_.feature_dim, 2, rng);
      }()),
      lambda_(config_.lambda_mamc) {}

void FinegrainModel::check_input(const Tensor& images) const {
  images.expect_rank(4, "finegrain input");
  const std::size_t s = config_.input_size;
  if (images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s) {
    throw ShapeError("finegrain: expected [B,3," + std::to_string(s) + "," + std::to_string(s) +
                     "], got " + shape_str(images.shape()));
  }
}

Tensor FinegrainModel::concat(const AttentionFeatures& a) const {
  const std::size_t b = a.features.front().dim(0), d = config_.feature_dim, p = a.features.size();
  Tensor out({b, p * d});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t q = 0; q < p; ++q) {
      std::copy_n(a.features[q].data() + i * d, d, out.data() + (i * p + q) * d);
    }
  }
  return out;
}

AttentionFeatures FinegrainModel::attention(const Tensor& images) const {
  check_input(images);
  return osme_.infer(backbone_.infer(images));
}

Tensor FinegrainModel::logits(const Tensor& images) const { return head_.infer(concat(attention(images))); }

std::vector<CardVerdict> FinegrainModel::predict(const Tensor& images) const {
  const Tensor probs = nn::softmax_rows(logits(images));
  std::vector<CardVerdict> out;
  for (std::size_t b = 0; b < probs.dim(0); ++b) {
    const double py = probs[b * 2], pr = probs[b * 2 + 1];
    out.push_back(pr > py ? CardVerdict{CardColor::Red, pr} : CardVerdict{CardColor::Yellow, py});
  }
  return out;
}

void FinegrainModel::update_batch_stats(const Tensor& images) {
  check_input(images);
  backbone_.forward(images, Mode::Train);
  dlogits_ = Tensor();
  dmamc_.clear();
}

FinegrainLoss FinegrainModel::forward_train(const Tensor& images, std::span<const std::size_t> labels,
                                            double lambda) {
  check_input(images);
  if (labels.size() != images.dim(0)) throw ShapeError("finegrain: label count differs from batch");
  if (!(lambda >= 0.0)) throw InvalidArgument("finegrain: lambda must be non-negative");
  lambda_ = lambda;
  const AttentionFeatures a = osme_.forward(backbone_.forward(images, Mode::Train), Mode::Train);
  nn::SoftmaxCrossEntropy ce = nn::softmax_cross_entropy(head_.forward(concat(a), Mode::Train), labels);
  dlogits_ = std::move(ce.dlogits);
  FinegrainLoss loss{ce.loss, 0.0, ce.loss};
  dmamc_.clear();
  if (lambda > 0.0) {
    MamcResult m = mamc_loss(a.features, labels);
    loss.mamc = m.loss;
    loss.total = ce.loss + lambda * m.loss;
    dmamc_ = std::move(m.grad);
  }
  return loss;
}

void FinegrainModel::backward() {
  if (dlogits_.empty()) throw InvalidArgument("finegrain: backward without forward_train");
  const Tensor dcat = head_.backward(dlogits_);
  const std::size_t b = dcat.dim(0), d = config_.feature_dim, p = config_.branches;
  std::vector<Tensor> df(p, Tensor({b, d}));
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t q = 0; q < p; ++q) {
      for (std::size_t k = 0; k < d; ++k) {
        df[q][i * d + k] = dcat[(i * p + q) * d + k] + (dmamc_.empty() ? 0.0 : lambda_ * dmamc_[q][i * d + k]);
      }
    }
  }
  backbone_.backward(osme_.backward(df));
}

std::vector<Tensor*> FinegrainModel::trainable() {
  std::vector<Tensor*> out = backbone_.trainable();
  for (auto& [name, p] : osme_.named_params()) {
    for (Tensor* t : p->trainable()) out.push_back(t);
  }
  for (Tensor* t : head_.params()->trainable()) out.push_back(t);
  return out;
}

std::vector<LayerParams*> FinegrainModel::all_params() {
  std::vector<LayerParams*> out;
  for (auto& [name, p] : backbone_.named_params("backbone")) out.push_back(p);
  for (auto& [name, p] : osme_.named_params()) out.push_back(p);
  out.push_back(head_.params());
  return out;
}

nn::Checkpoint FinegrainModel::to_checkpoint() const {
  nn::Checkpoint ck;
  ck.meta["model"] = "finegrain";
  ck.meta["input_size"] = std::to_string(config_.input_size);
  ck.meta["channels"] = join(config_.channels);
  ck.meta["branches"] = std::to_string(config_.branches);
  ck.meta["feature_dim"] = std::to_string(config_.feature_dim);
  ck.meta["reduction"] = std::to_string(config_.reduction);
  ck.meta["lambda_mamc"] = fmt(config_.lambda_mamc);
  for (const auto& [name, p] : backbone_.named_params("backbone")) ck.layers.emplace_back(name, *p);
  for (const auto& [name, p] : osme_.named_params()) ck.layers.emplace_back(name, *p);
  ck.layers.emplace_back("head", *head_.params());
  return ck;
}

FinegrainModel FinegrainModel::from_checkpoint(const nn::Checkpoint& ck) {
  if (ck.meta_at("model") != "finegrain") throw InvalidArgument("checkpoint is not a finegrain model");
  FinegrainConfig cfg;
  try {
    cfg.input_size = std::stoul(ck.meta_at("input_size"));
    cfg.channels = parse_list(ck.meta_at("channels"));
    cfg.branches = std::stoul(ck.meta_at("branches"));
    cfg.feature_dim = std::stoul(ck.meta_at("feature_dim"));
    cfg.reduction = std::stoul(ck.meta_at("reduction"));
    cfg.lambda_mamc = std::stod(ck.meta_at("lambda_mamc"));
  } catch (const std::logic_error&) {
    throw InvalidArgument("finegrain checkpoint has malformed metadata");
  }
  FinegrainModel model(cfg, 0);
  for (auto& [name, p] : model.backbone_.named_params("backbone")) nn::assign_params(*p, ck.layer(name), name);
  for (auto& [name, p] : model.osme_.named_params()) nn::assign_params(*p, ck.layer(name), name);
  nn::assign_params(*model.head_.params(), ck.layer("head"), "head");
  return model;
}

CardVerdict classify_card(const FinegrainModel& model, const Tensor& image) {
  const Tensor* one[] = {&image};
  return model.predict(stack_images(one)).front();
}

std::vector<CardSample> card_samples(const std::vector<synth::LabeledImage>& images) {
  std::vector<CardSample> out;
  for (const auto& s : images) {
    const auto label = s.label();
    if (!label) continue;
    if (const auto color = card_color_of(*label)) out.push_back({&s.image, *color});
  }
  return out;
}

double card_accuracy(const FinegrainModel& model, std::span<const CardSample> samples) {
  if (samples.empty()) throw InvalidArgument("card_accuracy: empty sample set");
  std::size_t correct = 0;
  constexpr std::size_t kBatch = 32;
  for (std::size_t start = 0; start < samples.size(); start += kBatch) {
    const std::size_t end = std::min(samples.size(), start + kBatch);
    std::vector<const Tensor*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(samples[i].image);
    const auto v = model.predict(stack_images(batch));
    for (std::size_t i = start; i < end; ++i) correct += v[i - start].color == samples[i].color;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

FinegrainTrainResult train_finegrain(const FinegrainConfig& config, std::span<const CardSample> train,
                                     std::span<const CardSample> val, const FinegrainTrainOptions& opts) {
  config.validate();
  if (opts.epochs == 0 || opts.batch_size < 4 || opts.batch_size % 2 != 0) {
    throw InvalidArgument("train_finegrain: epochs must be positive and batch_size even and >= 4");
  }
  std::array<std::vector<std::size_t>, 2> pools;
  for (std::size_t i = 0; i < train.size(); ++i) pools[static_cast<std::size_t>(train[i].color)].push_back(i);
  for (std::size_t c = 0; c < 2; ++c) {
    if (pools[c].size() < 2) {
      throw InvalidArgument("train_finegrain: colour " + std::string(to_string(static_cast<CardColor>(c))) +
                            " needs at least two training samples");
    }
  }
  if (val.empty()) throw InvalidArgument("train_finegrain: empty validation set");

  FinegrainTrainResult result{FinegrainModel(config, derive_seed(opts.seed, 1)), {}, {}};
  FinegrainModel& model = result.model;
  nn::OptimizerState state{opts.adam, 0, {}, {}};
  const auto params = model.trainable();
  Rng rng(derive_seed(opts.seed, 2));

  // Balanced sampler: each colour pool is consumed in a reshuffled cycle.
  std::array<std::size_t, 2> cursor{0, 0};
  const auto reshuffle = [&](std::vector<std::size_t>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
  };
  reshuffle(pools[0]);
  reshuffle(pools[1]);
  const auto draw = [&](std::size_t c) {
    if (cursor[c] == pools[c].size()) {
      reshuffle(pools[c]);
      cursor[c] = 0;
    }
    return pools[c][cursor[c]++];
  };
  const std::size_t half = opts.batch_size / 2;
  const std::size_t batches = (train.size() + opts.batch_size - 1) / opts.batch_size;
  const auto layers = model.all_params();
  nn::BestSnapshot best;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    double sum = 0.0;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      std::vector<Tensor> images;
      std::vector<std::size_t> labels;
      for (std::size_t k = 0; k < half; ++k) {
        for (std::size_t c = 0; c < 2; ++c) {
          const CardSample& s = train[draw(c)];
          images.push_back(classifier::augment(*s.image, classifier::Taxonomy::Ten,
                                               index_of(ClassLabel::RedCard), opts.augment, rng));
          labels.push_back(c);
        }
      }
      std::vector<const Tensor*> ptrs;
      for (const auto& im : images) ptrs.push_back(&im);
      nn::zero_grads(params);
      sum += model.forward_train(stack_images(ptrs), labels, config.lambda_mamc).total;
      model.backward();
      nn::adam_step(params, state);
    }
    result.train_loss.push_back(sum / static_cast<double>(batches));
    if (opts.precise_bn) {
      // Colours alternate so every statistics batch is balanced like training.
      std::vector<std::size_t> order;
      for (std::size_t k = 0; k < std::max(pools[0].size(), pools[1].size()); ++k) {
        for (const auto& pool : pools) {
          if (k < pool.size()) order.push_back(pool[k]);
        }
      }
      nn::BatchStatsPass pass(layers);
      for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
        const std::size_t end = std::min(order.size(), start + opts.batch_size);
        std::vector<const Tensor*> ptrs;
        for (std::size_t j = start; j < end; ++j) ptrs.push_back(train[order[j]].image);
        pass.next_batch(ptrs.size());
        model.update_batch_stats(stack_images(ptrs));
      }
    }
    result.val_accuracy.push_back(card_accuracy(model, val));
    if (opts.keep_best) best.offer(epoch, result.val_accuracy.back(), layers);
  }
  best.restore(layers);
  result.best_epoch = opts.keep_best ? best.epoch() : opts.epochs - 1;
  for (LayerParams* p : layers) nn::snap_to_f32(*p);
  return result;
}

void write_card_csv(std::ostream& os, std::span<const std::string> frame_ids, const FinegrainModel& model,
                    std::span<const Tensor* const> images) {
  if (frame_ids.size() != images.size()) throw InvalidArgument("write_card_csv: length mismatch");
  os << "frame_id,p_Yellow,p_Red,color,confidence\n";
  char buf[96];
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor* one[] = {images[i]};
    const Tensor probs = nn::softmax_rows(model.logits(stack_images(one)));
    const CardVerdict v = probs[1] > probs[0] ? CardVerdict{CardColor::Red, probs[1]}
                                              : CardVerdict{CardColor::Yellow, probs[0]};
    std::snprintf(buf, sizeof buf, ",%.9f,%.9f,", probs[0], probs[1]);
    os << frame_ids[i] << buf << to_string(v.color);
    std::snprintf(buf, sizeof buf, ",%.9f\n", v.confidence);
    os << buf;
  }
}

}  // namespace sevdet::finegrain
