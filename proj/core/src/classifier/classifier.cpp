#include "sevdet/classifier/classifier.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "sevdet/error.hpp"
#include "sevdet/image.hpp"
#include "sevdet/random.hpp"

namespace sevdet::classifier {

using nn::LayerParams;
using nn::Mode;
using nn::shape_str;

namespace {

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

std::string_view taxonomy_name(Taxonomy t) { return t == Taxonomy::Nine ? "nine" : "ten"; }

bool is_scene_index(Taxonomy t, std::size_t i) {
  if (t == Taxonomy::Nine) return is_scene_class(static_cast<NineClass>(i));
  return is_scene(static_cast<ClassLabel>(i));
}

void append_head(nn::Sequential& net, std::size_t features, std::size_t classes, Rng& rng) {
  net.add<nn::GlobalAvgPool>();
  auto head = LayerParams::dense(features, classes);
  head.init_he_uniform(rng);
  net.add<nn::Dense>(std::move(head));
}

}  // namespace

std::size_t num_classes(Taxonomy t) { return t == Taxonomy::Nine ? kNumNineClasses : kNumClassLabels; }

std::string_view class_name(Taxonomy t, std::size_t index) {
  if (index >= num_classes(t)) throw InvalidArgument("class index out of range");
  return t == Taxonomy::Nine ? to_string(static_cast<NineClass>(index))
                             : to_string(static_cast<ClassLabel>(index));
}

void ClassifierConfig::validate() const {
  if (channels.empty()) throw InvalidArgument("classifier: channel plan is empty");
  const std::size_t factor = std::size_t{1} << channels.size();
  if (input_size == 0 || input_size % factor != 0) {
    throw InvalidArgument("classifier: input_size " + std::to_string(input_size) +
                          " is not divisible by " + std::to_string(factor));
  }
  for (std::size_t c : channels) {
    if (c == 0) throw InvalidArgument("classifier: zero channel count");
  }
}

nn::Sequential build_backbone(const std::vector<std::size_t>& channels, Rng& rng) {
  nn::Sequential net;
  nn::add_conv_pool_stages(net, 3, channels, rng);
  return net;
}

ClassifierOutput make_output(std::span<const double> probs) {
  if (probs.empty()) throw InvalidArgument("make_output: empty probability row");
  ClassifierOutput out;
  out.probs.assign(probs.begin(), probs.end());
  out.top_index = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  out.top_prob = probs[out.top_index];
  return out;
}

Classifier::Classifier(const ClassifierConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  net_ = build_backbone(config_.channels, rng);
  append_head(net_, config_.channels.back(), num_classes(config_.taxonomy), rng);
}

Classifier::Classifier(const ClassifierConfig& config, nn::Sequential backbone,
                       std::size_t feature_channels, std::uint64_t seed)
    : config_(config), net_(std::move(backbone)) {
  if (feature_channels == 0) throw InvalidArgument("classifier: backbone has no feature channels");
  Rng rng(seed);
  append_head(net_, feature_channels, num_classes(config_.taxonomy), rng);
}

void Classifier::check_input(const Tensor& images) const {
  images.expect_rank(4, "classifier input");
  const std::size_t s = config_.input_size;
  if (images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s) {
    throw ShapeError("classifier: expected [B,3," + std::to_string(s) + "," + std::to_string(s) +
                     "], got " + shape_str(images.shape()));
  }
}

Tensor Classifier::logits(const Tensor& images) const {
  check_input(images);
  return net_.infer(images);
}

std::vector<ClassifierOutput> Classifier::predict(const Tensor& images) const {
  const Tensor probs = nn::softmax_rows(logits(images));
  const std::size_t k = probs.dim(1);
  std::vector<ClassifierOutput> out;
  for (std::size_t b = 0; b < probs.dim(0); ++b) out.push_back(make_output(probs.values().subspan(b * k, k)));
  return out;
}

double Classifier::forward_train(const Tensor& images, std::span<const std::size_t> labels) {
  check_input(images);
  if (labels.size() != images.dim(0)) throw ShapeError("classifier: label count differs from batch");
  const Tensor z = net_.forward(images, Mode::Train);
  nn::SoftmaxCrossEntropy ce = nn::softmax_cross_entropy(z, labels);
  dlogits_ = std::move(ce.dlogits);
  return ce.loss;
}

void Classifier::update_batch_stats(const Tensor& images) {
  check_input(images);
  net_.forward(images, Mode::Train);
  dlogits_ = Tensor();
}

void Classifier::backward() {
  if (dlogits_.empty()) throw InvalidArgument("classifier: backward without forward_train");
  net_.backward(dlogits_);
}

std::vector<Tensor*> Classifier::trainable() { return net_.trainable(); }

std::vector<LayerParams*> Classifier::all_params() {
  std::vector<LayerParams*> out;
  for (auto& [name, p] : net_.named_params("net")) out.push_back(p);
  return out;
}

nn::Checkpoint Classifier::to_checkpoint() const {
  nn::Checkpoint ck;
  ck.meta["model"] = "classifier";
  ck.meta["input_size"] = std::to_string(config_.input_size);
  ck.meta["channels"] = join(config_.channels);
  ck.meta["taxonomy"] = std::string(taxonomy_name(config_.taxonomy));
  for (const auto& [name, p] : net_.named_params("net")) ck.layers.emplace_back(name, *p);
  return ck;
}

Classifier Classifier::from_checkpoint(const nn::Checkpoint& ck) {
  if (ck.meta_at("model") != "classifier") throw InvalidArgument("checkpoint is not a classifier model");
  ClassifierConfig cfg;
  try {
    cfg.input_size = std::stoul(ck.meta_at("input_size"));
    cfg.channels = parse_list(ck.meta_at("channels"));
  } catch (const std::logic_error&) {
    throw InvalidArgument("classifier checkpoint has malformed metadata");
  }
  const std::string& tax = ck.meta_at("taxonomy");
  if (tax != "nine" && tax != "ten") throw InvalidArgument("classifier checkpoint: unknown taxonomy '" + tax + "'");
  cfg.taxonomy = tax == "nine" ? Taxonomy::Nine : Taxonomy::Ten;
  Classifier model(cfg, 0);
  for (auto& [name, p] : model.net_.named_params("net")) nn::assign_params(*p, ck.layer(name), name);
  return model;
}

std::optional<ClassifierOutput> classify_with_threshold(const ClassifierOutput& out, double tau) {
  if (!(tau >= 0.0 && tau < 1.0)) throw InvalidArgument("classify_with_threshold: tau must be in [0,1)");
  if (out.top_prob > tau) return out;
  return std::nullopt;
}

std::optional<ClassifierOutput> classify_with_threshold(const Classifier& model, const Tensor& image,
                                                        double tau) {
  const Tensor* one[] = {&image};
  return classify_with_threshold(model.predict(stack_images(one)).front(), tau);
}

std::vector<Sample> nine_class_samples(const std::vector<synth::LabeledImage>& images) {
  std::vector<Sample> out;
  for (const auto& s : images) {
    if (const auto label = s.label()) out.push_back({&s.image, index_of(merge_card_labels(*label))});
  }
  return out;
}

std::vector<Sample> ten_class_samples(const std::vector<synth::LabeledImage>& images) {
  std::vector<Sample> out;
  for (const auto& s : images) {
    if (const auto label = s.label()) out.push_back({&s.image, index_of(*label)});
  }
  return out;
}

bool is_sided(Taxonomy t, std::size_t label) {
  if (t == Taxonomy::Nine) {
    const auto c = static_cast<NineClass>(label);
    return c == NineClass::LeftPenaltyArea || c == NineClass::RightPenaltyArea;
  }
  const auto c = static_cast<ClassLabel>(label);
  return c == ClassLabel::LeftPenaltyArea || c == ClassLabel::RightPenaltyArea;
}

Tensor augment(const Tensor& image, Taxonomy t, std::size_t label, const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.enabled) return image;
  AffineWarp w;
  w.scale = 1.0 + uniform(rng, -cfg.scale, cfg.scale);
  w.rotate_deg = uniform(rng, -cfg.rotate_deg, cfg.rotate_deg);
  w.shift_x = uniform(rng, -cfg.shift, cfg.shift);
  w.shift_y = uniform(rng, -cfg.shift, cfg.shift);
  const bool may_flip = cfg.flip_sided_scenes || !is_sided(t, label);
  w.flip = uniform01(rng) < cfg.flip_prob && may_flip;
  return warp_affine(image, w);
}

std::vector<ClassifierOutput> predict_all(const Classifier& model, std::span<const Tensor* const> images,
                                          std::size_t batch_size) {
  std::vector<ClassifierOutput> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, images.size() - start);
    const auto batch = model.predict(stack_images(images.subspan(start, n)));
    out.insert(out.end(), batch.begin(), batch.end());
  }
  return out;
}

double argmax_accuracy(const Classifier& model, std::span<const Sample> samples) {
  if (samples.empty()) throw InvalidArgument("argmax_accuracy: empty sample set");
  std::vector<const Tensor*> images;
  for (const auto& s : samples) images.push_back(s.image);
  const auto outs = predict_all(model, images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) correct += outs[i].top_index == samples[i].label;
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainResult train_classifier(const ClassifierConfig& config, std::span<const Sample> train,
                             std::span<const Sample> val, const TrainOptions& opts) {
  config.validate();
  const std::size_t k = num_classes(config.taxonomy);
  if (opts.epochs == 0 || opts.batch_size == 0) {
    throw InvalidArgument("train_classifier: epochs and batch_size must be positive");
  }
  std::vector<std::size_t> support(k, 0);
  for (const auto& s : train) {
    if (s.label >= k) throw InvalidArgument("train_classifier: label out of range");
    ++support[s.label];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (support[c] == 0) {
      throw InvalidArgument("train_classifier: class " + std::string(class_name(config.taxonomy, c)) +
                            " is absent from the training set");
    }
  }
  if (val.empty()) throw InvalidArgument("train_classifier: empty validation set");

  TrainResult result{Classifier(config, derive_seed(opts.seed, 1)), {}, {}};
  Classifier& model = result.model;
  nn::OptimizerState state{opts.adam, 0, {}, {}};
  const auto params = model.trainable();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(opts.seed, 2));
  const auto layers = model.all_params();
  nn::BestSnapshot best;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    double sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      std::vector<Tensor> augmented;
      std::vector<std::size_t> labels;
      for (std::size_t j = start; j < end; ++j) {
        const Sample& s = train[order[j]];
        augmented.push_back(augment(*s.image, config.taxonomy, s.label, opts.augment, rng));
        labels.push_back(s.label);
      }
      std::vector<const Tensor*> ptrs;
      for (const auto& a : augmented) ptrs.push_back(&a);
      nn::zero_grads(params);
      const double loss = model.forward_train(stack_images(ptrs), labels);
      model.backward();
      nn::adam_step(params, state);
      sum += loss * static_cast<double>(labels.size());
    }
    result.train_loss.push_back(sum / static_cast<double>(train.size()));
    if (opts.precise_bn) {
      nn::BatchStatsPass pass(layers);
      for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
        const std::size_t end = std::min(order.size(), start + opts.batch_size);
        std::vector<const Tensor*> ptrs;
        for (std::size_t j = start; j < end; ++j) ptrs.push_back(train[order[j]].image);
        pass.next_batch(ptrs.size());
        model.update_batch_stats(stack_images(ptrs));
      }
    }
    result.val_accuracy.push_back(argmax_accuracy(model, val));
    if (opts.keep_best) best.offer(epoch, result.val_accuracy.back(), layers);
  }
  best.restore(layers);
  result.best_epoch = opts.keep_best ? best.epoch() : opts.epochs - 1;
  for (LayerParams* p : layers) nn::snap_to_f32(*p);
  return result;
}

void write_predictions_csv(std::ostream& os, Taxonomy t, std::span<const std::string> frame_ids,
                           std::span<const ClassifierOutput> outputs, double tau) {
  if (frame_ids.size() != outputs.size()) throw InvalidArgument("write_predictions_csv: length mismatch");
  const std::size_t k = num_classes(t);
  os << "frame_id";
  for (std::size_t c = 0; c < k; ++c) os << ",p_" << class_name(t, c);
  os << ",top_class,decision\n";
  char buf[32];
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto& o = outputs[i];
    if (o.probs.size() != k) throw InvalidArgument("write_predictions_csv: probability width mismatch");
    os << frame_ids[i];
    for (double p : o.probs) {
      std::snprintf(buf, sizeof buf, "%.9f", p);
      os << ',' << buf;
    }
    const char* decision = !classify_with_threshold(o, tau)     ? "low_confidence"
                           : is_scene_index(t, o.top_index) ? "scene"
                                                            : "accepted";
    os << ',' << class_name(t, o.top_index) << ',' << decision << '\n';
  }
}

}  // namespace sevdet::classifier
