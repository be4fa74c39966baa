#include "sevdet/pipeline/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "sevdet/error.hpp"
#include "sevdet/image.hpp"

namespace sevdet::pipeline {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

std::optional<EventKind> kind_of(const FrameVerdict& v) { return v.event_kind(); }

double verdict_confidence(const FrameVerdict& v) { return std::get<EventVerdict>(v.outcome).confidence; }

// Seconds between two frame indices; computed from the frame gap so equal
// gaps compare equal regardless of absolute position.
double seconds_between(std::size_t later, std::size_t earlier, double fps) {
  return static_cast<double>(later - earlier) / fps;
}

std::optional<EventTag> vote(const std::deque<FrameVerdict>& window, const PipelineConfig& config) {
  std::array<std::size_t, kNumEventKinds> counts{};
  std::array<double, kNumEventKinds> conf{};
  for (const FrameVerdict& v : window) {
    if (const auto k = kind_of(v)) {
      ++counts[index_of(*k)];
      conf[index_of(*k)] += verdict_confidence(v);
    }
  }
  // majority > window/2, so at most one kind can reach it.
  for (std::size_t k = 0; k < kNumEventKinds; ++k) {
    if (counts[k] < config.majority) continue;
    return EventTag{kAllEventKinds[k],
                    window[config.half_window()].frame_index,
                    window.front().frame_index,
                    window.back().frame_index,
                    counts[k],
                    conf[k] / static_cast<double>(counts[k])};
  }
  return std::nullopt;
}

EventOccurrence occurrence_of(const EventTag& tag, const PipelineConfig& config) {
  return {tag.kind, tag.first_frame, tag.last_frame, tag_time(tag, config), tag.confidence_mean};
}

Tensor resized(const Tensor& frame, std::size_t size) {
  if (frame.rank() != 3 || frame.dim(0) != 3 || frame.dim(1) != frame.dim(2)) {
    throw ShapeError("pipeline: frames must be [3,S,S], got " + nn::shape_str(frame.shape()));
  }
  const std::size_t s = frame.dim(1);
  if (s != size && s % size != 0 && size % s != 0) {
    throw ShapeError("pipeline: frame size " + std::to_string(s) + " is not an integer multiple of model input " +
                     std::to_string(size));
  }
  return resize_square(frame, size);
}

std::vector<Tensor> resize_all(std::span<const Tensor* const> frames, std::size_t size) {
  std::vector<Tensor> out;
  out.reserve(frames.size());
  for (const Tensor* f : frames) out.push_back(resized(*f, size));
  return out;
}

std::vector<const Tensor*> pointers(const std::vector<Tensor>& v) {
  std::vector<const Tensor*> out;
  for (const auto& t : v) out.push_back(&t);
  return out;
}

void check_increasing(std::span<const FrameRecord> frames) {
  for (std::size_t i = 1; i < frames.size(); ++i) {
    if (frames[i].index <= frames[i - 1].index) {
      throw InvalidArgument("run_detection: frame " + std::to_string(frames[i].index) + " arrives after frame " +
                            std::to_string(frames[i - 1].index));
    }
  }
}

std::size_t center_frame(const EventOccurrence& o, double fps) {
  return static_cast<std::size_t>(std::llround(o.timestamp_s * fps));
}

Json verdict_json(const FrameVerdict& v) {
  Json j;
  j["type"] = "frame";
  j["frame"] = v.frame_index;
  std::visit(
      [&](const auto& o) {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, RejectedVae>) {
          j["outcome"] = "rejected_vae";
          j["loss"] = o.loss;
        } else if constexpr (std::is_same_v<T, RejectedScene>) {
          j["outcome"] = "rejected_scene";
          j["class"] = std::string(to_string(o.cls));
          j["prob"] = o.prob;
        } else if constexpr (std::is_same_v<T, RejectedLowConfidence>) {
          j["outcome"] = "rejected_low_confidence";
          j["class"] = std::string(to_string(o.top));
          j["prob"] = o.top_prob;
        } else {
          j["outcome"] = "event";
          j["kind"] = std::string(to_string(o.kind));
          j["confidence"] = o.confidence;
          if (o.card_confidence) j["card_confidence"] = *o.card_confidence;
        }
      },
      v.outcome);
  return j;
}

}  // namespace

std::optional<EventKind> FrameVerdict::event_kind() const {
  if (const auto* e = std::get_if<EventVerdict>(&outcome)) return e->kind;
  return std::nullopt;
}

void PipelineConfig::validate() const {
  if (!(fps > 0.0)) throw InvalidArgument("pipeline: fps must be positive");
  if (window == 0 || window % 2 == 0) throw InvalidArgument("pipeline: window must be odd");
  if (majority <= window / 2 || majority > window) {
    throw InvalidArgument("pipeline: majority must exceed window/2 and not exceed window");
  }
  if (!(dedup_window_s > 0.0)) throw InvalidArgument("pipeline: dedup window must be positive");
  if (!(vae_threshold > 0.0) || !std::isfinite(vae_threshold)) {
    throw InvalidArgument("pipeline: vae_threshold must be positive (calibrate the VAE first)");
  }
  if (!(softmax_tau > 0.0 && softmax_tau < 1.0)) throw InvalidArgument("pipeline: softmax_tau must be in (0,1)");
}

std::optional<EventTag> window_vote(std::span<const FrameVerdict> verdicts, std::size_t center,
                                    const PipelineConfig& config) {
  const std::size_t h = config.half_window();
  if (center < h || center + h >= verdicts.size()) return std::nullopt;
  const std::deque<FrameVerdict> window(verdicts.begin() + static_cast<std::ptrdiff_t>(center - h),
                                        verdicts.begin() + static_cast<std::ptrdiff_t>(center + h + 1));
  return vote(window, config);
}

std::vector<EventTag> window_votes(std::span<const FrameVerdict> verdicts, const PipelineConfig& config) {
  std::vector<EventTag> tags;
  for (std::size_t c = 0; c < verdicts.size(); ++c) {
    if (auto t = window_vote(verdicts, c, config)) tags.push_back(*t);
  }
  return tags;
}

double tag_time(const EventTag& tag, const PipelineConfig& config) {
  return static_cast<double>(tag.center_frame) / config.fps;
}

std::vector<EventOccurrence> dedup(std::span<const EventTag> tags, const PipelineConfig& config,
                                   std::vector<bool>* emitted) {
  std::array<std::optional<std::size_t>, kNumEventKinds> last{};
  std::vector<EventOccurrence> out;
  if (emitted) emitted->assign(tags.size(), false);
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const EventTag& t = tags[i];
    auto& prev = last[index_of(t.kind)];
    if (prev && (t.center_frame < *prev || seconds_between(t.center_frame, *prev, config.fps) < config.dedup_window_s)) {
      continue;
    }
    prev = t.center_frame;
    out.push_back(occurrence_of(t, config));
    if (emitted) (*emitted)[i] = true;
  }
  return out;
}

Aggregator::Aggregator(PipelineConfig config) : config_(config), last_emitted_(kNumEventKinds) {
  if (config_.window == 0 || config_.window % 2 == 0) throw InvalidArgument("Aggregator: window must be odd");
  if (config_.majority <= config_.window / 2 || config_.majority > config_.window) {
    throw InvalidArgument("Aggregator: majority must exceed window/2 and not exceed window");
  }
  if (!(config_.fps > 0.0) || !(config_.dedup_window_s > 0.0)) {
    throw InvalidArgument("Aggregator: fps and dedup window must be positive");
  }
}

std::optional<EventOccurrence> Aggregator::push(const FrameVerdict& verdict) {
  if (last_index_ && verdict.frame_index <= *last_index_) {
    throw InvalidArgument("Aggregator: frame " + std::to_string(verdict.frame_index) + " arrives after frame " +
                          std::to_string(*last_index_));
  }
  last_index_ = verdict.frame_index;
  buffer_.push_back(verdict);
  if (buffer_.size() > config_.window) buffer_.pop_front();
  if (buffer_.size() < config_.window) return std::nullopt;
  const auto tag = vote(buffer_, config_);
  if (!tag) return std::nullopt;
  tags_.push_back(*tag);
  std::optional<std::size_t>& prev = last_emitted_[index_of(tag->kind)];
  if (prev && seconds_between(tag->center_frame, *prev, config_.fps) < config_.dedup_window_s) {
    emitted_.push_back(false);
    return std::nullopt;
  }
  prev = tag->center_frame;
  emitted_.push_back(true);
  occurrences_.push_back(occurrence_of(*tag, config_));
  return occurrences_.back();
}

void Models::validate() const {
  if (!vae || !classifier || !finegrain) throw InvalidArgument("pipeline: all three models are required");
  if (classifier->config().taxonomy != classifier::Taxonomy::Nine) {
    throw InvalidArgument("pipeline: the classifier must use the nine-class (merged card) taxonomy");
  }
}

std::vector<FrameVerdict> process_frames(std::span<const Tensor* const> frames, std::size_t first_index,
                                         const Models& models, const PipelineConfig& config) {
  models.validate();
  config.validate();
  std::vector<FrameVerdict> out;
  out.reserve(frames.size());
  if (frames.empty()) return out;

  const std::vector<Tensor> vae_in = resize_all(frames, models.vae->config().input_size);
  const std::vector<double> losses = vae::image_losses(*models.vae, pointers(vae_in));

  // Only gate-accepted frames reach the classifier.
  std::vector<std::size_t> passed;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    out.push_back({first_index + i, RejectedVae{losses[i]}});
    if (vae::gate_from_loss(losses[i], config.vae_threshold).accepted) passed.push_back(i);
  }
  if (passed.empty()) return out;

  std::vector<const Tensor*> cls_frames;
  for (std::size_t i : passed) cls_frames.push_back(frames[i]);
  const std::vector<Tensor> cls_in = resize_all(cls_frames, models.classifier->config().input_size);
  const std::vector<classifier::ClassifierOutput> preds =
      models.classifier->predict(stack_images(pointers(cls_in)));

  std::vector<std::size_t> cards;
  for (std::size_t j = 0; j < passed.size(); ++j) {
    const classifier::ClassifierOutput& p = preds[j];
    const auto top = static_cast<NineClass>(p.top_index);
    Outcome& o = out[passed[j]].outcome;
    if (!classifier::classify_with_threshold(p, config.softmax_tau)) {
      o = RejectedLowConfidence{top, p.top_prob};
    } else if (is_scene_class(top)) {
      o = RejectedScene{top, p.top_prob};
    } else if (const auto kind = direct_event_kind(top)) {
      o = EventVerdict{*kind, p.top_prob, std::nullopt};
    } else {
      cards.push_back(j);
    }
  }
  if (cards.empty()) return out;

  std::vector<const Tensor*> card_frames;
  for (std::size_t j : cards) card_frames.push_back(frames[passed[j]]);
  const std::vector<Tensor> card_in = resize_all(card_frames, models.finegrain->config().input_size);
  const std::vector<finegrain::CardVerdict> colors = models.finegrain->predict(stack_images(pointers(card_in)));
  for (std::size_t c = 0; c < cards.size(); ++c) {
    const std::size_t j = cards[c];
    out[passed[j]].outcome =
        EventVerdict{finegrain::event_kind_of(colors[c].color), preds[j].top_prob, colors[c].confidence};
  }
  return out;
}

FrameVerdict process_frame(const Tensor& frame, std::size_t frame_index, const Models& models,
                           const PipelineConfig& config) {
  const Tensor* one[] = {&frame};
  return process_frames(one, frame_index, models, config).front();
}

std::vector<FrameRecord> read_frame_manifest(const fs::path& dir) {
  const fs::path path = dir / synth::kFramesManifest;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open frame manifest '" + path.string() + "'");
  std::vector<FrameRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    FrameRecord r{};
    if (!(ss >> r.index >> r.timestamp_s)) {
      throw IoError("malformed frame manifest line " + path.string() + ":" + std::to_string(lineno));
    }
    r.path = dir / synth::frame_file_name(r.index);
    if (!fs::is_regular_file(r.path)) {
      fs::path png = r.path;
      png.replace_extension(".png");
      if (fs::is_regular_file(png)) {
        throw IoError("'" + png.string() + "': PNG frames are not supported, convert to binary PPM");
      }
      throw IoError("frame manifest lists missing file '" + r.path.string() + "'");
    }
    out.push_back(std::move(r));
  }
  return out;
}

DetectionResult run_detection(std::span<const FrameRecord> frames, const Models& models,
                              const PipelineConfig& config, std::size_t batch_size) {
  models.validate();
  config.validate();
  if (batch_size == 0) throw InvalidArgument("run_detection: batch_size must be positive");
  check_increasing(frames);
  DetectionResult result;
  Aggregator agg(config);
  for (std::size_t start = 0; start < frames.size(); start += batch_size) {
    const std::size_t end = std::min(frames.size(), start + batch_size);
    std::vector<Tensor> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(read_ppm(frames[i].path));
    const auto ptrs = pointers(images);
    std::vector<FrameVerdict> verdicts = process_frames(ptrs, 0, models, config);
    for (std::size_t i = start; i < end; ++i) {
      FrameVerdict& v = verdicts[i - start];
      v.frame_index = frames[i].index;
      agg.push(v);
      result.verdicts.push_back(std::move(v));
    }
  }
  result.tags = agg.tags();
  result.tag_emitted = agg.tag_emitted();
  result.occurrences = agg.occurrences();
  return result;
}

DetectionResult aggregate(std::vector<FrameVerdict> verdicts, const PipelineConfig& config) {
  DetectionResult result;
  Aggregator agg(config);
  for (const FrameVerdict& v : verdicts) agg.push(v);
  result.verdicts = std::move(verdicts);
  result.tags = agg.tags();
  result.tag_emitted = agg.tag_emitted();
  result.occurrences = agg.occurrences();
  return result;
}

void write_event_log(std::ostream& os, std::span<const EventOccurrence> occurrences) {
  for (const EventOccurrence& o : occurrences) {
    Json j;
    j["kind"] = std::string(to_string(o.kind));
    j["first_frame"] = o.first_frame;
    j["last_frame"] = o.last_frame;
    j["timestamp_s"] = o.timestamp_s;
    j["confidence_mean"] = o.confidence_mean;
    os << j.dump() << '\n';
  }
}

std::vector<EventOccurrence> read_event_log(std::istream& is) {
  std::vector<EventOccurrence> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      const auto kind = parse_event_kind(j.at("kind").get<std::string>());
      if (!kind) throw IoError("unknown event kind");
      out.push_back({*kind, j.at("first_frame").get<std::size_t>(), j.at("last_frame").get<std::size_t>(),
                     j.at("timestamp_s").get<double>(), j.at("confidence_mean").get<double>()});
    } catch (const std::exception& e) {
      throw IoError("malformed event log line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_trace(std::ostream& os, const DetectionResult& result) {
  for (const FrameVerdict& v : result.verdicts) os << verdict_json(v).dump() << '\n';
  for (std::size_t i = 0; i < result.tags.size(); ++i) {
    const EventTag& t = result.tags[i];
    Json j;
    j["type"] = "tag";
    j["kind"] = std::string(to_string(t.kind));
    j["center_frame"] = t.center_frame;
    j["first_frame"] = t.first_frame;
    j["last_frame"] = t.last_frame;
    j["votes"] = t.votes;
    j["confidence_mean"] = t.confidence_mean;
    j["status"] = i < result.tag_emitted.size() && result.tag_emitted[i] ? "emitted" : "suppressed";
    os << j.dump() << '\n';
  }
}

std::vector<std::pair<EventKind, std::size_t>> occurrence_counts(std::span<const EventOccurrence> occ) {
  std::vector<std::pair<EventKind, std::size_t>> out;
  for (EventKind k : kAllEventKinds) {
    out.emplace_back(k, static_cast<std::size_t>(std::count_if(occ.begin(), occ.end(),
                                                                [&](const auto& o) { return o.kind == k; })));
  }
  return out;
}

DetectionScore score_detection(std::span<const EventOccurrence> occurrences,
                               std::span<const synth::PlantedEvent> planted, const PipelineConfig& config,
                               std::size_t tolerance) {
  DetectionScore s;
  s.planted = planted.size();
  std::vector<bool> used(occurrences.size(), false);
  for (const synth::PlantedEvent& p : planted) {
    std::optional<std::size_t> best;
    std::size_t best_dist = 0;
    for (std::size_t i = 0; i < occurrences.size(); ++i) {
      if (used[i] || occurrences[i].kind != p.kind) continue;
      const std::size_t c = center_frame(occurrences[i], config.fps);
      const std::size_t d = c > p.frame_index ? c - p.frame_index : p.frame_index - c;
      if (d > tolerance) continue;
      if (!best || d < best_dist) {
        best = i;
        best_dist = d;
      }
    }
    if (best) {
      used[*best] = true;
      ++s.recovered;
    }
  }
  s.false_occurrences = static_cast<std::size_t>(std::count(used.begin(), used.end(), false));
  for (std::size_t i = 0; i < occurrences.size(); ++i) {
    for (std::size_t j = i + 1; j < occurrences.size(); ++j) {
      if (occurrences[i].kind != occurrences[j].kind) continue;
      const std::size_t a = center_frame(occurrences[i], config.fps);
      const std::size_t b = center_frame(occurrences[j], config.fps);
      const double gap = seconds_between(std::max(a, b), std::min(a, b), config.fps);
      if (gap < config.dedup_window_s) ++s.dedup_violations;
    }
  }
  return s;
}

}  // namespace sevdet::pipeline
