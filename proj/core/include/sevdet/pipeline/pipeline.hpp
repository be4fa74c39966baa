#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "sevdet/classifier/classifier.hpp"
#include "sevdet/classifier/labels.hpp"
#include "sevdet/finegrain/finegrain.hpp"
#include "sevdet/synth/synth.hpp"
#include "sevdet/vae/vae.hpp"

namespace sevdet::pipeline {

using nn::Tensor;

struct RejectedVae {
  double loss;
};
struct RejectedScene {
  NineClass cls;
  double prob;
};
struct RejectedLowConfidence {
  NineClass top;
  double top_prob;
};
/// Never a scene class. `confidence` is the classifier's top probability;
/// card frames also carry the fine-grain verdict confidence.
struct EventVerdict {
  EventKind kind;
  double confidence;
  std::optional<double> card_confidence;
};

using Outcome = std::variant<RejectedVae, RejectedScene, RejectedLowConfidence, EventVerdict>;

struct FrameVerdict {
  std::size_t frame_index;
  Outcome outcome;

  std::optional<EventKind> event_kind() const;
};

struct PipelineConfig {
  double fps = 30.0;
  std::size_t window = 15;
  std::size_t majority = 8;
  double dedup_window_s = 10.0;
  double vae_threshold = 0.0;  ///< must be set (calibrated) before use
  double softmax_tau = 0.9;

  /// Window odd, majority > window/2 and <= window, fps/dedup/threshold
  /// positive, tau in (0,1).
  void validate() const;
  std::size_t half_window() const { return window / 2; }
};

/// A window whose majority kind reached the vote; spans the whole window.
struct EventTag {
  EventKind kind;
  std::size_t center_frame;
  std::size_t first_frame;
  std::size_t last_frame;
  std::size_t votes;
  double confidence_mean;  ///< mean confidence of the voting frames
};

struct EventOccurrence {
  EventKind kind;
  std::size_t first_frame;
  std::size_t last_frame;
  double timestamp_s;  ///< center frame / fps
  double confidence_mean;
};

/// Tag at position `center` of an ordered verdict sequence, if the window has
/// full context and one kind holds at least `majority` frames.
std::optional<EventTag> window_vote(std::span<const FrameVerdict> verdicts, std::size_t center,
                                    const PipelineConfig& config);
/// Every tag of the sequence, in center order.
std::vector<EventTag> window_votes(std::span<const FrameVerdict> verdicts, const PipelineConfig& config);

double tag_time(const EventTag& tag, const PipelineConfig& config);

/// Per kind, a tag becomes an occurrence only if it lies at least
/// dedup_window_s after the last emitted occurrence of that kind.
/// `emitted`, if given, receives one flag per tag.
std::vector<EventOccurrence> dedup(std::span<const EventTag> tags, const PipelineConfig& config,
                                   std::vector<bool>* emitted = nullptr);

/// Streaming vote + dedup over verdicts delivered in strictly increasing
/// frame order. Output equals window_votes + dedup over the same sequence.
class Aggregator {
 public:
  explicit Aggregator(PipelineConfig config);

  /// Returns the occurrence emitted by the window this frame completes, if
  /// any. Throws InvalidArgument unless frame indices strictly increase.
  std::optional<EventOccurrence> push(const FrameVerdict& verdict);

  const std::vector<EventTag>& tags() const { return tags_; }
  const std::vector<bool>& tag_emitted() const { return emitted_; }
  const std::vector<EventOccurrence>& occurrences() const { return occurrences_; }

 private:
  PipelineConfig config_;
  std::deque<FrameVerdict> buffer_;
  std::optional<std::size_t> last_index_;
  std::vector<std::optional<std::size_t>> last_emitted_;  ///< center frame, per EventKind
  std::vector<EventTag> tags_;
  std::vector<bool> emitted_;
  std::vector<EventOccurrence> occurrences_;
};

/// The three trained stages. The classifier must use the nine-class taxonomy.
struct Models {
  const vae::Vae* vae = nullptr;
  const classifier::Classifier* classifier = nullptr;
  const finegrain::FinegrainModel* finegrain = nullptr;

  void validate() const;
};

/// Cascade on frames of any common size: each stage sees the frame resized to
/// its own input size (integer box/nearest ratio, else ShapeError). Frames are
/// batched internally; indices are assigned from `first_index` upward.
std::vector<FrameVerdict> process_frames(std::span<const Tensor* const> frames, std::size_t first_index,
                                         const Models& models, const PipelineConfig& config);
FrameVerdict process_frame(const Tensor& frame, std::size_t frame_index, const Models& models,
                           const PipelineConfig& config);

struct FrameRecord {
  std::size_t index;
  double timestamp_s;
  std::filesystem::path path;
};

/// Parses `<dir>/frames.txt` and resolves `frame_%08d.ppm` paths. Throws
/// IoError if a listed frame file is missing.
std::vector<FrameRecord> read_frame_manifest(const std::filesystem::path& dir);

struct DetectionResult {
  std::vector<FrameVerdict> verdicts;
  std::vector<EventTag> tags;
  std::vector<bool> tag_emitted;
  std::vector<EventOccurrence> occurrences;
};

/// Decodes frames in chunks of `batch_size`, runs the cascade and aggregates.
/// Throws InvalidArgument if frame indices do not strictly increase.
DetectionResult run_detection(std::span<const FrameRecord> frames, const Models& models,
                              const PipelineConfig& config, std::size_t batch_size = 64);
/// Aggregation only, over stored verdicts.
DetectionResult aggregate(std::vector<FrameVerdict> verdicts, const PipelineConfig& config);

/// One JSON object per line: kind, first_frame, last_frame, timestamp_s,
/// confidence_mean.
void write_event_log(std::ostream& os, std::span<const EventOccurrence> occurrences);
std::vector<EventOccurrence> read_event_log(std::istream& is);
/// JSON lines: one "frame" record per verdict, then one "tag" record per tag.
void write_trace(std::ostream& os, const DetectionResult& result);

/// Per-kind occurrence counts, in EventKind order.
std::vector<std::pair<EventKind, std::size_t>> occurrence_counts(std::span<const EventOccurrence> occ);

struct DetectionScore {
  std::size_t planted = 0;
  std::size_t recovered = 0;          ///< planted events matched within tolerance
  std::size_t false_occurrences = 0;  ///< occurrences matching no planted event
  std::size_t dedup_violations = 0;   ///< same-kind pairs closer than dedup_window_s
};

/// Matches each planted event to a distinct same-kind occurrence whose center
/// frame is within `tolerance` frames of the planted start, nearest first.
DetectionScore score_detection(std::span<const EventOccurrence> occurrences,
                               std::span<const synth::PlantedEvent> planted, const PipelineConfig& config,
                               std::size_t tolerance = 15);

}  // namespace sevdet::pipeline
