#pragma once

// Brute-force reference implementations. They restate each definition as
// directly as possible and share no code with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "sevdet/metrics/metrics.hpp"
#include "sevdet/pipeline/pipeline.hpp"
#include "sevdet/random.hpp"

namespace sevdet::test {

// ---- aggregation --------------------------------------------------------------

struct OracleOccurrence {
  EventKind kind;
  std::size_t center_frame;
  double confidence_mean;
};

/// Tags every sequence position whose full window holds >= majority frames of
/// one kind, then keeps a tag only if no kept tag of its kind lies within the
/// dedup window before it.
inline std::vector<OracleOccurrence> oracle_occurrences(const std::vector<pipeline::FrameVerdict>& v,
                                                        const pipeline::PipelineConfig& cfg) {
  const std::size_t h = cfg.window / 2;
  std::vector<OracleOccurrence> tags;
  for (std::size_t p = h; p + h < v.size(); ++p) {
    for (EventKind k : kAllEventKinds) {
      std::size_t votes = 0;
      double conf = 0.0;
      for (std::size_t q = p - h; q <= p + h; ++q) {
        const auto* e = std::get_if<pipeline::EventVerdict>(&v[q].outcome);
        if (e && e->kind == k) {
          ++votes;
          conf += e->confidence;
        }
      }
      if (votes >= cfg.majority) tags.push_back({k, v[p].frame_index, conf / static_cast<double>(votes)});
    }
  }
  std::vector<OracleOccurrence> kept;
  for (const auto& t : tags) {
    const bool blocked = std::any_of(kept.begin(), kept.end(), [&](const OracleOccurrence& o) {
      return o.kind == t.kind &&
             static_cast<double>(t.center_frame - o.center_frame) / cfg.fps < cfg.dedup_window_s;
    });
    if (!blocked) kept.push_back(t);
  }
  return kept;
}

/// Random verdict stream: runs of events, scenes, gate rejections and
/// low-confidence frames, with occasional flicker and gaps in frame indices.
inline std::vector<pipeline::FrameVerdict> random_verdicts(Rng& rng, std::size_t length) {
  std::vector<pipeline::FrameVerdict> out;
  std::size_t index = uniform_index(rng, 50);
  while (out.size() < length) {
    const std::size_t run = 1 + uniform_index(rng, 40);
    const std::size_t what = uniform_index(rng, 4);
    const auto kind = kAllEventKinds[uniform_index(rng, kNumEventKinds)];
    for (std::size_t i = 0; i < run && out.size() < length; ++i) {
      pipeline::Outcome o;
      const bool flicker = uniform01(rng) < 0.2;
      const auto flick_kind = kAllEventKinds[uniform_index(rng, kNumEventKinds)];
      if (what == 0 && !flicker) {
        o = pipeline::EventVerdict{kind, uniform(rng, 0.9, 1.0), std::nullopt};
      } else if (flicker && uniform01(rng) < 0.5) {
        o = pipeline::EventVerdict{flick_kind, uniform(rng, 0.9, 1.0), std::nullopt};
      } else if (what == 1) {
        o = pipeline::RejectedScene{NineClass::CenterCircle, 0.95};
      } else if (what == 2) {
        o = pipeline::RejectedVae{1e4};
      } else {
        o = pipeline::RejectedLowConfidence{NineClass::Tackle, 0.5};
      }
      out.push_back({index, o});
      index += uniform01(rng) < 0.05 ? 2 + uniform_index(rng, 20) : 1;
    }
  }
  return out;
}

inline pipeline::PipelineConfig random_pipeline_config(Rng& rng) {
  pipeline::PipelineConfig cfg;
  cfg.window = 2 * (1 + uniform_index(rng, 8)) + 1;  // 3..17
  cfg.majority = cfg.window / 2 + 1 + uniform_index(rng, cfg.window - cfg.window / 2);
  const double fps_choices[] = {25.0, 29.97, 30.0, 60.0};
  cfg.fps = fps_choices[uniform_index(rng, 4)];
  const double dedup_choices[] = {0.5, 1.0, 2.0, 10.0};
  cfg.dedup_window_s = dedup_choices[uniform_index(rng, 4)];
  cfg.vae_threshold = 1.0;
  return cfg;
}

/// Compares library aggregation (batch and streaming) to the oracle. Returns
/// an empty string on agreement, else a description of the first mismatch.
inline std::string compare_aggregation(const std::vector<pipeline::FrameVerdict>& v,
                                       const pipeline::PipelineConfig& cfg) {
  const auto expected = oracle_occurrences(v, cfg);
  auto batch = pipeline::aggregate(v, cfg).occurrences;
  pipeline::Aggregator streaming(cfg);
  std::vector<pipeline::EventOccurrence> streamed;
  for (const auto& f : v) {
    if (auto o = streaming.push(f)) streamed.push_back(*o);
  }
  for (const auto* got : {&batch, &streamed}) {
    const char* which = got == &batch ? "batch" : "streaming";
    if (got->size() != expected.size()) {
      return std::string(which) + ": " + std::to_string(got->size()) + " occurrences, oracle " +
             std::to_string(expected.size());
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto& g = (*got)[i];
      const auto& e = expected[i];
      const double ts = static_cast<double>(e.center_frame) / cfg.fps;
      if (g.kind != e.kind || g.timestamp_s != ts || std::abs(g.confidence_mean - e.confidence_mean) > 1e-12) {
        return std::string(which) + ": occurrence " + std::to_string(i) + " differs (center " +
               std::to_string(e.center_frame) + ")";
      }
    }
  }
  return {};
}

// ---- metrics --------------------------------------------------------------------

struct OraclePrf {
  std::optional<double> precision, recall, f1;
};

/// Precision and recall from their set definitions; F1 as their harmonic mean.
inline OraclePrf oracle_prf(const std::vector<bool>& truth, const std::vector<bool>& pred) {
  std::size_t both = 0, npred = 0, ntruth = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    both += truth[i] && pred[i];
    npred += pred[i];
    ntruth += truth[i];
  }
  OraclePrf r;
  if (npred > 0) r.precision = static_cast<double>(both) / static_cast<double>(npred);
  if (ntruth > 0) r.recall = static_cast<double>(both) / static_cast<double>(ntruth);
  if (npred + ntruth == 0) return r;
  if (both == 0) {
    r.f1 = 0.0;
  } else {
    r.f1 = 2.0 * *r.precision * *r.recall / (*r.precision + *r.recall);
  }
  return r;
}

inline bool same(const std::optional<double>& a, const std::optional<double>& b, double tol = 1e-12) {
  if (a.has_value() != b.has_value()) return false;
  return !a || std::abs(*a - *b) <= tol;
}

/// Micro-F1 over events from per-item outcome definitions.
struct OracleSweepRow {
  std::optional<double> f1;
  double recall_nonsoccer;
  double recall_nohighlight;
  std::size_t accepted;
};

inline OracleSweepRow oracle_sweep_row(const std::vector<metrics::SweepItem>& items, double t) {
  // Event F1 from precision over accepted items and recall over event items.
  std::size_t correct = 0, accepted = 0, events = 0, ns = 0, ns_rej = 0, nh = 0, nh_rej = 0;
  for (const auto& it : items) {
    const bool acc = it.gate_pass && it.top_prob > t && !is_scene_class(it.predicted);
    accepted += acc;
    if (it.group == synth::TestGroup::Event) {
      ++events;
      correct += acc && it.predicted == *it.truth;
    } else {
      ++nh;
      nh_rej += !acc;
      if (it.group == synth::TestGroup::NonSoccer) {
        ++ns;
        ns_rej += !acc;
      }
    }
  }
  OracleSweepRow r{};
  r.accepted = accepted;
  r.recall_nonsoccer = static_cast<double>(ns_rej) / static_cast<double>(ns);
  r.recall_nohighlight = static_cast<double>(nh_rej) / static_cast<double>(nh);
  if (accepted + events > 0) {
    if (correct == 0) {
      r.f1 = 0.0;
    } else {
      const double p = static_cast<double>(correct) / static_cast<double>(accepted);
      const double rc = static_cast<double>(correct) / static_cast<double>(events);
      r.f1 = 2 * p * rc / (p + rc);
    }
  }
  return r;
}

inline std::vector<metrics::SweepItem> random_sweep_items(Rng& rng, std::size_t n) {
  std::vector<metrics::SweepItem> items;
  for (std::size_t i = 0; i < n; ++i) {
    metrics::SweepItem it{};
    // The first three items cover every group.
    const std::size_t g = i < 3 ? i : uniform_index(rng, 3);
    it.group = static_cast<synth::TestGroup>(g);
    if (it.group == synth::TestGroup::Event) {
      const NineClass events[] = {NineClass::PenaltyKick, NineClass::CornerKick, NineClass::FreeKick,
                                  NineClass::Tackle, NineClass::ToSubstitute, NineClass::Card};
      it.truth = events[uniform_index(rng, 6)];
      it.predicted = uniform01(rng) < 0.6 ? *it.truth : kAllNineClasses[uniform_index(rng, kNumNineClasses)];
    } else {
      it.predicted = kAllNineClasses[uniform_index(rng, kNumNineClasses)];
    }
    it.gate_pass = uniform01(rng) < 0.8;
    // Coarse probabilities so some land exactly on thresholds.
    it.top_prob = static_cast<double>(1 + uniform_index(rng, 20)) / 20.0;
    items.push_back(it);
  }
  return items;
}

/// Returns an empty string when the library sweep matches the oracle rows, the
/// oracle argmax, and is monotone as the threshold decreases.
inline std::string compare_sweep(const std::vector<metrics::SweepItem>& items, const std::vector<double>& taus) {
  const auto report = metrics::threshold_sweep(items, taus);
  std::vector<double> sorted = taus;
  std::sort(sorted.rbegin(), sorted.rend());
  if (report.rows.size() != sorted.size()) return "row count";
  std::optional<std::size_t> best;
  double best_score = -1.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto& row = report.rows[i];
    const auto o = oracle_sweep_row(items, sorted[i]);
    if (row.threshold != sorted[i]) return "threshold order";
    if (!same(row.f1_event, o.f1)) return "f1 at row " + std::to_string(i);
    if (row.recall_nonsoccer != o.recall_nonsoccer || row.recall_nohighlight != o.recall_nohighlight) {
      return "recall at row " + std::to_string(i);
    }
    if (row.accepted_count != o.accepted) return "accepted count at row " + std::to_string(i);
    if (i > 0) {
      const auto& prev = report.rows[i - 1];
      if (row.accepted_count < prev.accepted_count) return "accepted count not monotone";
      if (row.recall_nonsoccer > prev.recall_nonsoccer) return "non-soccer recall not monotone";
      if (row.recall_nohighlight > prev.recall_nohighlight) return "no-highlight recall not monotone";
      if (row.counts.tp < prev.counts.tp) return "true positives not monotone";
    }
    if (o.f1 && *o.f1 + o.recall_nonsoccer > best_score + 1e-12) {
      best = i;
      best_score = *o.f1 + o.recall_nonsoccer;
    }
  }
  if (report.best != best) return "best row";
  return {};
}

}  // namespace sevdet::test
