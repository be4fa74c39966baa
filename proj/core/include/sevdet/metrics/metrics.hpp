#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sevdet/classifier/labels.hpp"
#include "sevdet/synth/synth.hpp"

namespace sevdet::metrics {

/// Binary view: P = tp + fn, N = tn + fp.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t positives() const { return tp + fn; }
  std::uint64_t negatives() const { return tn + fp; }
  std::uint64_t total() const { return tp + tn + fp + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Throws InvalidArgument on all-zero counts.
double accuracy(const ConfusionCounts& c);
/// Zero denominators give nullopt, never 0.
std::optional<double> precision(const ConfusionCounts& c);
std::optional<double> recall(const ConfusionCounts& c);
/// tp / (tp + (fp + fn) / 2).
std::optional<double> f1(const ConfusionCounts& c);

ConfusionCounts binary_counts(std::span<const bool> truth, std::span<const bool> predicted);

/// K x K counts, row = true class, column = predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t k);

  std::size_t size() const { return k_; }
  void add(std::size_t truth, std::size_t predicted);
  std::uint64_t at(std::size_t truth, std::size_t predicted) const;
  std::uint64_t support(std::size_t truth) const;
  std::uint64_t total() const;

  /// Row-normalized; rows of absent classes are all zero.
  std::vector<double> normalized() const;
  /// Class `c` against the rest.
  ConfusionCounts one_vs_rest(std::size_t c) const;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

/// Throws InvalidArgument on length mismatch or labels >= k.
ConfusionMatrix confusion_counts(std::span<const std::size_t> truth,
                                 std::span<const std::size_t> predicted, std::size_t k);
/// Row-normalized K x K matrix, row-major.
std::vector<double> confusion_matrix(std::span<const std::size_t> truth,
                                     std::span<const std::size_t> predicted, std::size_t k);

struct ClassReport {
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
  std::uint64_t support = 0;
};

std::vector<ClassReport> per_class(const ConfusionMatrix& m);
/// Mean of the defined per-class F1 values; nullopt if none is defined.
std::optional<double> macro_f1(const ConfusionMatrix& m);

/// One labelled test image as seen by the gate and the 9-class classifier.
struct SweepItem {
  synth::TestGroup group;
  std::optional<NineClass> truth;  ///< required for Event items
  bool gate_pass = true;
  NineClass predicted;
  double top_prob;
};

/// Accepted iff the gate passed, top_prob > threshold and the top class is
/// not a scene class.
bool sweep_accepts(const SweepItem& item, double threshold);

struct SweepRow {
  double threshold;
  /// Micro view over event classes: a correct accept is a TP, a wrong-class
  /// accept is both FP and FN, an accepted no-highlight image is an FP.
  ConfusionCounts counts;
  std::optional<double> f1_event;
  double recall_nonsoccer;    ///< non-soccer images rejected
  double recall_nohighlight;  ///< other-soccer and non-soccer images rejected
  std::size_t accepted_count;
};

struct SweepReport {
  std::vector<SweepRow> rows;  ///< thresholds strictly decreasing
  /// Row maximizing f1_event + recall_nonsoccer (first on ties); rows with
  /// undefined F1 are skipped.
  std::optional<std::size_t> best;
};

/// Thresholds must be distinct and in [0,1); any order. Throws if any of the
/// three groups is missing or an Event item lacks its truth.
SweepReport threshold_sweep(std::span<const SweepItem> items, std::span<const double> thresholds);

// Report writers. Undefined metrics print as "-" in text and empty in CSV.
void write_sweep_table(std::ostream& os, const SweepReport& report);
void write_sweep_csv(std::ostream& os, const SweepReport& report);
void write_confusion_table(std::ostream& os, const ConfusionMatrix& m,
                           std::span<const std::string> class_names);
void write_confusion_csv(std::ostream& os, const ConfusionMatrix& m,
                         std::span<const std::string> class_names);
void write_class_report(std::ostream& os, const ConfusionMatrix& m,
                        std::span<const std::string> class_names);
/// Plot-ready curves: `epoch,<name>...`, one row per epoch (1-based). Shorter
/// series leave trailing cells empty.
void write_curves_csv(std::ostream& os,
                      std::span<const std::pair<std::string, std::vector<double>>> series);

}  // namespace sevdet::metrics
