#include "sevdet/metrics/metrics.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <numeric>

#include "sevdet/error.hpp"

namespace sevdet::metrics {

namespace {

std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::string fmt(const char* spec, double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string fmt_opt(const char* spec, const std::optional<double>& v, const char* missing) {
  return v ? fmt(spec, *v) : std::string(missing);
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

void check_names(const ConfusionMatrix& m, std::span<const std::string> names) {
  if (names.size() != m.size()) throw InvalidArgument("confusion report: class name count differs from K");
}

}  // namespace

double accuracy(const ConfusionCounts& c) {
  if (c.total() == 0) throw InvalidArgument("accuracy: all counts are zero");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

std::optional<double> precision(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fp); }

std::optional<double> recall(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fn); }

std::optional<double> f1(const ConfusionCounts& c) {
  const std::uint64_t den = 2 * c.tp + c.fp + c.fn;
  if (den == 0) return std::nullopt;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(den);
}

ConfusionCounts binary_counts(std::span<const bool> truth, std::span<const bool> predicted) {
  if (truth.size() != predicted.size()) throw InvalidArgument("binary_counts: length mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i]) {
      ++(predicted[i] ? c.tp : c.fn);
    } else {
      ++(predicted[i] ? c.fp : c.tn);
    }
  }
  return c;
}

ConfusionMatrix::ConfusionMatrix(std::size_t k) : k_(k), counts_(k * k, 0) {
  if (k == 0) throw InvalidArgument("ConfusionMatrix: K must be positive");
}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted) {
  if (truth >= k_ || predicted >= k_) throw InvalidArgument("ConfusionMatrix: label out of range");
  ++counts_[truth * k_ + predicted];
}

std::uint64_t ConfusionMatrix::at(std::size_t truth, std::size_t predicted) const {
  if (truth >= k_ || predicted >= k_) throw InvalidArgument("ConfusionMatrix: label out of range");
  return counts_[truth * k_ + predicted];
}

std::uint64_t ConfusionMatrix::support(std::size_t truth) const {
  if (truth >= k_) throw InvalidArgument("ConfusionMatrix: label out of range");
  const auto row = counts_.begin() + static_cast<std::ptrdiff_t>(truth * k_);
  return std::accumulate(row, row + static_cast<std::ptrdiff_t>(k_), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::vector<double> ConfusionMatrix::normalized() const {
  std::vector<double> out(k_ * k_, 0.0);
  for (std::size_t i = 0; i < k_; ++i) {
    const std::uint64_t n = support(i);
    if (n == 0) continue;
    for (std::size_t j = 0; j < k_; ++j) {
      out[i * k_ + j] = static_cast<double>(counts_[i * k_ + j]) / static_cast<double>(n);
    }
  }
  return out;
}

ConfusionCounts ConfusionMatrix::one_vs_rest(std::size_t c) const {
  if (c >= k_) throw InvalidArgument("ConfusionMatrix: label out of range");
  ConfusionCounts out;
  for (std::size_t i = 0; i < k_; ++i) {
    for (std::size_t j = 0; j < k_; ++j) {
      const std::uint64_t n = counts_[i * k_ + j];
      if (i == c && j == c) {
        out.tp += n;
      } else if (i == c) {
        out.fn += n;
      } else if (j == c) {
        out.fp += n;
      } else {
        out.tn += n;
      }
    }
  }
  return out;
}

ConfusionMatrix confusion_counts(std::span<const std::size_t> truth,
                                 std::span<const std::size_t> predicted, std::size_t k) {
  if (truth.size() != predicted.size()) throw InvalidArgument("confusion_matrix: length mismatch");
  ConfusionMatrix m(k);
  for (std::size_t i = 0; i < truth.size(); ++i) m.add(truth[i], predicted[i]);
  return m;
}

std::vector<double> confusion_matrix(std::span<const std::size_t> truth,
                                     std::span<const std::size_t> predicted, std::size_t k) {
  return confusion_counts(truth, predicted, k).normalized();
}

std::vector<ClassReport> per_class(const ConfusionMatrix& m) {
  std::vector<ClassReport> out;
  for (std::size_t c = 0; c < m.size(); ++c) {
    const ConfusionCounts cc = m.one_vs_rest(c);
    out.push_back({precision(cc), recall(cc), f1(cc), cc.positives()});
  }
  return out;
}

std::optional<double> macro_f1(const ConfusionMatrix& m) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const ClassReport& r : per_class(m)) {
    if (!r.f1) continue;
    sum += *r.f1;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

bool sweep_accepts(const SweepItem& item, double threshold) {
  return item.gate_pass && item.top_prob > threshold && !is_scene_class(item.predicted);
}

SweepReport threshold_sweep(std::span<const SweepItem> items, std::span<const double> thresholds) {
  std::array<std::size_t, 3> group_size{0, 0, 0};
  for (const SweepItem& it : items) {
    ++group_size[static_cast<std::size_t>(it.group)];
    if (it.group == synth::TestGroup::Event && !it.truth) {
      throw InvalidArgument("threshold_sweep: event item without a true class");
    }
  }
  constexpr std::array<const char*, 3> kGroupNames{"event", "other-soccer", "non-soccer"};
  for (std::size_t g = 0; g < 3; ++g) {
    if (group_size[g] == 0) {
      throw InvalidArgument(std::string("threshold_sweep: no ") + kGroupNames[g] + " items");
    }
  }
  std::vector<double> ts(thresholds.begin(), thresholds.end());
  if (ts.empty()) throw InvalidArgument("threshold_sweep: no thresholds");
  for (double t : ts) {
    if (!(t >= 0.0 && t < 1.0)) throw InvalidArgument("threshold_sweep: thresholds must lie in [0,1)");
  }
  std::sort(ts.begin(), ts.end(), std::greater<>());
  if (std::adjacent_find(ts.begin(), ts.end()) != ts.end()) {
    throw InvalidArgument("threshold_sweep: duplicate threshold");
  }

  const std::size_t nonsoccer = group_size[static_cast<std::size_t>(synth::TestGroup::NonSoccer)];
  const std::size_t nohighlight =
      nonsoccer + group_size[static_cast<std::size_t>(synth::TestGroup::OtherSoccer)];
  SweepReport report;
  std::vector<std::size_t> rejected_ns;
  for (double t : ts) {
    SweepRow row{t, {}, std::nullopt, 0.0, 0.0, 0};
    std::size_t rejected_nonsoccer = 0;
    std::size_t rejected_nohighlight = 0;
    for (const SweepItem& it : items) {
      const bool accepted = sweep_accepts(it, t);
      row.accepted_count += accepted;
      if (it.group == synth::TestGroup::Event) {
        if (!accepted) {
          ++row.counts.fn;
        } else if (it.predicted == *it.truth) {
          ++row.counts.tp;
        } else {
          ++row.counts.fp;
          ++row.counts.fn;
        }
      } else {
        ++(accepted ? row.counts.fp : row.counts.tn);
        rejected_nohighlight += !accepted;
        if (it.group == synth::TestGroup::NonSoccer) rejected_nonsoccer += !accepted;
      }
    }
    row.f1_event = f1(row.counts);
    row.recall_nonsoccer = static_cast<double>(rejected_nonsoccer) / static_cast<double>(nonsoccer);
    row.recall_nohighlight = static_cast<double>(rejected_nohighlight) / static_cast<double>(nohighlight);
    report.rows.push_back(row);
    rejected_ns.push_back(rejected_nonsoccer);
  }
  // Scores are compared as exact fractions so that ties, which are common with
  // small counts, resolve to the first row rather than to rounding noise.
  // F1 + r/ns = (2tp*ns + r*d) / (d*ns) with d = 2tp + fp + fn; ns is shared.
  __extension__ using Wide = unsigned __int128;
  const auto numerator = [&](std::size_t i) {
    const ConfusionCounts& c = report.rows[i].counts;
    return Wide{2 * c.tp} * nonsoccer + Wide{rejected_ns[i]} * (2 * c.tp + c.fp + c.fn);
  };
  const auto denominator = [&](std::size_t i) {
    const ConfusionCounts& c = report.rows[i].counts;
    return Wide{2 * c.tp + c.fp + c.fn};
  };
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    if (!report.rows[i].f1_event) continue;
    if (!report.best || numerator(i) * denominator(*report.best) > numerator(*report.best) * denominator(i)) {
      report.best = i;
    }
  }
  return report;
}

void write_sweep_table(std::ostream& os, const SweepReport& report) {
  os << "threshold  F1(event)  recall(non-soccer)  recall(no-highlight)  accepted\n";
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const SweepRow& r = report.rows[i];
    const std::string f1_text = r.f1_event ? fmt("%.2f", *r.f1_event * 100) : "-";
    os << pad(fmt("%.4f", r.threshold), 9) << pad(f1_text, 11)
       << pad(fmt("%.2f", r.recall_nonsoccer * 100), 20) << pad(fmt("%.2f", r.recall_nohighlight * 100), 22)
       << pad(std::to_string(r.accepted_count), 10) << (report.best == i ? "  <- best" : "") << '\n';
  }
}

void write_sweep_csv(std::ostream& os, const SweepReport& report) {
  os << "threshold,f1_event,recall_nonsoccer,recall_nohighlight,accepted_count,tp,fp,fn,tn,best\n";
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const SweepRow& r = report.rows[i];
    os << fmt("%.6f", r.threshold) << ',' << fmt_opt("%.9f", r.f1_event, "") << ','
       << fmt("%.9f", r.recall_nonsoccer) << ',' << fmt("%.9f", r.recall_nohighlight) << ','
       << r.accepted_count << ',' << r.counts.tp << ',' << r.counts.fp << ',' << r.counts.fn << ','
       << r.counts.tn << ',' << (report.best == i ? 1 : 0) << '\n';
  }
}

void write_confusion_table(std::ostream& os, const ConfusionMatrix& m,
                           std::span<const std::string> class_names) {
  check_names(m, class_names);
  std::size_t width = 6;
  for (const auto& n : class_names) width = std::max(width, n.size());
  const std::vector<double> norm = m.normalized();
  os << std::string(width, ' ');
  for (const auto& n : class_names) os << ' ' << pad(n, width);
  os << '\n';
  for (std::size_t i = 0; i < m.size(); ++i) {
    os << pad(class_names[i], width);
    for (std::size_t j = 0; j < m.size(); ++j) os << ' ' << pad(fmt("%.3f", norm[i * m.size() + j]), width);
    os << '\n';
  }
}

void write_confusion_csv(std::ostream& os, const ConfusionMatrix& m,
                         std::span<const std::string> class_names) {
  check_names(m, class_names);
  const std::vector<double> norm = m.normalized();
  os << "truth";
  for (const auto& n : class_names) os << ',' << n;
  os << ",support\n";
  for (std::size_t i = 0; i < m.size(); ++i) {
    os << class_names[i];
    for (std::size_t j = 0; j < m.size(); ++j) os << ',' << fmt("%.9f", norm[i * m.size() + j]);
    os << ',' << m.support(i) << '\n';
  }
}

void write_class_report(std::ostream& os, const ConfusionMatrix& m,
                        std::span<const std::string> class_names) {
  check_names(m, class_names);
  std::size_t width = 5;
  for (const auto& n : class_names) width = std::max(width, n.size());
  os << pad("class", width) << "  precision     recall         f1  support\n";
  const auto reports = per_class(m);
  for (std::size_t c = 0; c < reports.size(); ++c) {
    const ClassReport& r = reports[c];
    os << pad(class_names[c], width) << pad(fmt_opt("%.4f", r.precision, "-"), 11)
       << pad(fmt_opt("%.4f", r.recall, "-"), 11) << pad(fmt_opt("%.4f", r.f1, "-"), 11)
       << pad(std::to_string(r.support), 9) << '\n';
  }
  const std::uint64_t total = m.total();
  std::uint64_t diag = 0;
  for (std::size_t c = 0; c < m.size(); ++c) diag += m.at(c, c);
  os << "accuracy " << fmt_opt("%.4f", ratio(diag, total), "-") << "  macro-F1 "
     << fmt_opt("%.4f", macro_f1(m), "-") << '\n';
}

void write_curves_csv(std::ostream& os,
                      std::span<const std::pair<std::string, std::vector<double>>> series) {
  std::size_t rows = 0;
  os << "epoch";
  for (const auto& [name, values] : series) {
    os << ',' << name;
    rows = std::max(rows, values.size());
  }
  os << '\n';
  for (std::size_t e = 0; e < rows; ++e) {
    os << e + 1;
    for (const auto& s : series) {
      os << ',';
      if (e < s.second.size()) os << fmt("%.9g", s.second[e]);
    }
    os << '\n';
  }
}

}  // namespace sevdet::metrics
