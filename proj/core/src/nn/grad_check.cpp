#include "sevdet/nn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sevdet/error.hpp"
#include "sevdet/random.hpp"

namespace sevdet::nn {

GradCheckReport grad_check(const std::function<double()>& loss,
                           std::vector<GradProbe>& probes, const GradCheckOptions& opts) {
  GradCheckReport report;
  Rng rng(derive_seed(opts.seed, 0x67726164));
  for (auto& probe : probes) {
    if (probe.tensor == nullptr || probe.analytic.size() != probe.tensor->size()) {
      throw InvalidArgument("grad_check: probe '" + probe.label + "' has mismatched gradient");
    }
    const std::size_t n = probe.tensor->size();
    const std::size_t count = std::min(opts.coords_per_probe, n);
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    // Partial Fisher-Yates: first `count` entries become a uniform sample.
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t j = i + uniform_index(rng, n - i);
      std::swap(coords[i], coords[j]);
    }
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t idx = coords[c];
      double& x = (*probe.tensor)[idx];
      const double saved = x;
      x = saved + opts.step;
      const double up = loss();
      x = saved - opts.step;
      const double down = loss();
      x = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double analytic = probe.analytic[idx];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_error || report.worst.empty()) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        std::ostringstream os;
        os.precision(10);
        os << probe.label << '[' << idx << "] analytic=" << analytic << " numeric=" << numeric;
        report.worst = os.str();
      }
    }
  }
  report.passed = report.max_rel_error < opts.tolerance;
  return report;
}

}  // namespace sevdet::nn
