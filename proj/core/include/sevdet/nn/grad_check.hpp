#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sevdet/nn/tensor.hpp"

namespace sevdet::nn {

/// A tensor whose entries are perturbed, paired with the reverse-mode
/// gradient computed for it beforehand.
struct GradProbe {
  std::string label;
  Tensor* tensor = nullptr;
  std::vector<double> analytic;
};

struct GradCheckOptions {
  std::size_t coords_per_probe = 8;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor: rel = |a - n| / max(|a|, |n|, floor).
  double floor = 1e-8;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  bool passed = true;
  std::string worst;  // "<label>[index] analytic=... numeric=..."
};

/// Compares analytic gradients to central finite differences
/// (f(x+h) - f(x-h)) / 2h on randomly sampled coordinates of each probe.
/// `loss` must recompute the scalar from the current tensor values.
GradCheckReport grad_check(const std::function<double()>& loss,
                           std::vector<GradProbe>& probes, const GradCheckOptions& opts = {});

}  // namespace sevdet::nn
