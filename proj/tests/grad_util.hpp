#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sevdet/nn/grad_check.hpp"
#include "sevdet/nn/tensor.hpp"

namespace sevdet::test {

struct ModelGradReport {
  nn::GradCheckReport live;
  nn::GradCheckReport dead;
  std::size_t live_tensors = 0;
  std::size_t dead_tensors = 0;

  bool passed(double tolerance = 1e-4) const {
    return live.max_rel_error < tolerance && dead.max_rel_error < tolerance && live_tensors > 0;
  }
  std::string worst() const { return live.worst + " | " + dead.worst; }
};

/// Grad-checks every tensor of `params` against the gradients already
/// accumulated in them. Conv biases ahead of BatchNorm are cancelled by the
/// mean subtraction and have exactly zero gradient; such tensors are checked
/// with a 1e-3 floor, which bounds their numeric derivative by 1e-7 at the
/// default tolerance instead of comparing roundoff against zero.
inline ModelGradReport check_model_gradients(const std::function<double()>& loss,
                                             const std::vector<nn::Tensor*>& params,
                                             std::uint64_t seed, std::size_t coords = 4) {
  std::vector<nn::GradProbe> live, dead;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = params[i]->grad();
    const bool zero = std::all_of(g.begin(), g.end(), [](double v) { return std::abs(v) < 1e-12; });
    (zero ? dead : live).push_back({"param" + std::to_string(i), params[i], {g.begin(), g.end()}});
  }
  ModelGradReport r;
  r.live_tensors = live.size();
  r.dead_tensors = dead.size();
  nn::GradCheckOptions opts;
  opts.coords_per_probe = coords;
  opts.seed = seed;
  r.live = nn::grad_check(loss, live, opts);
  opts.floor = 1e-3;
  r.dead = nn::grad_check(loss, dead, opts);
  return r;
}

}  // namespace sevdet::test
