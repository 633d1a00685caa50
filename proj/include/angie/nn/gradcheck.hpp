#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "angie/nn/params.hpp"

namespace angie::nn {

struct GradCheckResult {
  std::string name;
  double relative_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double analytic_norm = 0.0;
  std::size_t checked = 0;
};

// Compares reverse-mode gradients of `loss` with central differences of step
// `step` for every listed leaf tensor. At most `max_entries` coordinates per
// tensor are probed (evenly strided) to bound runtime.
std::vector<GradCheckResult> CheckGradients(
    const std::vector<std::pair<std::string, Tensor>>& leaves,
    const std::function<Tensor()>& loss, double step = 1e-3,
    std::size_t max_entries = 64);

// Convenience overload probing every trainable tensor of `params`.
std::vector<GradCheckResult> CheckGradients(ParameterSet& params,
                                            const std::function<Tensor()>& loss,
                                            double step = 1e-3,
                                            std::size_t max_entries = 64);

double MaxRelativeError(const std::vector<GradCheckResult>& results);

}  // namespace angie::nn
