#include "angie/nn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace angie::nn {

std::vector<GradCheckResult> CheckGradients(
    const std::vector<std::pair<std::string, Tensor>>& leaves,
    const std::function<Tensor()>& loss, double step, std::size_t max_entries) {
  for (auto [name, t] : leaves) t.ZeroGrad();
  Tensor l = loss();
  l.Backward();
  std::vector<std::vector<double>> analytic;
  for (auto [name, t] : leaves) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  std::vector<GradCheckResult> results;
  NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor t = leaves[li].second;
    auto values = t.mutable_data();
    const std::size_t n = values.size();
    const std::size_t stride = std::max<std::size_t>(1, n / max_entries);
    double diff_sq = 0.0, a_sq = 0.0, n_sq = 0.0;
    std::size_t checked = 0;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = loss().item();
      values[i] = saved - step;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[li][i];
      diff_sq += (a - numeric) * (a - numeric);
      a_sq += a * a;
      n_sq += numeric * numeric;
      ++checked;
    }
    const double denom = std::max(std::sqrt(std::max(a_sq, n_sq)), 1e-12);
    results.push_back({leaves[li].first, std::sqrt(diff_sq) / denom, std::sqrt(a_sq),
                       checked});
  }
  return results;
}

std::vector<GradCheckResult> CheckGradients(ParameterSet& params,
                                            const std::function<Tensor()>& loss,
                                            double step, std::size_t max_entries) {
  std::vector<std::pair<std::string, Tensor>> leaves;
  for (auto& [name, t] : params.entries()) {
    if (params.IsTrainable(name)) leaves.emplace_back(name, t);
  }
  return CheckGradients(leaves, loss, step, max_entries);
}

double MaxRelativeError(const std::vector<GradCheckResult>& results) {
  double worst = 0.0;
  for (const auto& r : results) worst = std::max(worst, r.relative_error);
  return worst;
}

}  // namespace angie::nn
