#include "angie/nn/params.hpp"

#include <cmath>

#include "angie/errors.hpp"

namespace angie::nn {

Tensor& ParameterSet::Add(const std::string& name, const Shape& shape,
                          bool trainable) {
  if (entries_.count(name)) throw ValidationError("duplicate parameter " + name);
  trainable_[name] = trainable;
  return entries_[name] = Tensor::Zeros(shape, trainable);
}

Tensor& ParameterSet::Get(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ValidationError("unknown parameter " + name);
  return it->second;
}

const Tensor& ParameterSet::Get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ValidationError("unknown parameter " + name);
  return it->second;
}

bool ParameterSet::IsTrainable(const std::string& name) const {
  auto it = trainable_.find(name);
  return it != trainable_.end() && it->second;
}

void ParameterSet::ZeroGrad() {
  for (auto& [name, t] : entries_) t.ZeroGrad();
}

std::size_t ParameterSet::TotalSize() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void ParameterSet::InitNormal(const std::string& name, double stddev,
                              std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : Get(name).mutable_data()) v = dist(rng);
}

void ParameterSet::InitUniform(const std::string& name, double bound,
                               std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : Get(name).mutable_data()) v = dist(rng);
}

void ParameterSet::Fill(const std::string& name, double value) {
  for (double& v : Get(name).mutable_data()) v = value;
}

Adam::Adam(ParameterSet& params, AdamOptions options)
    : params_(params), options_(options) {}

double Adam::Step() {
  ++t_;
  double sq = 0.0;
  for (auto& [name, p] : params_.entries()) {
    if (!params_.IsTrainable(name)) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    throw NumericalError("non-finite gradient norm at optimizer step " +
                         std::to_string(t_));
  }
  const double clip =
      (options_.clip_norm > 0.0 && norm > options_.clip_norm) ? options_.clip_norm / norm : 1.0;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params_.entries()) {
    if (!params_.IsTrainable(name)) continue;
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.size() != p.numel()) {
      m.assign(p.numel(), 0.0);
      v.assign(p.numel(), 0.0);
    }
    auto value = p.mutable_data();
    auto grad = p.grad();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i] * clip;
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g;
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g * g;
      value[i] -= options_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + options_.eps);
      grad[i] = 0.0;
    }
  }
  return norm;
}

}  // namespace angie::nn
