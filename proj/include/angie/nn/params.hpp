#pragma once

#include <map>
#include <random>
#include <string>

#include "angie/nn/tensor.hpp"

namespace angie::nn {

// Named parameters of a model. Trainable entries receive gradients and are
// updated by the optimizer; buffers (normalization statistics and the like)
// are persisted with the checkpoint but never optimized.
class ParameterSet {
 public:
  Tensor& Add(const std::string& name, const Shape& shape, bool trainable = true);
  Tensor& Get(const std::string& name);
  const Tensor& Get(const std::string& name) const;
  bool Contains(const std::string& name) const { return entries_.count(name) > 0; }
  bool IsTrainable(const std::string& name) const;

  void ZeroGrad();
  std::size_t TotalSize() const;

  void InitNormal(const std::string& name, double stddev, std::mt19937_64& rng);
  void InitUniform(const std::string& name, double bound, std::mt19937_64& rng);
  void Fill(const std::string& name, double value);

  // Entries in deterministic (lexicographic) order.
  const std::map<std::string, Tensor>& entries() const { return entries_; }
  std::map<std::string, Tensor>& entries() { return entries_; }

 private:
  std::map<std::string, Tensor> entries_;
  std::map<std::string, bool> trainable_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; <= 0 disables.
  double clip_norm = 1.0;
};

class Adam {
 public:
  Adam(ParameterSet& params, AdamOptions options);
  // Applies one update from the accumulated grads, then clears them.
  // Returns the pre-clip global gradient norm.
  double Step();
  long steps() const { return t_; }

 private:
  ParameterSet& params_;
  AdamOptions options_;
  std::map<std::string, std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace angie::nn
