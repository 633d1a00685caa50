#pragma once

#include <cstdlib>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace angie::nn {

using Shape = std::vector<int>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// Tensor storage is 64-byte aligned so Eigen's vectorized reductions split
// every buffer the same way and results are bitwise reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    const std::size_t bytes = (n * sizeof(T) + kAlign - 1) / kAlign * kAlign;
    void* p = std::aligned_alloc(kAlign, bytes == 0 ? kAlign : bytes);
    if (p == nullptr) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) { std::free(p); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};
using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t NumElements(const Shape& shape);
std::string ShapeString(const Shape& shape);

// A node of the dynamic reverse-mode graph. Values and gradients are dense
// row-major buffers; `backward` reads this node's grad and accumulates into
// the grads of `parents`.
struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Buffer& EnsureGrad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor Zeros(const Shape& shape, bool requires_grad = false);
  static Tensor FromData(const Shape& shape, std::vector<double> data,
                         bool requires_grad = false);
  static Tensor FromBuffer(const Shape& shape, Buffer data, bool requires_grad = false);
  static Tensor Scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  std::span<double> grad();
  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }

  // Views the value as rows x cols with cols = last dimension.
  ConstMatMap matrix() const;
  MatMap mutable_matrix();

  void ZeroGrad();
  // Seeds d(this)/d(this) = 1 for a scalar and propagates to every leaf.
  void Backward();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Builds a result node wired to `inputs`. The backward closure is only kept
// when at least one input needs a gradient and grad mode is enabled.
Tensor MakeResult(const Shape& shape, Buffer value,
                  std::vector<Tensor> inputs,
                  std::function<void(Node&)> backward);

bool GradEnabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace angie::nn
