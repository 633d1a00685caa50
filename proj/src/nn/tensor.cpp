#include "angie/nn/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "angie/errors.hpp"

namespace angie::nn {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t NumElements(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string ShapeString(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Buffer& Node::EnsureGrad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::Zeros(const Shape& shape, bool requires_grad) {
  return FromBuffer(shape, Buffer(NumElements(shape), 0.0), requires_grad);
}

Tensor Tensor::FromData(const Shape& shape, std::vector<double> data,
                        bool requires_grad) {
  return FromBuffer(shape, Buffer(data.begin(), data.end()), requires_grad);
}

Tensor Tensor::FromBuffer(const Shape& shape, Buffer data, bool requires_grad) {
  if (data.size() != NumElements(shape)) {
    throw ValidationError("tensor data size " + std::to_string(data.size()) +
                          " does not match shape " + ShapeString(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::Scalar(double v) { return FromData({1}, {v}); }

int Tensor::dim(int i) const {
  if (i < 0) i += rank();
  return node_->shape.at(static_cast<std::size_t>(i));
}

std::span<double> Tensor::grad() { return node_->EnsureGrad(); }

double Tensor::item() const {
  if (numel() != 1) {
    throw ValidationError("item() on tensor of shape " + ShapeString(shape()));
  }
  return node_->value[0];
}

ConstMatMap Tensor::matrix() const {
  const int cols = shape().empty() ? 1 : shape().back();
  const auto rows = static_cast<Eigen::Index>(numel() / std::max(cols, 1));
  return ConstMatMap(node_->value.data(), rows, cols);
}

MatMap Tensor::mutable_matrix() {
  const int cols = shape().empty() ? 1 : shape().back();
  const auto rows = static_cast<Eigen::Index>(numel() / std::max(cols, 1));
  return MatMap(node_->value.data(), rows, cols);
}

void Tensor::ZeroGrad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::Backward() {
  if (numel() != 1) {
    throw ValidationError("Backward() requires a scalar, got " +
                          ShapeString(shape()));
  }
  // Iterative post-order DFS so deep recurrent graphs do not blow the stack.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  node_->EnsureGrad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

Tensor MakeResult(const Shape& shape, Buffer value,
                  std::vector<Tensor> inputs,
                  std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

bool GradEnabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace angie::nn
