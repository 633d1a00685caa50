#pragma once

#include <random>
#include <span>
#include <vector>

#include "angie/nn/tensor.hpp"

// Differentiable operations over angie::nn::Tensor. Sequence tensors are laid
// out as [batch, time, channels]; image tensors as [batch, height, width,
// channels]. Convolution weights are stored in im2col order:
// [kernel_positions * in_channels, out_channels].
namespace angie::nn {

Tensor Add(const Tensor& a, const Tensor& b);
Tensor Sub(const Tensor& a, const Tensor& b);
Tensor Mul(const Tensor& a, const Tensor& b);
Tensor Scale(const Tensor& a, double s);
// Multiplies every element of `a` by the single element of `s`.
Tensor ScaleBy(const Tensor& a, const Tensor& s);

Tensor Relu(const Tensor& a);
Tensor Tanh(const Tensor& a);
Tensor Sigmoid(const Tensor& a);
Tensor Gelu(const Tensor& a);
Tensor ClampMin(const Tensor& a, double lo);

Tensor Reshape(const Tensor& a, const Shape& shape);
Tensor Detach(const Tensor& a);
// Forward value of `quantized`, gradient routed to `latent` unchanged.
Tensor StraightThrough(const Tensor& latent, const Tensor& quantized);

Tensor MatMul(const Tensor& a, const Tensor& b);
// x: [..., in] treated as rows; weight: [in, out]; bias: [out] or undefined.
Tensor Linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Concatenation / slicing along dimension 0.
Tensor ConcatRows(const std::vector<Tensor>& parts);
Tensor SliceRows(const Tensor& a, int start, int count);
// Concatenation / slicing along the last dimension.
Tensor ConcatCols(const std::vector<Tensor>& parts);
Tensor SliceCols(const Tensor& a, int start, int count);

Tensor Embedding(const Tensor& table, std::span<const int> indices);
Tensor LayerNorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps = 1e-5);

// Multi-head scaled dot-product attention. q, k, v: [batch * n, channels].
// `mask` is an n x n additive mask (0 allowed, -inf blocked).
Tensor MaskedAttention(const Tensor& q, const Tensor& k, const Tensor& v,
                       int batch, int heads, const RowMat& mask);

Tensor Dropout(const Tensor& a, double p, std::mt19937_64& rng);

// Mean cross-entropy of row-wise softmax(logits) against class targets.
Tensor SoftmaxCrossEntropy(const Tensor& logits, std::span<const int> targets);

Tensor Conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int kernel, int stride, int pad);
Tensor Upsample1d(const Tensor& x, int factor);
Tensor Conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int kernel, int stride, int pad);
Tensor MaxPool2d(const Tensor& x, int kernel, int stride_h, int stride_w);

Tensor Sum(const Tensor& a);
Tensor Mean(const Tensor& a);
Tensor SumSquares(const Tensor& a);
Tensor MseLoss(const Tensor& prediction, const Tensor& target);

// Row-wise softmax without graph tracking.
RowMat Softmax(const RowMat& logits);

}  // namespace angie::nn
