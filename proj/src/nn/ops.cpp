#include "angie/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "angie/errors.hpp"

namespace angie::nn {

namespace {

void CheckSameSize(const Tensor& a, const Tensor& b, const char* op) {
  if (a.numel() != b.numel()) {
    throw ValidationError(std::string(op) + ": size mismatch " +
                          ShapeString(a.shape()) + " vs " +
                          ShapeString(b.shape()));
  }
}

// Grad buffer of parent `i`, or nullptr when it does not need one.
double* ParentGrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return p.EnsureGrad().data();
}

template <typename Fwd, typename Deriv>
Tensor Unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  Buffer out(a.numel());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return MakeResult(a.shape(), std::move(out), {a}, [deriv](Node& self) {
    double* g = ParentGrad(self, 0);
    if (!g) return;
    const auto& x = self.parents[0]->value;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      g[i] += self.grad[i] * deriv(x[i], self.value[i]);
    }
  });
}

constexpr std::size_t kIm2colBudget = 1u << 22;

}  // namespace

Tensor Add(const Tensor& a, const Tensor& b) {
  CheckSameSize(a, b, "Add");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return MakeResult(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (double* g = ParentGrad(self, p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor Sub(const Tensor& a, const Tensor& b) {
  CheckSameSize(a, b, "Sub");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return MakeResult(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = ParentGrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = ParentGrad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor Mul(const Tensor& a, const Tensor& b) {
  CheckSameSize(a, b, "Mul");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return MakeResult(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& x = self.parents[0]->value;
    const auto& y = self.parents[1]->value;
    if (double* g = ParentGrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (double* g = ParentGrad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

Tensor Scale(const Tensor& a, double s) {
  return Unary(a, [s](double x) { return s * x; },
               [s](double, double) { return s; });
}

Tensor ScaleBy(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw ValidationError("ScaleBy: scale must be a scalar");
  const double k = s[0];
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * a[i];
  return MakeResult(a.shape(), std::move(out), {a, s}, [k](Node& self) {
    if (double* g = ParentGrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += k * self.grad[i];
    }
    if (double* g = ParentGrad(self, 1)) {
      const auto& x = self.parents[0]->value;
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * x[i];
      g[0] += acc;
    }
  });
}

Tensor Relu(const Tensor& a) {
  return Unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor Tanh(const Tensor& a) {
  return Unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor Sigmoid(const Tensor& a) {
  return Unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor Gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  return Unary(
      a,
      [](double x) {
        return 0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x)));
      },
      [](double x, double) {
        const double u = kC * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Tensor ClampMin(const Tensor& a, double lo) {
  return Unary(a, [lo](double x) { return x > lo ? x : lo; },
               [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Tensor Reshape(const Tensor& a, const Shape& shape) {
  if (NumElements(shape) != a.numel()) {
    throw ValidationError("Reshape: cannot view " + ShapeString(a.shape()) +
                          " as " + ShapeString(shape));
  }
  Buffer out(a.data().begin(), a.data().end());
  return MakeResult(shape, std::move(out), {a}, [](Node& self) {
    if (double* g = ParentGrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor Detach(const Tensor& a) {
  return Tensor::FromBuffer(a.shape(),
                          Buffer(a.data().begin(), a.data().end()));
}

Tensor StraightThrough(const Tensor& latent, const Tensor& quantized) {
  CheckSameSize(latent, quantized, "StraightThrough");
  Buffer out(quantized.data().begin(), quantized.data().end());
  return MakeResult(latent.shape(), std::move(out), {latent}, [](Node& self) {
    if (double* g = ParentGrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor MatMul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ValidationError("MatMul: incompatible " + ShapeString(a.shape()) +
                          " x " + ShapeString(b.shape()));
  }
  const int n = a.dim(0), m = b.dim(1);
  Buffer out(static_cast<std::size_t>(n) * m);
  MatMap(out.data(), n, m).noalias() = a.matrix() * b.matrix();
  return MakeResult({n, m}, std::move(out), {a, b}, [n, m](Node& self) {
    const Node& pa = *self.parents[0];
    const Node& pb = *self.parents[1];
    const int k = pa.shape[1];
    ConstMatMap dy(self.grad.data(), n, m);
    if (double* g = ParentGrad(self, 0)) {
      MatMap(g, n, k).noalias() += dy * ConstMatMap(pb.value.data(), k, m).transpose();
    }
    if (double* g = ParentGrad(self, 1)) {
      MatMap(g, k, m).noalias() += ConstMatMap(pa.value.data(), n, k).transpose() * dy;
    }
  });
}

Tensor Linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const int in = weight.dim(0), out_dim = weight.dim(1);
  if (x.shape().back() != in) {
    throw ValidationError("Linear: input " + ShapeString(x.shape()) +
                          " incompatible with weight " +
                          ShapeString(weight.shape()));
  }
  if (bias.defined() && static_cast<int>(bias.numel()) != out_dim) {
    throw ValidationError("Linear: bias size mismatch");
  }
  const auto rows = static_cast<Eigen::Index>(x.numel() / in);
  Shape shape = x.shape();
  shape.back() = out_dim;
  Buffer out(static_cast<std::size_t>(rows) * out_dim);
  MatMap y(out.data(), rows, out_dim);
  y.noalias() = ConstMatMap(x.data().data(), rows, in) * weight.matrix();
  if (bias.defined()) {
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), out_dim);
  }
  std::vector<Tensor> inputs = {x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return MakeResult(shape, std::move(out), std::move(inputs),
                    [rows, in, out_dim](Node& self) {
    ConstMatMap dy(self.grad.data(), rows, out_dim);
    const Node& px = *self.parents[0];
    const Node& pw = *self.parents[1];
    if (double* g = ParentGrad(self, 0)) {
      MatMap(g, rows, in).noalias() +=
          dy * ConstMatMap(pw.value.data(), in, out_dim).transpose();
    }
    if (double* g = ParentGrad(self, 1)) {
      MatMap(g, in, out_dim).noalias() +=
          ConstMatMap(px.value.data(), rows, in).transpose() * dy;
    }
    if (self.parents.size() > 2) {
      if (double* g = ParentGrad(self, 2)) {
        Eigen::Map<Eigen::RowVectorXd>(g, out_dim) += dy.colwise().sum();
      }
    }
  });
}

Tensor ConcatRows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValidationError("ConcatRows: no inputs");
  Shape shape = parts[0].shape();
  const std::size_t inner = parts[0].numel() / static_cast<std::size_t>(shape[0]);
  int rows = 0;
  Buffer out;
  for (const auto& p : parts) {
    if (p.numel() / static_cast<std::size_t>(p.dim(0)) != inner) {
      throw ValidationError("ConcatRows: trailing dims differ");
    }
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  shape[0] = rows;
  return MakeResult(shape, std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t n = self.parents[p]->value.size();
      if (double* g = ParentGrad(self, p)) {
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

Tensor SliceRows(const Tensor& a, int start, int count) {
  if (start < 0 || count < 0 || start + count > a.dim(0)) {
    throw ValidationError("SliceRows: range out of bounds");
  }
  const std::size_t inner = a.numel() / static_cast<std::size_t>(a.dim(0));
  Shape shape = a.shape();
  shape[0] = count;
  const std::size_t begin = static_cast<std::size_t>(start) * inner;
  Buffer out(a.data().begin() + begin,
                          a.data().begin() + begin + count * inner);
  return MakeResult(shape, std::move(out), {a}, [begin](Node& self) {
    if (double* g = ParentGrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin + i] += self.grad[i];
    }
  });
}

Tensor ConcatCols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValidationError("ConcatCols: no inputs");
  const std::size_t rows = parts[0].numel() / parts[0].shape().back();
  int cols = 0;
  for (const auto& p : parts) {
    if (p.numel() / p.shape().back() != rows) {
      throw ValidationError("ConcatCols: leading dims differ");
    }
    cols += p.shape().back();
  }
  Buffer out(rows * cols);
  int offset = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    const int c = p.shape().back();
    offsets.push_back(offset);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.data().begin() + r * c, c, out.begin() + r * cols + offset);
    }
    offset += c;
  }
  Shape shape = parts[0].shape();
  shape.back() = cols;
  return MakeResult(shape, std::move(out), parts,
                    [rows, cols, offsets](Node& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      double* g = ParentGrad(self, p);
      if (!g) continue;
      const int c = self.parents[p]->shape.back();
      for (std::size_t r = 0; r < rows; ++r) {
        for (int j = 0; j < c; ++j) g[r * c + j] += self.grad[r * cols + offsets[p] + j];
      }
    }
  });
}

Tensor SliceCols(const Tensor& a, int start, int count) {
  const int cols = a.shape().back();
  if (start < 0 || count < 0 || start + count > cols) {
    throw ValidationError("SliceCols: range out of bounds");
  }
  const std::size_t rows = a.numel() / cols;
  Buffer out(rows * count);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().begin() + r * cols + start, count, out.begin() + r * count);
  }
  Shape shape = a.shape();
  shape.back() = count;
  return MakeResult(shape, std::move(out), {a},
                    [rows, cols, start, count](Node& self) {
    if (double* g = ParentGrad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (int j = 0; j < count; ++j) g[r * cols + start + j] += self.grad[r * count + j];
      }
    }
  });
}

Tensor Embedding(const Tensor& table, std::span<const int> indices) {
  const int vocab = table.dim(0), width = table.dim(1);
  std::vector<int> idx(indices.begin(), indices.end());
  Buffer out(idx.size() * width);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= vocab) {
      throw ValidationError("Embedding: index " + std::to_string(idx[i]) +
                            " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(table.data().begin() + static_cast<std::size_t>(idx[i]) * width, width,
                out.begin() + i * width);
  }
  return MakeResult({static_cast<int>(idx.size()), width}, std::move(out), {table},
                    [idx, width](Node& self) {
    if (double* g = ParentGrad(self, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (int j = 0; j < width; ++j) {
          g[static_cast<std::size_t>(idx[i]) * width + j] += self.grad[i * width + j];
        }
      }
    }
  });
}

Tensor LayerNorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps) {
  const int c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  Buffer out(x.numel()), xhat(x.numel()), inv_std(rows);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < c; ++j) mean += in[r * c + j];
    mean /= c;
    for (int j = 0; j < c; ++j) {
      const double d = in[r * c + j] - mean;
      var += d * d;
    }
    var /= c;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      xhat[i] = (in[i] - mean) * inv_std[r];
      out[i] = gamma[j] * xhat[i] + beta[j];
    }
  }
  return MakeResult(x.shape(), std::move(out), {x, gamma, beta},
                    [rows, c, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](Node& self) {
    const auto& gam = self.parents[1]->value;
    double* gx = ParentGrad(self, 0);
    double* gg = ParentGrad(self, 1);
    double* gb = ParentGrad(self, 2);
    Buffer dxhat(c);
    for (std::size_t r = 0; r < rows; ++r) {
      double mean_d = 0.0, mean_dx = 0.0;
      for (int j = 0; j < c; ++j) {
        const std::size_t i = r * c + j;
        const double dy = self.grad[i];
        if (gg) gg[j] += dy * xhat[i];
        if (gb) gb[j] += dy;
        dxhat[j] = dy * gam[j];
        mean_d += dxhat[j];
        mean_dx += dxhat[j] * xhat[i];
      }
      if (!gx) continue;
      mean_d /= c;
      mean_dx /= c;
      for (int j = 0; j < c; ++j) {
        const std::size_t i = r * c + j;
        gx[i] += inv_std[r] * (dxhat[j] - mean_d - xhat[i] * mean_dx);
      }
    }
  });
}

Tensor MaskedAttention(const Tensor& q, const Tensor& k, const Tensor& v,
                       int batch, int heads, const RowMat& mask) {
  const int c = q.shape().back();
  const int n = static_cast<int>(q.numel() / c) / batch;
  if (c % heads != 0) throw ValidationError("MaskedAttention: channels % heads != 0");
  if (mask.rows() != n || mask.cols() != n) {
    throw ValidationError("MaskedAttention: mask must be " + std::to_string(n) +
                          "x" + std::to_string(n));
  }
  const int dh = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Buffer out(q.numel(), 0.0);
  // Attention weights per (batch, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<RowMat>>(
      static_cast<std::size_t>(batch) * heads);
  Eigen::OuterStride<> stride(c);
  using Block = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  using MutBlock = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(b) * n * c + h * dh;
      Block qb(q.data().data() + off, n, dh, stride);
      Block kb(k.data().data() + off, n, dh, stride);
      Block vb(v.data().data() + off, n, dh, stride);
      RowMat s = (qb * kb.transpose()) * scale + mask;
      for (int i = 0; i < n; ++i) {
        const double mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
      }
      MutBlock(out.data() + off, n, dh, stride).noalias() = s * vb;
      (*probs)[static_cast<std::size_t>(b) * heads + h] = std::move(s);
    }
  }
  return MakeResult(q.shape(), std::move(out), {q, k, v},
                    [batch, heads, n, c, dh, scale, probs](Node& self) {
    double* gq = ParentGrad(self, 0);
    double* gk = ParentGrad(self, 1);
    double* gv = ParentGrad(self, 2);
    const auto& qv = self.parents[0]->value;
    const auto& kv = self.parents[1]->value;
    const auto& vv = self.parents[2]->value;
    Eigen::OuterStride<> stride(c);
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        const std::size_t off = static_cast<std::size_t>(b) * n * c + h * dh;
        const RowMat& p = (*probs)[static_cast<std::size_t>(b) * heads + h];
        Block dout(self.grad.data() + off, n, dh, stride);
        Block qb(qv.data() + off, n, dh, stride);
        Block kb(kv.data() + off, n, dh, stride);
        Block vb(vv.data() + off, n, dh, stride);
        if (gv) MutBlock(gv + off, n, dh, stride).noalias() += p.transpose() * dout;
        if (!gq && !gk) continue;
        RowMat dp = dout * vb.transpose();
        Eigen::VectorXd rowdot = (dp.array() * p.array()).rowwise().sum();
        RowMat ds = p.array() * (dp.colwise() - rowdot).array();
        ds *= scale;
        if (gq) MutBlock(gq + off, n, dh, stride).noalias() += ds * kb;
        if (gk) MutBlock(gk + off, n, dh, stride).noalias() += ds.transpose() * qb;
      }
    }
  });
}

Tensor Dropout(const Tensor& a, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return a;
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  Buffer mask(a.numel());
  for (auto& m : mask) m = keep(rng) ? s : 0.0;
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * mask[i];
  return MakeResult(a.shape(), std::move(out), {a},
                    [mask = std::move(mask)](Node& self) {
    if (double* g = ParentGrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * mask[i];
    }
  });
}

RowMat Softmax(const RowMat& logits) {
  RowMat p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

Tensor SoftmaxCrossEntropy(const Tensor& logits, std::span<const int> targets) {
  const int m = logits.shape().back();
  const auto rows = static_cast<Eigen::Index>(logits.numel() / m);
  if (static_cast<std::size_t>(rows) != targets.size()) {
    throw ValidationError("SoftmaxCrossEntropy: " + std::to_string(targets.size()) +
                          " targets for " + std::to_string(rows) + " rows");
  }
  RowMat p = Softmax(logits.matrix());
  double loss = 0.0;
  std::vector<int> tgt(targets.begin(), targets.end());
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (tgt[i] < 0 || tgt[i] >= m) throw ValidationError("target out of range");
    const double mx = logits.matrix().row(i).maxCoeff();
    const double lse =
        mx + std::log((logits.matrix().row(i).array() - mx).exp().sum());
    loss += lse - logits.matrix()(i, tgt[i]);
  }
  loss /= static_cast<double>(rows);
  return MakeResult({1}, {loss}, {logits},
                    [p = std::move(p), tgt = std::move(tgt), rows, m](Node& self) {
    double* g = ParentGrad(self, 0);
    if (!g) return;
    const double s = self.grad[0] / static_cast<double>(rows);
    MatMap gm(g, rows, m);
    gm += p * s;
    for (Eigen::Index i = 0; i < rows; ++i) gm(i, tgt[i]) -= s;
  });
}

Tensor Conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int kernel, int stride, int pad) {
  if (x.rank() != 3) throw ValidationError("Conv1d expects [batch, time, channels]");
  const int batch = x.dim(0), t_in = x.dim(1), c_in = x.dim(2);
  const int c_out = weight.dim(1);
  if (weight.dim(0) != kernel * c_in) {
    throw ValidationError("Conv1d: weight " + ShapeString(weight.shape()) +
                          " does not match " + std::to_string(c_in) +
                          " input channels");
  }
  const int t_out = (t_in + 2 * pad - kernel) / stride + 1;
  if (t_out < 1) throw ValidationError("Conv1d: sequence too short");
  const int kc = kernel * c_in;
  auto im2col = [=](const double* src, RowMat& col) {
    col.setZero(static_cast<Eigen::Index>(batch) * t_out, kc);
    for (int b = 0; b < batch; ++b) {
      for (int t = 0; t < t_out; ++t) {
        for (int j = 0; j < kernel; ++j) {
          const int ti = t * stride + j - pad;
          if (ti < 0 || ti >= t_in) continue;
          const double* s = src + (static_cast<std::size_t>(b) * t_in + ti) * c_in;
          std::copy_n(s, c_in, &col(static_cast<Eigen::Index>(b) * t_out + t, j * c_in));
        }
      }
    }
  };
  RowMat col;
  im2col(x.data().data(), col);
  Buffer out(static_cast<std::size_t>(batch) * t_out * c_out);
  MatMap y(out.data(), static_cast<Eigen::Index>(batch) * t_out, c_out);
  y.noalias() = col * weight.matrix();
  if (bias.defined()) {
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), c_out);
  }
  std::vector<Tensor> inputs = {x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return MakeResult({batch, t_out, c_out}, std::move(out), std::move(inputs),
                    [=](Node& self) {
    const Eigen::Index rows = static_cast<Eigen::Index>(batch) * t_out;
    ConstMatMap dy(self.grad.data(), rows, c_out);
    if (double* g = ParentGrad(self, 1)) {
      RowMat c;
      im2col(self.parents[0]->value.data(), c);
      MatMap(g, kc, c_out).noalias() += c.transpose() * dy;
    }
    if (self.parents.size() > 2) {
      if (double* g = ParentGrad(self, 2)) {
        Eigen::Map<Eigen::RowVectorXd>(g, c_out) += dy.colwise().sum();
      }
    }
    if (double* g = ParentGrad(self, 0)) {
      RowMat dcol = dy * ConstMatMap(self.parents[1]->value.data(), kc, c_out).transpose();
      for (int b = 0; b < batch; ++b) {
        for (int t = 0; t < t_out; ++t) {
          for (int j = 0; j < kernel; ++j) {
            const int ti = t * stride + j - pad;
            if (ti < 0 || ti >= t_in) continue;
            double* d = g + (static_cast<std::size_t>(b) * t_in + ti) * c_in;
            const double* s = &dcol(static_cast<Eigen::Index>(b) * t_out + t, j * c_in);
            for (int ch = 0; ch < c_in; ++ch) d[ch] += s[ch];
          }
        }
      }
    }
  });
}

Tensor Upsample1d(const Tensor& x, int factor) {
  if (x.rank() != 3) throw ValidationError("Upsample1d expects [batch, time, channels]");
  const int batch = x.dim(0), t_in = x.dim(1), c = x.dim(2);
  const int t_out = t_in * factor;
  Buffer out(static_cast<std::size_t>(batch) * t_out * c);
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < t_out; ++t) {
      std::copy_n(x.data().begin() + (static_cast<std::size_t>(b) * t_in + t / factor) * c,
                  c, out.begin() + (static_cast<std::size_t>(b) * t_out + t) * c);
    }
  }
  return MakeResult({batch, t_out, c}, std::move(out), {x}, [=](Node& self) {
    double* g = ParentGrad(self, 0);
    if (!g) return;
    for (int b = 0; b < batch; ++b) {
      for (int t = 0; t < t_out; ++t) {
        double* d = g + (static_cast<std::size_t>(b) * t_in + t / factor) * c;
        const double* s = self.grad.data() + (static_cast<std::size_t>(b) * t_out + t) * c;
        for (int ch = 0; ch < c; ++ch) d[ch] += s[ch];
      }
    }
  });
}

Tensor Conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int kernel, int stride, int pad) {
  if (x.rank() != 4) throw ValidationError("Conv2d expects [batch, h, w, channels]");
  const int batch = x.dim(0), h_in = x.dim(1), w_in = x.dim(2), c_in = x.dim(3);
  const int c_out = weight.dim(1);
  const int kc = kernel * kernel * c_in;
  if (weight.dim(0) != kc) {
    throw ValidationError("Conv2d: weight " + ShapeString(weight.shape()) +
                          " does not match " + std::to_string(c_in) +
                          " input channels");
  }
  const int h_out = (h_in + 2 * pad - kernel) / stride + 1;
  const int w_out = (w_in + 2 * pad - kernel) / stride + 1;
  const int positions = h_out * w_out;
  // Samples per im2col chunk, bounded so the column buffer stays small.
  const int chunk = std::max<int>(
      1, static_cast<int>(kIm2colBudget / (static_cast<std::size_t>(positions) * kc)));
  auto im2col = [=](const double* src, int b0, int nb, RowMat& col) {
    col.setZero(static_cast<Eigen::Index>(nb) * positions, kc);
    for (int b = 0; b < nb; ++b) {
      const double* img = src + static_cast<std::size_t>(b0 + b) * h_in * w_in * c_in;
      for (int oh = 0; oh < h_out; ++oh) {
        for (int ow = 0; ow < w_out; ++ow) {
          double* row = &col(static_cast<Eigen::Index>(b) * positions + oh * w_out + ow, 0);
          for (int i = 0; i < kernel; ++i) {
            const int hi = oh * stride + i - pad;
            if (hi < 0 || hi >= h_in) continue;
            for (int j = 0; j < kernel; ++j) {
              const int wi = ow * stride + j - pad;
              if (wi < 0 || wi >= w_in) continue;
              std::copy_n(img + (static_cast<std::size_t>(hi) * w_in + wi) * c_in, c_in,
                          row + (i * kernel + j) * c_in);
            }
          }
        }
      }
    }
  };
  Buffer out(static_cast<std::size_t>(batch) * positions * c_out);
  RowMat col;
  for (int b0 = 0; b0 < batch; b0 += chunk) {
    const int nb = std::min(chunk, batch - b0);
    im2col(x.data().data(), b0, nb, col);
    MatMap y(out.data() + static_cast<std::size_t>(b0) * positions * c_out,
             static_cast<Eigen::Index>(nb) * positions, c_out);
    y.noalias() = col * weight.matrix();
    if (bias.defined()) {
      y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), c_out);
    }
  }
  std::vector<Tensor> inputs = {x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return MakeResult({batch, h_out, w_out, c_out}, std::move(out), std::move(inputs),
                    [=](Node& self) {
    double* gx = ParentGrad(self, 0);
    double* gw = ParentGrad(self, 1);
    double* gb = self.parents.size() > 2 ? ParentGrad(self, 2) : nullptr;
    const auto& wv = self.parents[1]->value;
    RowMat col;
    for (int b0 = 0; b0 < batch; b0 += chunk) {
      const int nb = std::min(chunk, batch - b0);
      const Eigen::Index rows = static_cast<Eigen::Index>(nb) * positions;
      ConstMatMap dy(self.grad.data() + static_cast<std::size_t>(b0) * positions * c_out,
                     rows, c_out);
      if (gb) Eigen::Map<Eigen::RowVectorXd>(gb, c_out) += dy.colwise().sum();
      if (gw) {
        im2col(self.parents[0]->value.data(), b0, nb, col);
        MatMap(gw, kc, c_out).noalias() += col.transpose() * dy;
      }
      if (!gx) continue;
      RowMat dcol = dy * ConstMatMap(wv.data(), kc, c_out).transpose();
      for (int b = 0; b < nb; ++b) {
        double* img = gx + static_cast<std::size_t>(b0 + b) * h_in * w_in * c_in;
        for (int oh = 0; oh < h_out; ++oh) {
          for (int ow = 0; ow < w_out; ++ow) {
            const double* row =
                &dcol(static_cast<Eigen::Index>(b) * positions + oh * w_out + ow, 0);
            for (int i = 0; i < kernel; ++i) {
              const int hi = oh * stride + i - pad;
              if (hi < 0 || hi >= h_in) continue;
              for (int j = 0; j < kernel; ++j) {
                const int wi = ow * stride + j - pad;
                if (wi < 0 || wi >= w_in) continue;
                double* d = img + (static_cast<std::size_t>(hi) * w_in + wi) * c_in;
                const double* s = row + (i * kernel + j) * c_in;
                for (int ch = 0; ch < c_in; ++ch) d[ch] += s[ch];
              }
            }
          }
        }
      }
    }
  });
}

Tensor MaxPool2d(const Tensor& x, int kernel, int stride_h, int stride_w) {
  if (x.rank() != 4) throw ValidationError("MaxPool2d expects [batch, h, w, channels]");
  const int batch = x.dim(0), h_in = x.dim(1), w_in = x.dim(2), c = x.dim(3);
  const int h_out = (h_in - kernel) / stride_h + 1;
  const int w_out = (w_in - kernel) / stride_w + 1;
  if (h_out < 1 || w_out < 1) throw ValidationError("MaxPool2d: input smaller than kernel");
  const std::size_t n_out = static_cast<std::size_t>(batch) * h_out * w_out * c;
  Buffer out(n_out);
  std::vector<std::size_t> argmax(n_out);
  const auto in = x.data();
  for (int b = 0; b < batch; ++b) {
    for (int oh = 0; oh < h_out; ++oh) {
      for (int ow = 0; ow < w_out; ++ow) {
        for (int ch = 0; ch < c; ++ch) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_i = 0;
          for (int i = 0; i < kernel; ++i) {
            for (int j = 0; j < kernel; ++j) {
              const std::size_t idx =
                  ((static_cast<std::size_t>(b) * h_in + oh * stride_h + i) * w_in +
                   ow * stride_w + j) * c + ch;
              if (in[idx] > best) {
                best = in[idx];
                best_i = idx;
              }
            }
          }
          const std::size_t o =
              ((static_cast<std::size_t>(b) * h_out + oh) * w_out + ow) * c + ch;
          out[o] = best;
          argmax[o] = best_i;
        }
      }
    }
  }
  return MakeResult({batch, h_out, w_out, c}, std::move(out), {x},
                    [argmax = std::move(argmax)](Node& self) {
    if (double* g = ParentGrad(self, 0)) {
      for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
    }
  });
}

Tensor Sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return MakeResult({1}, {s}, {a}, [](Node& self) {
    if (double* g = ParentGrad(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor Mean(const Tensor& a) {
  return Scale(Sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor SumSquares(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return MakeResult({1}, {s}, {a}, [](Node& self) {
    if (double* g = ParentGrad(self, 0)) {
      const auto& x = self.parents[0]->value;
      for (std::size_t i = 0; i < x.size(); ++i) g[i] += 2.0 * x[i] * self.grad[0];
    }
  });
}

Tensor MseLoss(const Tensor& prediction, const Tensor& target) {
  return Scale(SumSquares(Sub(prediction, target)),
               1.0 / static_cast<double>(prediction.numel()));
}

}  // namespace angie::nn
