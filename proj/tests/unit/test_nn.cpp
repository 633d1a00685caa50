#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "angie/errors.hpp"
#include "angie/nn/checkpoint.hpp"
#include "angie/nn/gradcheck.hpp"
#include "angie/nn/ops.hpp"
#include "angie/nn/params.hpp"

namespace angie::nn {
namespace {

Tensor RandomTensor(const Shape& shape, std::mt19937_64& rng, bool grad = true,
                    double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(NumElements(shape));
  for (double& x : v) x = n(rng);
  return Tensor::FromData(shape, std::move(v), grad);
}

// Fixed random projection so every output element contributes to the loss.
Tensor Probe(const Tensor& y) {
  std::mt19937_64 rng(1234);
  Tensor w = RandomTensor(y.shape(), rng, false);
  return Sum(Mul(y, w));
}

void ExpectGradientsMatch(const std::vector<std::pair<std::string, Tensor>>& leaves,
                          const std::function<Tensor()>& loss, double tol = 1e-6) {
  auto results = CheckGradients(leaves, loss, 1e-5, 200);
  for (const auto& r : results) {
    EXPECT_LT(r.relative_error, tol) << r.name << " analytic norm " << r.analytic_norm;
  }
}

TEST(AutogradTest, ElementwiseOps) {
  std::mt19937_64 rng(1);
  Tensor a = RandomTensor({3, 4}, rng), b = RandomTensor({3, 4}, rng);
  Tensor s = Tensor::FromData({1}, {0.7}, true);
  ExpectGradientsMatch({{"a", a}, {"b", b}, {"s", s}}, [&] {
    Tensor y = Add(Mul(Tanh(a), Sigmoid(b)), Sub(Gelu(a), Scale(b, 0.3)));
    return Probe(ScaleBy(y, s));
  });
}

TEST(AutogradTest, MatMulLinearLayerNorm) {
  std::mt19937_64 rng(2);
  Tensor x = RandomTensor({2, 3, 5}, rng), w = RandomTensor({5, 4}, rng);
  Tensor b = RandomTensor({4}, rng), g = RandomTensor({4}, rng), beta = RandomTensor({4}, rng);
  ExpectGradientsMatch({{"x", x}, {"w", w}, {"b", b}, {"g", g}, {"beta", beta}}, [&] {
    return Probe(LayerNorm(Linear(x, w, b), g, beta));
  });
}

TEST(AutogradTest, ConcatSliceReshapeEmbedding) {
  std::mt19937_64 rng(3);
  Tensor a = RandomTensor({2, 3}, rng), b = RandomTensor({2, 2}, rng);
  Tensor table = RandomTensor({6, 5}, rng);
  const std::vector<int> idx = {4, 1, 4};
  ExpectGradientsMatch({{"a", a}, {"b", b}, {"table", table}}, [&] {
    Tensor c = ConcatCols({a, b});
    Tensor r = ConcatRows({SliceCols(c, 1, 2), SliceRows(Reshape(c, {5, 2}), 1, 2)});
    return Add(Probe(r), Probe(Embedding(table, idx)));
  });
  EXPECT_THROW(Embedding(table, std::vector<int>{6}), ValidationError);
}

TEST(AutogradTest, SoftmaxCrossEntropyMatchesDirectFormula) {
  std::mt19937_64 rng(4);
  Tensor logits = RandomTensor({4, 7}, rng);
  const std::vector<int> targets = {0, 6, 3, 3};
  double expected = 0.0;
  for (int i = 0; i < 4; ++i) {
    double z = 0.0;
    for (int j = 0; j < 7; ++j) z += std::exp(logits[i * 7 + j]);
    expected += std::log(z) - logits[i * 7 + targets[i]];
  }
  EXPECT_NEAR(SoftmaxCrossEntropy(logits, targets).item(), expected / 4, 1e-12);
  ExpectGradientsMatch({{"logits", logits}},
                       [&] { return SoftmaxCrossEntropy(logits, targets); });
}

TEST(AutogradTest, MaskedAttentionMatchesPerHeadLoop) {
  std::mt19937_64 rng(5);
  const int batch = 2, n = 4, heads = 2, c = 6, hd = c / heads;
  Tensor q = RandomTensor({batch * n, c}, rng), k = RandomTensor({batch * n, c}, rng);
  Tensor v = RandomTensor({batch * n, c}, rng);
  RowMat mask = RowMat::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) mask(i, j) = -std::numeric_limits<double>::infinity();
  }
  Tensor out = MaskedAttention(q, k, v, batch, heads, mask);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      for (int i = 0; i < n; ++i) {
        std::vector<double> w(n, 0.0);
        double z = 0.0;
        for (int j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (int d = 0; d < hd; ++d) {
            dot += q[(b * n + i) * c + h * hd + d] * k[(b * n + j) * c + h * hd + d];
          }
          w[j] = std::exp(dot / std::sqrt(double(hd)));
          z += w[j];
        }
        for (int d = 0; d < hd; ++d) {
          double expected = 0.0;
          for (int j = 0; j <= i; ++j) expected += w[j] / z * v[(b * n + j) * c + h * hd + d];
          EXPECT_NEAR(out[(b * n + i) * c + h * hd + d], expected, 1e-12);
        }
      }
    }
  }
  ExpectGradientsMatch({{"q", q}, {"k", k}, {"v", v}},
                       [&] { return Probe(MaskedAttention(q, k, v, batch, heads, mask)); });
}

TEST(AutogradTest, Conv1dMatchesDirectLoop) {
  std::mt19937_64 rng(6);
  const int B = 2, T = 8, cin = 3, cout = 4, k = 3;
  Tensor x = RandomTensor({B, T, cin}, rng), w = RandomTensor({k * cin, cout}, rng);
  Tensor b = RandomTensor({cout}, rng);
  for (int stride : {1, 2}) {
    Tensor y = Conv1d(x, w, b, k, stride, 1);
    const int tout = (T + 2 - k) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{B, tout, cout}));
    for (int bi = 0; bi < B; ++bi) {
      for (int t = 0; t < tout; ++t) {
        for (int o = 0; o < cout; ++o) {
          double acc = b[o];
          for (int j = 0; j < k; ++j) {
            const int src = t * stride - 1 + j;
            if (src < 0 || src >= T) continue;
            for (int ci = 0; ci < cin; ++ci) {
              acc += x[(bi * T + src) * cin + ci] * w[(j * cin + ci) * cout + o];
            }
          }
          EXPECT_NEAR(y[(bi * tout + t) * cout + o], acc, 1e-12);
        }
      }
    }
    ExpectGradientsMatch({{"x", x}, {"w", w}, {"b", b}},
                         [&] { return Probe(Conv1d(x, w, b, k, stride, 1)); });
  }
  ExpectGradientsMatch({{"x", x}}, [&] { return Probe(Upsample1d(x, 2)); });
}

TEST(AutogradTest, Conv2dAndMaxPoolMatchDirectLoop) {
  std::mt19937_64 rng(7);
  const int B = 2, H = 6, W = 5, cin = 2, cout = 3, k = 3;
  Tensor x = RandomTensor({B, H, W, cin}, rng), w = RandomTensor({k * k * cin, cout}, rng);
  Tensor b = RandomTensor({cout}, rng);
  Tensor y = Conv2d(x, w, b, k, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{B, H, W, cout}));
  for (int bi = 0; bi < B; ++bi) {
    for (int r = 0; r < H; ++r) {
      for (int c = 0; c < W; ++c) {
        for (int o = 0; o < cout; ++o) {
          double acc = b[o];
          for (int dr = 0; dr < k; ++dr) {
            for (int dc = 0; dc < k; ++dc) {
              const int rr = r - 1 + dr, cc = c - 1 + dc;
              if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
              for (int ci = 0; ci < cin; ++ci) {
                acc += x[((bi * H + rr) * W + cc) * cin + ci] *
                       w[((dr * k + dc) * cin + ci) * cout + o];
              }
            }
          }
          EXPECT_NEAR(y[((bi * H + r) * W + c) * cout + o], acc, 1e-12);
        }
      }
    }
  }
  Tensor p = MaxPool2d(y, 3, 1, 2);
  ASSERT_EQ(p.shape(), (Shape{B, 4, 2, cout}));
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 2; ++c) {
      double best = -1e300;
      for (int dr = 0; dr < 3; ++dr) {
        for (int dc = 0; dc < 3; ++dc) best = std::max(best, y[((r + dr) * W + 2 * c + dc) * cout]);
      }
      EXPECT_EQ(p[(r * 2 + c) * cout], best);
    }
  }
  ExpectGradientsMatch({{"x", x}, {"w", w}, {"b", b}}, [&] {
    return Probe(MaxPool2d(Relu(Conv2d(x, w, b, k, 1, 1)), 3, 1, 2));
  });
}

TEST(AutogradTest, StraightThroughRoutesGradientToLatent) {
  Tensor latent = Tensor::FromData({2}, {0.3, -0.4}, true);
  Tensor quantized = Tensor::FromData({2}, {1.0, -1.0}, true);
  Tensor y = StraightThrough(latent, quantized);
  EXPECT_EQ(y[0], 1.0);
  Tensor loss = Sum(Mul(y, Tensor::FromData({2}, {2.0, 3.0})));
  loss.Backward();
  EXPECT_EQ(latent.grad()[0], 2.0);
  EXPECT_EQ(latent.grad()[1], 3.0);
  EXPECT_EQ(quantized.grad()[0], 0.0);
}

TEST(AutogradTest, NoGradGuardDropsGraph) {
  Tensor a = Tensor::FromData({1}, {2.0}, true);
  NoGradGuard guard;
  Tensor y = Mul(a, a);
  EXPECT_FALSE(y.requires_grad());
}

TEST(AdamTest, MinimizesQuadraticAndRejectsNan) {
  ParameterSet params;
  params.Add("x", {2});
  params.Get("x").mutable_data()[0] = 3.0;
  params.Get("x").mutable_data()[1] = -2.0;
  Adam adam(params, AdamOptions{.lr = 0.05});
  for (int i = 0; i < 500; ++i) {
    SumSquares(params.Get("x")).Backward();
    adam.Step();
  }
  EXPECT_LT(std::abs(params.Get("x")[0]), 1e-2);
  params.Get("x").grad()[0] = std::nan("");
  EXPECT_THROW(adam.Step(), NumericalError);
}

TEST(CheckpointTest, RoundTripAndCorruption) {
  std::mt19937_64 rng(8);
  Checkpoint ckpt;
  ckpt.kind = "test";
  ckpt.config_digest = "abc";
  ckpt.config = {{"x", 1}};
  ckpt.params.Add("w", {2, 3});
  ckpt.params.Add("stats", {3}, false);
  ckpt.params.InitNormal("w", 1.0, rng);
  const std::string path = ::testing::TempDir() + "/ckpt_roundtrip.bin";
  SaveCheckpoint(path, ckpt);
  Checkpoint back = LoadCheckpoint(path);
  EXPECT_EQ(back.kind, "test");
  EXPECT_EQ(back.config_digest, "abc");
  EXPECT_FALSE(back.params.IsTrainable("stats"));
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(back.params.Get("w")[i], static_cast<double>(static_cast<float>(ckpt.params.Get("w")[i])));
  }
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
  EXPECT_THROW(LoadCheckpoint(path), ValidationError);
}

}  // namespace
}  // namespace angie::nn
