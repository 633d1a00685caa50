#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "angie/errors.hpp"
#include "angie/gpt.hpp"
#include "angie/nn/gradcheck.hpp"

namespace angie::gpt {
namespace {

GptConfig TinyConfig(int vocab = 6) {
  GptConfig c;
  c.layers = 2;
  c.channels = 8;
  c.heads = 2;
  c.vocab = vocab;
  c.context = 5;
  c.audio_width = 3;
  return c;
}

GptExample RandomExample(const GptConfig& c, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> code(0, c.vocab - 1);
  std::normal_distribution<double> n(0.0, 1.0);
  GptExample ex;
  ex.audio = nn::RowMat(c.context, c.audio_width);
  for (Eigen::Index i = 0; i < ex.audio.size(); ++i) ex.audio.data()[i] = n(rng);
  for (int i = 0; i < c.context; ++i) {
    ex.mu_codes.push_back(code(rng));
    ex.l_codes.push_back(code(rng));
  }
  return ex;
}

GptBatch BatchOf(const std::vector<GptExample>& exs) {
  std::vector<const GptExample*> ptrs;
  for (const auto& e : exs) ptrs.push_back(&e);
  return MakeTrainingBatch(ptrs);
}

TEST(GptMaskTest, BlockLowerTriangular) {
  const int n = 4;
  nn::RowMat m = BlockCausalMask(n);
  ASSERT_EQ(m.rows(), 3 * n);
  for (int r = 0; r < 3 * n; ++r) {
    for (int c = 0; c < 3 * n; ++c) {
      if (c % n <= r % n) {
        EXPECT_EQ(m(r, c), 0.0);
      } else {
        EXPECT_TRUE(std::isinf(m(r, c)) && m(r, c) < 0);
      }
    }
  }
}

TEST(GptBatchTest, TargetsAreNextCodesAndAudioLooksAhead) {
  GptConfig c = TinyConfig();
  GptExample ex;
  ex.audio = nn::RowMat(5, 3);
  for (int i = 0; i < 5; ++i) ex.audio.row(i).setConstant(i);
  ex.mu_codes = {0, 1, 2, 3, 4};
  ex.l_codes = {5, 4, 3, 2, 1};
  GptBatch b = BatchOf({ex});
  EXPECT_EQ(b.slots, 4);
  EXPECT_EQ(b.mu_codes, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(b.mu_targets, (std::vector<int>{1, 2, 3, 4}));
  EXPECT_EQ(b.l_targets, (std::vector<int>{4, 3, 2, 1}));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(b.audio[i * 3], i + 1);
  (void)c;
}

// Changing anything at slot j must leave every output at slots < j untouched.
TEST(GptModelTest, OutputsAreCausalAcrossAllSegments) {
  GptConfig c = TinyConfig();
  GptModel model(c, 7);
  std::mt19937_64 rng(3);
  GptExample ex = RandomExample(c, rng);
  GptBatch base = BatchOf({ex});
  GptOutput ref = model.Forward(base);
  const int n = base.slots, m = c.vocab;
  for (int j = 0; j < n; ++j) {
    for (int which = 0; which < 3; ++which) {
      GptBatch b = base;
      if (which == 0) b.audio[j * c.audio_width] += 3.0;
      if (which == 1) b.mu_codes[j] = (b.mu_codes[j] + 1) % m;
      if (which == 2) b.l_codes[j] = (b.l_codes[j] + 1) % m;
      GptOutput out = model.Forward(b);
      double max_before = 0.0, max_after = 0.0;
      for (int s = 0; s < n; ++s) {
        for (int k = 0; k < m; ++k) {
          const double d = std::abs(out.mu_logits.data()[s * m + k] - ref.mu_logits.data()[s * m + k]) +
                           std::abs(out.l_logits.data()[s * m + k] - ref.l_logits.data()[s * m + k]);
          (s < j ? max_before : max_after) = std::max(s < j ? max_before : max_after, d);
        }
      }
      EXPECT_LT(max_before, 1e-6) << "slot " << j << " segment " << which;
      EXPECT_GT(max_after, 1e-9) << "slot " << j << " segment " << which;
    }
  }
}

TEST(GptModelTest, ZeroHeadsGiveUniformCrossEntropy) {
  for (int vocab : {32, 512}) {
    GptConfig c = TinyConfig(vocab);
    GptModel model(c, 1);
    for (const char* name : {"head_mu.w", "head_mu.b", "head_l.w", "head_l.b"}) {
      model.params().Fill(name, 0.0);
    }
    std::mt19937_64 rng(4);
    GptBatch b = BatchOf({RandomExample(c, rng), RandomExample(c, rng)});
    GptOutput out = model.Forward(b);
    EXPECT_NEAR(GptLoss(out, b.mu_targets, b.l_targets).item(), std::log(vocab), 1e-12);
    nn::RowMat p = nn::Softmax(out.mu_logits.matrix());
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
      EXPECT_NEAR(p(r, 0), 1.0 / vocab, 1e-15);
    }
  }
}

TEST(GptModelTest, LossMatchesDirectCrossEntropy) {
  GptConfig c = TinyConfig();
  GptModel model(c, 2);
  std::mt19937_64 rng(5);
  GptBatch b = BatchOf({RandomExample(c, rng), RandomExample(c, rng)});
  GptOutput out = model.Forward(b);
  auto ce = [&](const nn::Tensor& logits, const std::vector<int>& t) {
    nn::RowMat z = logits.matrix();
    double total = 0.0;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      long double denom = 0.0L;
      for (Eigen::Index k = 0; k < z.cols(); ++k) denom += std::exp(static_cast<long double>(z(r, k)));
      total += static_cast<double>(std::log(denom)) - z(r, t[r]);
    }
    return total / static_cast<double>(z.rows());
  };
  const double expected = 0.5 * (ce(out.mu_logits, b.mu_targets) + ce(out.l_logits, b.l_targets));
  EXPECT_NEAR(GptLoss(out, b.mu_targets, b.l_targets).item(), expected, 1e-12);
}

TEST(GptModelTest, GradientsMatchFiniteDifferences) {
  GptConfig c = TinyConfig();
  GptModel model(c, 3);
  std::mt19937_64 rng(6);
  GptBatch b = BatchOf({RandomExample(c, rng), RandomExample(c, rng)});
  auto results = nn::CheckGradients(model.params(), [&] {
    return GptLoss(model.Forward(b), b.mu_targets, b.l_targets);
  }, 1e-5, 48);
  for (const auto& r : results) {
    EXPECT_LT(r.relative_error, 1e-6) << r.name << " norm " << r.analytic_norm;
  }
}

TEST(GptModelTest, DropoutOnlyWithRng) {
  GptConfig c = TinyConfig();
  c.dropout = 0.5;
  GptModel model(c, 3);
  std::mt19937_64 rng(6);
  GptBatch b = BatchOf({RandomExample(c, rng)});
  GptOutput a = model.Forward(b), a2 = model.Forward(b);
  EXPECT_EQ(a.mu_logits.data()[0], a2.mu_logits.data()[0]);
  std::mt19937_64 drop(1);
  GptOutput d = model.Forward(b, &drop);
  EXPECT_NE(a.mu_logits.matrix(), d.mu_logits.matrix());
}

TEST(GptModelTest, RejectsCodesOutsideVocabulary) {
  GptConfig c = TinyConfig();
  GptModel model(c, 3);
  std::mt19937_64 rng(6);
  GptBatch b = BatchOf({RandomExample(c, rng)});
  b.l_codes[1] = c.vocab;
  EXPECT_THROW(model.Forward(b), ValidationError);
  b = BatchOf({RandomExample(c, rng)});
  b.audio.pop_back();
  EXPECT_THROW(model.Forward(b), ValidationError);
}

TEST(GptConfigTest, ValidationAndJson) {
  GptConfig c = TinyConfig();
  EXPECT_EQ(GptConfig::FromJson(c.ToJson()).ToJson(), c.ToJson());
  c.heads = 3;
  EXPECT_THROW(c.Validate(), ValidationError);
}

TEST(GptGenerateTest, GreedyIsDeterministicAndMatchesColdSampling) {
  GptConfig c = TinyConfig();
  GptModel model(c, 11);
  std::mt19937_64 rng(8);
  nn::RowMat audio(12, c.audio_width);
  std::normal_distribution<double> n(0.0, 1.0);
  for (Eigen::Index i = 0; i < audio.size(); ++i) audio.data()[i] = n(rng);
  // More steps than the context holds, so the window has to slide.
  auto [mu, l] = model.Generate(audio, {1}, {2}, 10);
  ASSERT_EQ(mu.size(), 11u);
  ASSERT_EQ(l.size(), 11u);
  EXPECT_EQ(mu[0], 1);
  auto again = model.Generate(audio, {1}, {2}, 10);
  EXPECT_EQ(again.first, mu);
  EXPECT_EQ(again.second, l);
  auto cold = model.Generate(audio, {1}, {2}, 10, {.temperature = 1e-6, .top_k = 0, .seed = 9});
  EXPECT_EQ(cold.first, mu);
  auto top1 = model.Generate(audio, {1}, {2}, 10, {.temperature = 2.0, .top_k = 1, .seed = 9});
  EXPECT_EQ(top1.second, l);
  // Hot sampling is reproducible for a fixed seed.
  auto hot = model.Generate(audio, {1}, {2}, 10, {.temperature = 3.0, .top_k = 0, .seed = 4});
  EXPECT_EQ(model.Generate(audio, {1}, {2}, 10, {.temperature = 3.0, .top_k = 0, .seed = 4}), hot);
  EXPECT_THROW(model.Generate(audio, {1}, {2}, 12), ValidationError);
}

TEST(GptGenerateTest, GreedyPicksArgmaxOfLastSlot) {
  GptConfig c = TinyConfig();
  GptModel model(c, 12);
  nn::RowMat audio = nn::RowMat::Ones(4, c.audio_width);
  auto [mu, l] = model.Generate(audio, {0, 3}, {1, 1}, 1);
  GptBatch b;
  b.batch = 1;
  b.slots = 2;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < c.audio_width; ++j) b.audio.push_back(1.0);
  }
  b.mu_codes = {0, 3};
  b.l_codes = {1, 1};
  nn::RowMat z = model.Forward(b).mu_logits.matrix();
  Eigen::Index arg;
  z.row(1).maxCoeff(&arg);
  EXPECT_EQ(mu[2], arg);
}

TEST(GptCheckpointTest, RoundTripPreservesLogits) {
  GptConfig c = TinyConfig();
  GptModel model(c, 13);
  std::mt19937_64 rng(9);
  GptBatch b = BatchOf({RandomExample(c, rng)});
  GptModel copy(model.ToCheckpoint("digest"));
  EXPECT_EQ(model.Forward(b).l_logits.matrix(), copy.Forward(b).l_logits.matrix());
}

TEST(GptAudioTest, PoolRowsAndNormalization) {
  nn::RowMat x(5, 1);
  x << 1, 3, 5, 7, 9;
  nn::RowMat p = PoolRows(x, 2);
  ASSERT_EQ(p.rows(), 3);
  EXPECT_EQ(p(0, 0), 2);
  EXPECT_EQ(p(1, 0), 6);
  EXPECT_EQ(p(2, 0), 9);
  GptConfig c = TinyConfig();
  c.audio_width = 1;
  GptModel model(c, 1);
  std::vector<nn::RowMat> all{x};
  model.FitAudioNormalization(all);
  nn::RowMat z = model.NormalizeAudio(x);
  EXPECT_NEAR(z.mean(), 0.0, 1e-12);
  EXPECT_NEAR(z.array().square().mean(), 1.0, 1e-12);
}

// The next code is a function of the current code and the audio of the
// predicted chunk; a small model has to learn it almost perfectly.
TEST(GptTrainTest, LearnsAudioConditionedSuccessor) {
  GptConfig c;
  c.layers = 1;
  c.channels = 16;
  c.heads = 2;
  c.vocab = 6;
  c.context = 6;
  c.audio_width = 2;
  c.dropout = 0.0;
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> code(0, c.vocab - 1), bit(0, 1);
  auto make = [&] {
    GptExample ex;
    ex.audio = nn::RowMat(c.context, 2);
    ex.mu_codes = {code(rng)};
    ex.l_codes = {code(rng)};
    ex.audio.row(0) << 0, 0;
    for (int i = 1; i < c.context; ++i) {
      const int s = bit(rng);
      ex.audio.row(i) << (s ? 1.0 : -1.0), 0.5;
      ex.mu_codes.push_back((ex.mu_codes.back() + 1 + s) % c.vocab);
      ex.l_codes.push_back((ex.l_codes.back() + c.vocab - 1) % c.vocab);
    }
    return ex;
  };
  std::vector<GptExample> train, test;
  for (int i = 0; i < 64; ++i) train.push_back(make());
  for (int i = 0; i < 16; ++i) test.push_back(make());
  GptModel model(c, 5);
  const double before = NextCodeAccuracy(model, test);
  auto report = TrainGpt(model, train, {.steps = 300, .batch_size = 8, .lr = 3e-3, .seed = 1,
                                        .log_every = 0});
  const double after = NextCodeAccuracy(model, test);
  EXPECT_LT(report.loss_history.back(), report.loss_history.front());
  EXPECT_GT(after, 0.95) << "before " << before;
  GptModel again(c, 5);
  auto report2 = TrainGpt(again, train, {.steps = 5, .batch_size = 8, .lr = 3e-3, .seed = 1,
                                         .log_every = 0});
  for (int i = 0; i < 5; ++i) EXPECT_EQ(report2.loss_history[i], report.loss_history[i]) << i;
}

}  // namespace
}  // namespace angie::gpt
