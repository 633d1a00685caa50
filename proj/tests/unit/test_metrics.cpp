#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include "angie/errors.hpp"
#include "angie/metrics.hpp"
#include "angie/nn/gradcheck.hpp"
#include "angie/synth.hpp"

namespace angie::metrics {
namespace {

using motion::MotionSequence;
using nn::RowMat;

Eigen::MatrixXd RandomSpd(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd a(d, d);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = n(rng);
  return a * a.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

TEST(FrechetTest, IdentityAndShiftedMeans) {
  std::mt19937_64 rng(1);
  GaussianStats a{Eigen::VectorXd::Random(6), RandomSpd(6, rng)};
  EXPECT_NEAR(FrechetDistance(a, a), 0.0, 1e-10);
  GaussianStats i0{Eigen::VectorXd::Zero(4), Eigen::MatrixXd::Identity(4, 4)};
  GaussianStats i1{Eigen::Vector4d(1, -2, 0.5, 3), Eigen::MatrixXd::Identity(4, 4)};
  EXPECT_NEAR(FrechetDistance(i0, i1), 1 + 4 + 0.25 + 9, 1e-12);
  GaussianStats bad{Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3)};
  EXPECT_THROW(FrechetDistance(i0, bad), ValidationError);
}

// Diagonal covariances commute, so the trace term is sum (sqrt a - sqrt b)^2.
TEST(FrechetTest, DiagonalClosedForm) {
  Eigen::VectorXd da(3), db(3);
  da << 1.0, 4.0, 0.25;
  db << 9.0, 1.0, 0.25;
  GaussianStats a{Eigen::VectorXd::Zero(3), da.asDiagonal()};
  GaussianStats b{Eigen::VectorXd::Zero(3), db.asDiagonal()};
  EXPECT_NEAR(FrechetDistance(a, b), 4.0 + 1.0 + 0.0, 1e-12);
}

// Independent route: eigenvalues of the non-symmetric product S1 S2.
TEST(FrechetTest, MatchesProductEigenvalueOracleAndIsSymmetric) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    GaussianStats a{Eigen::VectorXd::Random(5), RandomSpd(5, rng)};
    GaussianStats b{Eigen::VectorXd::Random(5), RandomSpd(5, rng)};
    Eigen::EigenSolver<Eigen::MatrixXd> es(a.cov * b.cov);
    double tr = 0.0;
    for (int i = 0; i < 5; ++i) tr += std::sqrt(es.eigenvalues()[i].real());
    const double oracle = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2 * tr;
    EXPECT_NEAR(FrechetDistance(a, b), oracle, 1e-9);
    EXPECT_NEAR(FrechetDistance(a, b), FrechetDistance(b, a), 1e-9);
  }
}

TEST(FrechetTest, MonteCarloGaussiansApproachAnalyticValue) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  const int d = 16, count = 5000;
  Eigen::VectorXd m(d);
  for (int j = 0; j < d; ++j) m[j] = 0.5 * std::cos(j);
  RowMat x(count, d), y(count, d);
  for (int i = 0; i < count; ++i) {
    for (int j = 0; j < d; ++j) {
      x(i, j) = n(rng);
      y(i, j) = m[j] + n(rng);
    }
  }
  const double fd = FrechetDistance(FitGaussian(x), FitGaussian(y));
  EXPECT_NEAR(fd, m.squaredNorm(), 0.05 * m.squaredNorm());
}

MotionSequence SpeedDipMotion(int frames, int period, double fps) {
  // Speed |cos(pi t / period)| vanishes at t = period / 2 + j period.
  MotionSequence m(frames, 2, fps);
  for (int t = 0; t < frames; ++t) {
    for (int k = 0; k < 2; ++k) {
      const double x = 0.1 * std::sin(M_PI * t / period);
      m.at(t, k).mu = {0.3 + k * 0.2 + x, 0.5};
      m.at(t, k).L = {0.05, 0.0, 0.05};
    }
  }
  return m;
}

TEST(BeatTest, DetectsSpeedMinima) {
  MotionSequence m = SpeedDipMotion(100, 20, 25.0);
  auto beats = GestureBeats(m);
  ASSERT_EQ(beats.size(), 5u);
  for (int j = 0; j < 5; ++j) EXPECT_NEAR(beats[j], (10 + 20 * j) / 25.0, 1e-12);
}

TEST(BeatTest, ClosedFormConsistency) {
  MotionSequence m = SpeedDipMotion(100, 20, 25.0);
  std::vector<double> audio, shifted;
  for (int j = 0; j < 5; ++j) {
    audio.push_back((10 + 20 * j) / 25.0);
    shifted.push_back((10 + 20 * j) / 25.0 + 0.1);
  }
  EXPECT_NEAR(BeatConsistency(audio, m), 1.0, 1e-12);
  EXPECT_NEAR(BeatConsistency(shifted, m), std::exp(-0.5), 1e-3);
  double previous = 1.0;
  for (double offset = 0.02; offset < 0.3; offset += 0.02) {
    std::vector<double> a;
    for (double t : audio) a.push_back(t + offset);
    const double bc = BeatConsistency(a, m);
    EXPECT_LT(bc, previous);
    previous = bc;
  }
  EXPECT_THROW(BeatConsistency(std::vector<double>{}, m), ValidationError);
}

TEST(BeatTest, ConstantVelocityHasNoBeats) {
  MotionSequence m(50, 1, 25.0);
  for (int t = 0; t < 50; ++t) {
    m.at(t, 0).mu = {0.01 * t, 0.2};
    m.at(t, 0).L = {0.05, 0.0, 0.05};
  }
  EXPECT_TRUE(GestureBeats(m).empty());
  std::vector<double> audio{0.4, 1.0};
  EXPECT_EQ(BeatConsistency(audio, m), 0.0);
}

TEST(DiversityTest, ClosedForms) {
  RowMat same = RowMat::Constant(10, 4, 0.3);
  EXPECT_EQ(Diversity(same, 400, 1), 0.0);
  RowMat two(2, 3);
  two << 0, 1, 2, 1, -1, 2.5;
  EXPECT_NEAR(Diversity(two, 400, 7), 1 + 2 + 0.5, 1e-12);
  EXPECT_THROW(Diversity(RowMat::Zero(1, 3), 400, 1), ValidationError);
  EXPECT_EQ(Diversity(two, 10, 3), Diversity(two, 10, 3));
}

TEST(DiversityTest, StableAcrossSeeds) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  RowMat f(100, 32);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = n(rng);
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  DiversityReport r = DiversityOverSeeds(f, 400, seeds);
  EXPECT_EQ(r.per_seed.size(), 5u);
  EXPECT_LT(r.std, 0.02 * r.mean);
  // Expected L1 distance of two standard normal vectors: d * 2 / sqrt(pi).
  EXPECT_NEAR(r.mean, 32 * 2 / std::sqrt(M_PI), 0.05 * r.mean);
}

FeatureConfig SmallFeatures() {
  FeatureConfig c;
  c.regions = 4;
  c.window = 16;
  c.hidden = 6;
  c.dim = 4;
  return c;
}

TEST(FeatureExtractorTest, GradientsMatchFiniteDifferences) {
  FeatureConfig c = SmallFeatures();
  c.regions = 1;
  c.window = 8;
  FeatureExtractor fx(c, 1);
  synth::SynthOptions so;
  so.regions = 1;
  so.frames = 8;
  auto clip = synth::MakeClip(0, 1, so);
  std::vector<const MotionSequence*> batch{&clip.motion};
  nn::Tensor x = fx.Input(batch);
  auto results = nn::CheckGradients(fx.params(), [&] {
    return nn::MseLoss(fx.Decode(fx.Encode(x)), x);
  }, 1e-6, 40);
  for (const auto& r : results) EXPECT_LT(r.relative_error, 1e-4) << r.name;
}

TEST(FeatureExtractorTest, FgdOfASetWithItselfIsZeroAndTrainingHelps) {
  synth::SynthOptions so;
  so.frames = 32;
  std::vector<MotionSequence> seqs;
  for (int c = 0; c < 4; ++c) {
    for (int s = 0; s < 6; ++s) seqs.push_back(synth::MakeClip(c, 10 * c + s, so).motion);
  }
  FeatureConfig fc = SmallFeatures();
  fc.hidden = 16;
  fc.dim = 8;
  FeatureExtractor fx(fc, 2);
  fx.FitNormalization(seqs);
  auto history = TrainFeatureExtractor(fx, seqs, {.steps = 200, .batch_size = 8, .lr = 3e-3, .seed = 1});
  auto avg = [&](std::size_t from) {
    return std::accumulate(history.begin() + from, history.begin() + from + 20, 0.0) / 20;
  };
  EXPECT_LT(avg(history.size() - 20), 0.5 * avg(0));
  EXPECT_LT(Fgd(fx, seqs, seqs), 1e-3);
  RowMat f = fx.Features(seqs);
  EXPECT_EQ(f.rows(), 48);
  EXPECT_EQ(f, fx.Features(seqs));
  FeatureExtractor copy(fx.ToCheckpoint("x"));
  EXPECT_EQ(copy.Features(seqs), f);
  std::vector<MotionSequence> shorter{MotionSequence(8, 4, 25.0)};
  EXPECT_THROW(fx.Features(shorter), ValidationError);
}

}  // namespace
}  // namespace angie::metrics
