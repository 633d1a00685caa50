#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "angie/audio.hpp"
#include "angie/errors.hpp"

namespace angie::audio {
namespace {

constexpr double kPi = std::numbers::pi;

Waveform Tone(double hz, double seconds, double amp = 0.5) {
  Waveform w;
  w.samples.resize(static_cast<std::size_t>(seconds * kSampleRate));
  for (std::size_t i = 0; i < w.samples.size(); ++i) {
    w.samples[i] = amp * std::sin(2 * kPi * hz * i / kSampleRate);
  }
  return w;
}

Waveform Noise(double seconds, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  Waveform w;
  w.samples.resize(static_cast<std::size_t>(seconds * kSampleRate));
  for (double& s : w.samples) s = u(rng);
  return w;
}

TEST(MfccTest, PureToneIsStationary) {
  // A 400 Hz tone advances exactly four cycles per 10 ms hop.
  nn::RowMat m = Mfcc(Tone(400.0, 1.0));
  ASSERT_EQ(m.cols(), 12);
  for (Eigen::Index f = 1; f < m.rows(); ++f) {
    EXPECT_LT((m.row(f) - m.row(0)).cwiseAbs().maxCoeff(), 1e-6) << "frame " << f;
  }
}

TEST(MfccTest, SilenceGivesLogFloorFrames) {
  Waveform silence;
  silence.samples.assign(4000, 0.0);
  nn::RowMat m = Mfcc(silence);
  EXPECT_EQ(m.rows(), 1 + (4000 - 400) / 160);
  // log floor is constant across filters, so only c0 survives the DCT.
  EXPECT_LT(m.cwiseAbs().maxCoeff(), 1e-9);
  nn::RowMat e = FilterbankEnergies(silence);
  EXPECT_EQ(e.maxCoeff(), 0.0);
}

TEST(MfccTest, FilterbankMatchesDirectDft) {
  Waveform w = Noise(0.1, 3);
  MfccOptions opt;
  nn::RowMat energies = FilterbankEnergies(w, opt);
  nn::RowMat fb = MelFilterbank(opt);
  const std::vector<double> hann = HannWindow(opt.window);
  for (int f : {0, 3, 7}) {
    std::vector<double> power(opt.fft_size / 2 + 1);
    for (int k = 0; k <= opt.fft_size / 2; ++k) {
      std::complex<double> acc = 0.0;
      for (int i = 0; i < opt.window; ++i) {
        acc += w.samples[f * opt.hop + i] * hann[i] *
               std::polar(1.0, -2 * kPi * k * i / opt.fft_size);
      }
      power[k] = std::norm(acc);
    }
    for (int m = 0; m < opt.filters; ++m) {
      double ref = 0.0;
      for (int k = 0; k <= opt.fft_size / 2; ++k) ref += fb(m, k) * power[k];
      EXPECT_LE(std::abs(energies(f, m) - ref), 1e-8 * std::abs(ref)) << f << "," << m;
    }
  }
}

TEST(MfccTest, FilterbankIsTriangularAndCoversBand) {
  nn::RowMat fb = MelFilterbank();
  ASSERT_EQ(fb.rows(), 26);
  ASSERT_EQ(fb.cols(), 257);
  for (Eigen::Index m = 0; m < fb.rows(); ++m) {
    EXPECT_GT(fb.row(m).maxCoeff(), 0.5);
    EXPECT_LE(fb.row(m).maxCoeff(), 1.0);
    EXPECT_GE(fb.row(m).minCoeff(), 0.0);
  }
}

TEST(MfccTest, DctIsOrthonormal) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 3.0);
  nn::RowMat d = DctMatrix(26);
  Eigen::VectorXd x(26);
  for (int i = 0; i < 26; ++i) x[i] = n(rng);
  EXPECT_LT((d.transpose() * (d * x) - x).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(MfccTest, OneHopDelayShiftsFramesByOne) {
  Waveform w = Noise(0.5, 7);
  Waveform delayed;
  delayed.samples.assign(160, 0.0);
  delayed.samples.insert(delayed.samples.end(), w.samples.begin(), w.samples.end());
  nn::RowMat a = Mfcc(w), b = Mfcc(delayed);
  for (Eigen::Index f = 0; f + 1 < a.rows(); ++f) {
    EXPECT_LT((b.row(f + 1) - a.row(f)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(MfccTest, ShortSignalAndWrongRateAreRejected) {
  Waveform w;
  w.samples.assign(399, 0.1);
  EXPECT_THROW(Mfcc(w), ValidationError);
  Waveform r = Tone(440, 0.1);
  r.sample_rate = 22050;
  EXPECT_THROW(Mfcc(r), ValidationError);
}

TEST(MfccWindowsTest, AlignmentAndEdgeReplication) {
  nn::RowMat track(40, 2);
  for (int i = 0; i < 40; ++i) track.row(i) << i, -i;
  nn::RowMat win = MfccWindows(track, 10, 25.0);
  ASSERT_EQ(win.rows(), 10);
  ASSERT_EQ(win.cols(), 56);
  for (int t = 0; t < 10; ++t) {
    for (int j = 0; j < 28; ++j) {
      const int expected = std::clamp(4 * t - 14 + j, 0, 39);
      EXPECT_EQ(win(t, 2 * j), expected);
      EXPECT_EQ(win(t, 2 * j + 1), -expected);
    }
  }
  nn::RowMat constant = nn::RowMat::Constant(30, 12, 0.7);
  nn::RowMat cw = MfccWindows(constant, 6, 25.0);
  for (int t = 1; t < 6; ++t) EXPECT_EQ(cw.row(t), cw.row(0));
}

TEST(OnsetTest, SilenceHasNoEnvelopeOrPeaks) {
  Waveform silence;
  silence.samples.assign(16000, 0.0);
  OnsetEnvelope env = ComputeOnsetEnvelope(silence);
  for (double s : env.strength) EXPECT_EQ(s, 0.0);
  EXPECT_TRUE(env.peak_times.empty());
}

TEST(OnsetTest, ClickTrainPeaksAtClicksAndScaleInvariant) {
  Waveform w;
  w.samples.assign(5 * kSampleRate, 0.0);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 0.002);
  for (double& s : w.samples) s = n(rng);
  std::vector<double> clicks;
  for (int c = 0; c < 5; ++c) {
    const int at = c * kSampleRate + 4000;
    clicks.push_back(static_cast<double>(at) / kSampleRate);
    // Sharp-attack decaying bursts; they outlast the 128-sample gap between
    // consecutive 384-sample analysis windows.
    for (int i = 0; i < 4000; ++i) w.samples[at + i] += 0.4 * std::exp(-i / 2000.0) * std::sin(0.9 * i);
  }
  OnsetEnvelope env = ComputeOnsetEnvelope(w);
  for (double s : env.strength) EXPECT_GE(s, 0.0);
  ASSERT_EQ(env.peak_times.size(), clicks.size());
  for (std::size_t i = 0; i < clicks.size(); ++i) {
    EXPECT_LE(std::abs(env.peak_times[i] - clicks[i]), 512.0 / kSampleRate);
  }
  Waveform louder = w;
  for (double& s : louder.samples) s *= 2.0;
  EXPECT_EQ(ComputeOnsetEnvelope(louder).peak_times, env.peak_times);
}

TEST(ChromaTest, ToneLandsInItsPitchClass) {
  nn::RowMat c = Chroma(Tone(440.0 * std::pow(2.0, 3 / 12.0), 0.5));
  for (Eigen::Index f = 2; f + 2 < c.rows(); ++f) {
    Eigen::Index arg;
    c.row(f).maxCoeff(&arg);
    EXPECT_EQ(arg, 3);
  }
  nn::RowMat feats = BuiltinOnsetFeatures(Tone(440.0, 1.0), 25, 25.0);
  EXPECT_EQ(feats.rows(), 25);
  EXPECT_EQ(feats.cols(), kBuiltinOnsetWidth);
}

TEST(OnsetFileTest, RoundTripTruncationAndWidth) {
  const std::string dir = ::testing::TempDir();
  OnsetTrack track{3, kPaperOnsetWidth, {}};
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 3 * kPaperOnsetWidth; ++i) track.values.push_back(n(rng));
  WriteOnsetFile(dir + "/onset.txt", track);
  OnsetTrack back = LoadOnsetFile(dir + "/onset.txt");
  EXPECT_EQ(back.frames, 3);
  EXPECT_EQ(back.values, track.values);

  std::ifstream in(dir + "/onset.txt");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::ofstream(dir + "/truncated.txt") << text.substr(0, text.size() * 2 / 3 - 5);
  EXPECT_THROW(LoadOnsetFile(dir + "/truncated.txt"), ValidationError);

  OnsetTrack narrow{2, 425, std::vector<double>(850, 0.5)};
  WriteOnsetFile(dir + "/narrow.txt", narrow);
  try {
    LoadOnsetFile(dir + "/narrow.txt");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 426"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("found 425"), std::string::npos);
  }
}

TEST(WavTest, RoundTripWithinQuantization) {
  Waveform w = Tone(300.0, 0.2, 0.9);
  const std::string path = ::testing::TempDir() + "/tone.wav";
  WriteWav(path, w);
  Waveform back = ReadWav(path);
  ASSERT_EQ(back.samples.size(), w.samples.size());
  EXPECT_EQ(back.sample_rate, kSampleRate);
  for (std::size_t i = 0; i < w.samples.size(); ++i) {
    EXPECT_NEAR(back.samples[i], w.samples[i], 1.0 / 32768);
  }
  Waveform bad = w;
  bad.samples[3] = 1.5;
  EXPECT_THROW(bad.Validate(), ValidationError);
}

TEST(MfccCacheTest, RoundTrip) {
  nn::RowMat m = MfccWindows(Mfcc(Tone(500.0, 0.5)), 12, 25.0);
  const std::string path = ::testing::TempDir() + "/mfcc.txt";
  WriteMfccCache(path, m);
  EXPECT_EQ(ReadMfccCache(path), m);
}

}  // namespace
}  // namespace angie::audio
