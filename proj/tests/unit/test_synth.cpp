#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "angie/errors.hpp"
#include "angie/synth.hpp"

namespace angie::synth {
namespace {

double Distance(const motion::MotionSequence& a, const motion::MotionSequence& b) {
  double s = 0.0;
  for (int t = 0; t < a.frames(); ++t) {
    for (int k = 0; k < a.regions(); ++k) {
      const auto& x = a.at(t, k);
      const auto& y = b.at(t, k);
      s += (x.mu - y.mu).squaredNorm();
      s += std::pow(x.L.l1 - y.L.l1, 2) + std::pow(x.L.l2 - y.L.l2, 2) +
           std::pow(x.L.l3 - y.L.l3, 2);
    }
  }
  return std::sqrt(s);
}

TEST(SynthTest, ZeroJitterReproducesTemplate) {
  SynthOptions opt;
  opt.jitter_scale = 0.0;
  SynthClip clip = MakeClip(3, 42, opt);
  EXPECT_TRUE(clip.motion == clip.clean);
  EXPECT_TRUE(clip.motion == TemplateMotion(3, clip.phase, opt));
}

TEST(SynthTest, SameSeedIsBitwiseIdentical) {
  SynthOptions opt;
  SynthClip a = MakeClip(5, 9, opt), b = MakeClip(5, 9, opt);
  EXPECT_TRUE(a.motion == b.motion);
  EXPECT_EQ(a.audio.samples, b.audio.samples);
  EXPECT_EQ(a.envelope, b.envelope);
}

TEST(SynthTest, EveryFrameValidAndAudioInRange) {
  SynthOptions opt;
  for (int c = 0; c < opt.classes; ++c) {
    SynthClip clip = MakeClip(c, 100 + c, opt);
    EXPECT_NO_THROW(clip.motion.Validate());
    EXPECT_NO_THROW(clip.audio.Validate());
    EXPECT_EQ(clip.audio.samples.size(), 96u * 640u);
    EXPECT_EQ(clip.clipped_frames, 0);
  }
}

TEST(SynthTest, JitterTracksAudioEnvelope) {
  SynthOptions opt;
  for (std::uint64_t seed = 0; seed < 16; ++seed) {
    SynthClip clip = MakeClip(static_cast<int>(seed % 8), seed, opt);
    const double r = Pearson(JitterMagnitude(clip),
                             MeasureDriverEnvelope(clip.audio, opt.frames, opt.fps));
    EXPECT_GE(r, 0.9) << "seed " << seed;
  }
}

TEST(SynthTest, TemplatesAreWellSeparated) {
  SynthOptions opt;
  double closest = 1e300;
  for (int a = 0; a < opt.classes; ++a) {
    for (int b = 0; b < opt.classes; ++b) {
      for (int pa : {0, 8}) {
        for (int pb : {0, 8}) {
          if (a == b && pa == pb) continue;
          closest = std::min(closest, Distance(TemplateMotion(a, pa, opt), TemplateMotion(b, pb, opt)));
        }
      }
    }
  }
  EXPECT_GT(closest, 10 * opt.jitter_scale);
}

TEST(SynthTest, NearestTemplateClassifiesCleanClips) {
  SynthOptions opt;
  opt.jitter_scale = 0.0;
  for (int c = 0; c < opt.classes; ++c) {
    SynthClip clip = MakeClip(c, 1000 + c, opt);
    int best = -1;
    double best_d = 1e300;
    for (int k = 0; k < opt.classes; ++k) {
      for (int p : {0, 8}) {
        const double d = Distance(clip.motion, TemplateMotion(k, p, opt));
        if (d < best_d) best_d = d, best = k;
      }
    }
    EXPECT_EQ(best, c);
  }
}

TEST(SynthTest, CorpusSplitIsBalancedAndDisjoint) {
  SynthOptions opt;
  Corpus corpus = MakeCorpus(opt, 10, 7);
  EXPECT_EQ(corpus.train.size(), 72u);
  EXPECT_EQ(corpus.eval.size(), 8u);
  std::vector<int> train_counts(8, 0), eval_counts(8, 0);
  std::set<std::pair<int, std::uint64_t>> ids;
  for (const auto& c : corpus.train) ++train_counts[c.class_id], ids.insert({c.class_id, c.seed});
  for (const auto& c : corpus.eval) ++eval_counts[c.class_id], ids.insert({c.class_id, c.seed});
  EXPECT_EQ(ids.size(), 80u);
  for (int c = 0; c < 8; ++c) {
    EXPECT_EQ(train_counts[c], 9);
    EXPECT_EQ(eval_counts[c], 1);
  }
  Corpus again = MakeCorpus(opt, 10, 7);
  for (std::size_t i = 0; i < corpus.eval.size(); ++i) {
    EXPECT_EQ(corpus.eval[i].seed, again.eval[i].seed);
  }
  EXPECT_THROW(MakeCorpus(opt, 1, 7), ValidationError);
}

TEST(SynthTest, SaveAndLoadCorpus) {
  SynthOptions opt;
  Corpus corpus = MakeCorpus(opt, 2, 3);
  const std::string dir = ::testing::TempDir() + "/synth_corpus";
  SaveCorpus(dir, corpus);
  Corpus back = LoadCorpus(dir);
  ASSERT_EQ(back.train.size(), corpus.train.size());
  ASSERT_EQ(back.eval.size(), corpus.eval.size());
  EXPECT_TRUE(back.train[0].motion == corpus.train[0].motion);
  EXPECT_EQ(back.train[0].envelope, corpus.train[0].envelope);
  EXPECT_EQ(back.seed, 3u);
}

}  // namespace
}  // namespace angie::synth
