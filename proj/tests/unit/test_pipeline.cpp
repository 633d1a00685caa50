#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <fmt/format.h>
#include <gtest/gtest.h>

#include "angie/config.hpp"
#include "angie/errors.hpp"
#include "angie/nn/checkpoint.hpp"
#include "angie/pipeline.hpp"
#include "angie/render.hpp"

namespace angie::pipeline {
namespace {

namespace fs = std::filesystem;
using motion::MotionSequence;

TEST(ConfigTest, PresetsCarryTheirScales) {
  const PipelineConfig desk = PipelineConfig::Desk();
  EXPECT_EQ(desk.corpus.regions, 4);
  EXPECT_EQ(desk.vq.codebook_size, 32);
  EXPECT_EQ(desk.vq.width, 32);
  EXPECT_EQ(desk.gpt.layers, 4);
  EXPECT_EQ(desk.gpt.channels, 128);
  EXPECT_EQ(desk.gpt.heads, 4);
  EXPECT_NO_THROW(desk.Validate());

  const PipelineConfig paper = PipelineConfig::Paper();
  EXPECT_EQ(paper.corpus.regions, 20);
  EXPECT_EQ(paper.vq.regions, 20);
  EXPECT_EQ(paper.vq.codebook_size, 512);
  EXPECT_EQ(paper.vq.width, 512);
  EXPECT_DOUBLE_EQ(paper.vq.beta, 0.1);
  EXPECT_EQ(paper.gpt.layers, 12);
  EXPECT_EQ(paper.gpt.channels, 768);
  EXPECT_EQ(paper.gpt.heads, 12);
  EXPECT_DOUBLE_EQ(paper.gpt_train.lr, 3e-5);
  EXPECT_EQ(paper.clip_length, 96);
  EXPECT_EQ(paper.clip_stride, 32);
  EXPECT_EQ(paper.refine.audio.FlattenWidth(), 12288);
  EXPECT_EQ(paper.GptModelConfig().context, 12);
  EXPECT_NO_THROW(paper.Validate());
  EXPECT_THROW(PipelineConfig::ForPreset("huge"), UsageError);
}

TEST(ConfigTest, DumpRoundTripsThroughText) {
  PipelineConfig a = PipelineConfig::Paper();
  a.seed = 42;
  a.vq.mode = vq::QuantizationMode::kNaiveMuCA;
  a.refine.audio.conv_channels = {3, 4, 5, 6, 7};
  PipelineConfig b = PipelineConfig::Desk();
  config::ApplyConfigText(b, a.Dump(), "dump");
  EXPECT_EQ(b.Dump(), a.Dump());
  EXPECT_EQ(b.Digest(), a.Digest());
  for (const auto& key : PipelineConfig::Keys()) EXPECT_EQ(a.Get(key), b.Get(key)) << key;
}

TEST(ConfigTest, DigestTracksEveryValue) {
  const PipelineConfig base = PipelineConfig::Desk();
  PipelineConfig changed = base;
  changed.Set("gpt.dropout", "0.2");
  EXPECT_NE(base.Digest(), changed.Digest());
  EXPECT_EQ(base.Digest(), PipelineConfig::Desk().Digest());
  EXPECT_EQ(base.Digest().size(), 64u);
}

TEST(ConfigTest, Sha256MatchesKnownVectors) {
  EXPECT_EQ(config::Sha256Hex("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(config::Sha256Hex(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(ConfigTest, RejectsUnknownKeysAndMalformedValues) {
  PipelineConfig c;
  EXPECT_THROW(c.Set("vq.codebooksize", "8"), ValidationError);
  EXPECT_THROW(c.Set("vq.codebook_size", "eight"), ValidationError);
  EXPECT_THROW(c.Set("vq.codebook_size", "8.5"), ValidationError);
  EXPECT_THROW(c.Set("gpt.lr", "nan"), ValidationError);
  EXPECT_THROW(c.Set("vq.mode", "sideways"), ValidationError);
  EXPECT_THROW(config::ApplyConfigText(c, "regions 4\n", "f"), ValidationError);
  try {
    config::ApplyConfigText(c, "# comment\n\nseed = 3\nvq.width = x\n", "file.cfg");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("file.cfg:4"), std::string::npos) << e.what();
  }
}

TEST(ConfigTest, ValidationCatchesInconsistentShapes) {
  PipelineConfig c = PipelineConfig::Desk();
  c.clip_length = 100;
  EXPECT_THROW(c.Validate(), ValidationError);
  c = PipelineConfig::Desk();
  c.gpt.heads = 5;
  EXPECT_THROW(c.Validate(), ValidationError);
  c = PipelineConfig::Desk();
  c.features.window = 200;
  EXPECT_THROW(c.Validate(), ValidationError);
  c = PipelineConfig::Desk();
  c.Set("regions", "6");
  EXPECT_EQ(c.refine.regions, 6);
  EXPECT_EQ(c.features.regions, 6);
  EXPECT_NO_THROW(c.Validate());
}

TEST(RenderTest, EllipseAxesFollowTheCovariance) {
  motion::RegionMotionFrame f;
  f.mu = {0.25, 0.5};
  f.L = {0.1, 0.0, 0.05};  // C = diag(0.01, 0.0025)
  const render::Ellipse e = render::CovarianceEllipse(f, {.size = 200});
  EXPECT_NEAR(e.center.x(), 50.0, 1e-12);
  EXPECT_NEAR(e.center.y(), 100.0, 1e-12);
  EXPECT_NEAR(e.axes.x(), 2 * 0.1 * 200, 1e-9);
  EXPECT_NEAR(e.axes.y(), 2 * 0.05 * 200, 1e-9);
  EXPECT_NEAR(std::fmod(std::abs(e.angle_deg), 180.0), 0.0, 1e-9);
  // Rotated by 90 degrees: major axis along y.
  f.L = {0.05, 0.0, 0.1};
  EXPECT_NEAR(std::fmod(std::abs(render::CovarianceEllipse(f).angle_deg), 180.0), 90.0, 1e-9);
}

class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = (fs::temp_directory_path() / fmt::format("angie_pipeline_test_{}", ::getpid())).string();
    fs::remove_all(root_);
    cfg_ = new PipelineConfig(Tiny(root_));
    MakeCorpusStage(*cfg_, false);
    vq_ = new StageResult(TrainVqStage(*cfg_, false));
    TrainGptStage(*cfg_, false);
    TrainRefineStage(*cfg_, false);
  }
  static void TearDownTestSuite() {
    delete cfg_;
    delete vq_;
    fs::remove_all(root_);
  }

  static PipelineConfig Tiny(const std::string& root) {
    PipelineConfig c = PipelineConfig::Desk();
    c.seed = 5;
    c.corpus.classes = 2;
    c.clips_per_class = 3;
    c.vq_train.steps = 20;
    c.gpt.layers = 1;
    c.gpt.channels = 16;
    c.gpt.heads = 2;
    c.gpt_train.steps = 5;
    c.refine.hidden = 8;
    c.refine_train.steps = 3;
    c.features.hidden = 8;
    c.features.dim = 4;
    c.feature_train.steps = 10;
    c.corpus_dir = root + "/corpus";
    c.work_dir = root + "/work";
    return c;
  }

  static GenerateRequest RequestFor(const synth::SynthClip& clip) {
    GenerateRequest r;
    r.audio = clip.audio;
    r.init = clip.motion;
    return r;
  }

  static std::string root_;
  static PipelineConfig* cfg_;
  static StageResult* vq_;
};

std::string PipelineTest::root_;
PipelineConfig* PipelineTest::cfg_ = nullptr;
StageResult* PipelineTest::vq_ = nullptr;

TEST_F(PipelineTest, StagesNeedTheirPrerequisites) {
  PipelineConfig fresh = Tiny(root_ + "/fresh");
  fresh.corpus_dir = cfg_->corpus_dir;
  try {
    TrainGptStage(fresh, false);
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("train-vq"), std::string::npos) << e.what();
  }
  EXPECT_THROW(TrainRefineStage(fresh, false), UsageError);
  fresh.corpus_dir = root_ + "/nowhere";
  try {
    TrainVqStage(fresh, false);
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("make-corpus"), std::string::npos) << e.what();
  }
}

TEST_F(PipelineTest, RefusesToOverwriteWithoutForce) {
  EXPECT_THROW(TrainVqStage(*cfg_, false), UsageError);
  EXPECT_THROW(MakeCorpusStage(*cfg_, false), UsageError);
}

TEST_F(PipelineTest, LockIsExclusive) {
  {
    StageLock lock(cfg_->work_dir, "test");
    EXPECT_THROW(StageLock(cfg_->work_dir, "other"), UsageError);
    EXPECT_THROW(TrainVqStage(*cfg_, true), UsageError);
  }
  EXPECT_NO_THROW(StageLock(cfg_->work_dir, "again"));
}

TEST_F(PipelineTest, ManifestRecordsDigestsAndIsAppendOnly) {
  const auto before = ReadManifest(cfg_->work_dir);
  ASSERT_GE(before.size(), 4u);
  EXPECT_EQ(before[0]["stage"], "make-corpus");
  EXPECT_EQ(before[1]["stage"], "train-vq");
  for (const auto& r : before) EXPECT_EQ(r["config_digest"], cfg_->Digest());
  const std::string vq_path = CheckpointPath(*cfg_, "vq");
  EXPECT_EQ(before[1]["outputs"][vq_path], config::FileSha256(vq_path));
  EXPECT_TRUE(before[2]["inputs"].contains(vq_path));

  const synth::Corpus corpus = LoadCorpus(*cfg_);
  GenerateStage(*cfg_, RequestFor(corpus.eval[0]), root_ + "/manifest_probe.motion");
  const auto after = ReadManifest(cfg_->work_dir);
  ASSERT_EQ(after.size(), before.size() + 1);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(after[i], before[i]);
}

TEST_F(PipelineTest, CheckpointsRejectADifferentConfiguration) {
  PipelineConfig other = *cfg_;
  other.vq.width = 16;
  EXPECT_THROW(LoadVq(other), ValidationError);
  other = *cfg_;
  other.gpt.channels = 32;
  EXPECT_THROW(LoadGpt(other), ValidationError);
}

TEST_F(PipelineTest, VqRerunWithTheSameSeedReproducesTheLoss) {
  PipelineConfig again = *cfg_;
  again.work_dir = root_ + "/rerun";
  const StageResult r = TrainVqStage(again, false);
  EXPECT_EQ(r.metrics["final_loss"], vq_->metrics["final_loss"]);
  // The manifests differ (the digest covers paths.work); the parameters must not.
  const nn::Checkpoint a = nn::LoadCheckpoint(CheckpointPath(again, "vq"));
  const nn::Checkpoint b = nn::LoadCheckpoint(CheckpointPath(*cfg_, "vq"));
  ASSERT_EQ(a.params.entries().size(), b.params.entries().size());
  for (const auto& [name, t] : a.params.entries()) {
    const auto x = t.data();
    const auto y = b.params.Get(name).data();
    ASSERT_EQ(x.size(), y.size()) << name;
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin())) << name;
  }
}

TEST_F(PipelineTest, GeneratedMotionIsValidAndDeterministic) {
  const vq::VqModel vq = LoadVq(*cfg_);
  const gpt::GptModel gpt = LoadGpt(*cfg_);
  const refine::RefineModel refiner = LoadRefine(*cfg_);
  const synth::Corpus corpus = LoadCorpus(*cfg_);
  GenerateRequest req = RequestFor(corpus.eval[0]);
  const GenerateResult a = Generate(*cfg_, vq, gpt, &refiner, req);
  EXPECT_EQ(a.motion.frames(), 96);
  EXPECT_NO_THROW(a.motion.Validate());
  for (int t = 0; t < a.motion.frames(); ++t) {
    for (int k = 0; k < a.motion.regions(); ++k) {
      EXPECT_TRUE(motion::IsSymmetricPositiveDefinite(a.motion.at(t, k).Covariance()));
    }
  }
  const GenerateResult b = Generate(*cfg_, vq, gpt, &refiner, req);
  EXPECT_EQ(motion::FormatMotion(a.motion), motion::FormatMotion(b.motion));
  // The first frame is the requested initial frame.
  for (int k = 0; k < a.pattern.regions(); ++k) {
    EXPECT_EQ(a.pattern.at(0, k).mu, req.init.at(0, k).mu);
  }

  req.refine = false;
  const GenerateResult plain = Generate(*cfg_, vq, gpt, nullptr, req);
  EXPECT_EQ(plain.motion, a.pattern);

  req.frames = 48;
  EXPECT_EQ(Generate(*cfg_, vq, gpt, nullptr, req).motion.frames(), 48);
}

TEST_F(PipelineTest, GenerationChecksTheAudioLength) {
  const vq::VqModel vq = LoadVq(*cfg_);
  const gpt::GptModel gpt = LoadGpt(*cfg_);
  const synth::Corpus corpus = LoadCorpus(*cfg_);
  GenerateRequest req = RequestFor(corpus.eval[0]);
  req.refine = false;
  req.frames = 200;
  try {
    Generate(*cfg_, vq, gpt, nullptr, req);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("longest feasible length is 96"), std::string::npos)
        << e.what();
  }
  req.frames = 0;
  req.audio.samples.clear();
  EXPECT_THROW(Generate(*cfg_, vq, gpt, nullptr, req), ValidationError);
  req.audio.samples.assign(1000, 0.0);  // shorter than one 8-frame chunk
  EXPECT_THROW(Generate(*cfg_, vq, gpt, nullptr, req), ValidationError);
}

TEST_F(PipelineTest, CodebookEntriesArePositionIrrelevant) {
  const vq::VqModel vq = LoadVq(*cfg_);
  const synth::Corpus corpus = LoadCorpus(*cfg_);
  const MotionSequence& a = corpus.train[0].motion;
  const MotionSequence& b = corpus.train[3].motion;
  const MotionSequence one = InspectCodebook(vq, 0, 5, a.Frame(0), 4, 96, 25.0);
  const MotionSequence two = InspectCodebook(vq, 0, 5, b.Frame(0), 4, 96, 25.0);
  EXPECT_EQ(one.frames(), 32);
  const auto ra = motion::ToRelative(one), rb = motion::ToRelative(two);
  ASSERT_EQ(ra.d_mu.size(), rb.d_mu.size());
  double mu_gap = 0.0, l_gap = 0.0;
  for (std::size_t i = 0; i < ra.d_mu.size(); ++i) mu_gap = std::max(mu_gap, std::abs(ra.d_mu[i] - rb.d_mu[i]));
  for (std::size_t i = 0; i < ra.d_l.size(); ++i) l_gap = std::max(l_gap, std::abs(ra.d_l[i] - rb.d_l[i]));
  EXPECT_LT(mu_gap, 1e-12);
  EXPECT_LT(l_gap, 1e-12);

  const MotionSequence other = InspectCodebook(vq, 0, 6, a.Frame(0), 4, 96, 25.0);
  EXPECT_FALSE(other == one);
  EXPECT_THROW(InspectCodebook(vq, 0, 32, a.Frame(0), 4, 96, 25.0), ValidationError);
  EXPECT_THROW(InspectCodebook(vq, 0, -1, a.Frame(0), 4, 96, 25.0), ValidationError);
  EXPECT_THROW(InspectCodebook(vq, 2, 0, a.Frame(0), 4, 96, 25.0), ValidationError);
}

TEST_F(PipelineTest, EvaluatingASetAgainstItself) {
  const synth::Corpus corpus = LoadCorpus(*cfg_);
  EvalInput input;
  input.generated = synth::Motions(corpus.train);
  input.reference = input.generated;
  for (const auto& c : corpus.train) input.audio.emplace_back(c.audio);
  const auto fx = LoadOrTrainFeatures(*cfg_);
  const auto report = Evaluate(*cfg_, fx, input);
  EXPECT_LT(report["fgd"].get<double>(), 1e-3);
  EXPECT_EQ(report["config_digest"], cfg_->Digest());
  EXPECT_EQ(report["diversity"]["per_seed"].size(), 5u);
  EXPECT_TRUE(report["bc"].is_number());
  EXPECT_THROW(Evaluate(*cfg_, fx, EvalInput{}), ValidationError);
}

TEST_F(PipelineTest, EvalStageWritesAReport) {
  const StageResult r = EvalStage(*cfg_, std::nullopt, true);
  EXPECT_TRUE(fs::exists(r.artifact));
  EXPECT_TRUE(r.metrics["fgd"].is_number());
  EXPECT_EQ(ExpandMotionPaths(cfg_->work_dir + "/generated").size(), 2u);
}

TEST_F(PipelineTest, RendersFramesAndAnimation) {
  const synth::Corpus corpus = LoadCorpus(*cfg_);
  const MotionSequence clip = SliceFrames(corpus.train[0].motion, 0, 5);
  const std::string dir = root_ + "/render";
  const std::string video = render::RenderSequence(clip, dir, {.size = 64});
  EXPECT_GT(fs::file_size(video), 0u);
  for (int t = 0; t < 5; ++t) EXPECT_TRUE(fs::exists(fmt::format("{}/frame_{:05d}.png", dir, t)));
}

}  // namespace
}  // namespace angie::pipeline
