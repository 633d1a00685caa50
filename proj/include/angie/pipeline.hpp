#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "angie/config.hpp"
#include "angie/gpt.hpp"
#include "angie/metrics.hpp"
#include "angie/motion.hpp"
#include "angie/refine.hpp"
#include "angie/synth.hpp"
#include "angie/vq.hpp"

// Staged training, generation and evaluation over a working directory:
//   <work>/lock            held while a stage runs
//   <work>/manifest.jsonl  one JSON record per finished stage, append-only
//   <work>/{vq,gpt,refine,features}.ckpt
namespace angie::pipeline {

using config::PipelineConfig;

// Exclusive per-directory lock created with O_EXCL; removed on destruction.
class StageLock {
 public:
  StageLock(const std::string& work_dir, const std::string& stage);
  ~StageLock();
  StageLock(const StageLock&) = delete;
  StageLock& operator=(const StageLock&) = delete;

 private:
  std::string path_;
};

struct StageResult {
  std::string stage;
  std::string artifact;  // main output path
  nlohmann::json metrics = nlohmann::json::object();
  double seconds = 0.0;
};

std::string CheckpointPath(const PipelineConfig& cfg, const std::string& stage);
void AppendManifest(const PipelineConfig& cfg, const StageResult& result,
                    const std::vector<std::string>& inputs);
std::vector<nlohmann::json> ReadManifest(const std::string& work_dir);

// Prerequisite checkpoints, checked against the current configuration.
vq::VqModel LoadVq(const PipelineConfig& cfg);
gpt::GptModel LoadGpt(const PipelineConfig& cfg);
refine::RefineModel LoadRefine(const PipelineConfig& cfg);

synth::Corpus LoadCorpus(const PipelineConfig& cfg);

// Per-video-frame onset features of a clip: the built-in 13-dim feature,
// or the 426-dim file `<paths.onset>/<name>.onset` when paths.onset is set.
nn::RowMat ClipOnsetFeatures(const PipelineConfig& cfg, const synth::SynthClip& clip);

motion::MotionSequence SliceFrames(const motion::MotionSequence& seq, int start, int frames);

// Clip-length windows of every clip (stride vq.clip_stride) with their codes
// and pooled, unnormalized audio.
std::vector<gpt::GptExample> MakeGptExamples(const PipelineConfig& cfg, const vq::VqModel& vq,
                                             const std::vector<synth::SynthClip>& clips);

// Pattern decoded from each clip's own codes, integrated from its first frame.
std::vector<refine::RefineExample> MakeRefineExamples(const PipelineConfig& cfg,
                                                      const vq::VqModel& vq,
                                                      const std::vector<synth::SynthClip>& clips);

struct VqHeldOutMetrics {
  double dmu_mse = 0.0;       // decoded vs true frame-to-frame mu steps
  double dmu_variance = 0.0;  // variance of the true steps
  double perplexity = 0.0;    // code usage of the first stream
  int invalid_covariances = 0;
  long frames = 0;
};

VqHeldOutMetrics EvaluateVq(const vq::VqModel& model,
                            std::span<const motion::MotionSequence> sequences);

StageResult MakeCorpusStage(const PipelineConfig& cfg, bool force);
StageResult TrainVqStage(const PipelineConfig& cfg, bool force);
StageResult TrainGptStage(const PipelineConfig& cfg, bool force);
StageResult TrainRefineStage(const PipelineConfig& cfg, bool force);

// Codes of a motionless clip at `init`, one per stream; the starting point of
// generation and the filler for streams not under inspection.
std::vector<int> RestCodes(const vq::VqModel& vq, std::span<const motion::RegionMotionFrame> init,
                           int clip_length, double fps);

struct GenerateRequest {
  audio::Waveform audio;
  std::optional<nn::RowMat> onset;  // per video frame; required with paths.onset
  motion::MotionSequence init;      // frame 0 is the initial frame
  int frames = 0;                   // 0: longest length the audio covers
  bool refine = true;
  gpt::SampleOptions sampling;
};

struct GenerateResult {
  motion::MotionSequence pattern;
  motion::MotionSequence motion;  // refined unless refine = false
  std::vector<int> mu_codes;
  std::vector<int> l_codes;
};

GenerateResult Generate(const PipelineConfig& cfg, const vq::VqModel& vq,
                        const gpt::GptModel& gpt, const refine::RefineModel* refiner,
                        const GenerateRequest& request);

// Loads the checkpoints and writes the motion file.
StageResult GenerateStage(const PipelineConfig& cfg, const GenerateRequest& request,
                          const std::string& output);

struct EvalInput {
  std::vector<motion::MotionSequence> generated;
  std::vector<std::optional<audio::Waveform>> audio;  // paired with generated
  std::vector<motion::MotionSequence> reference;
};

// FGD, BC and Diversity. `extractor` defines the feature space.
nlohmann::json Evaluate(const PipelineConfig& cfg, const metrics::FeatureExtractor& extractor,
                        const EvalInput& input);

// Loads features.ckpt, training and saving it first if absent.
metrics::FeatureExtractor LoadOrTrainFeatures(const PipelineConfig& cfg);

// With no explicit sets, generates one motion per held-out clip (into
// <work>/generated) and compares against the held-out motions.
StageResult EvalStage(const PipelineConfig& cfg, std::optional<EvalInput> input, bool refine);

// Decodes `chunks` repetitions of one codebook entry of `stream` from the
// initial frame; other streams hold their rest code.
motion::MotionSequence InspectCodebook(const vq::VqModel& vq, int stream, int entry,
                                       std::span<const motion::RegionMotionFrame> init,
                                       int chunks, int clip_length, double fps);

// Motion files of a directory (sorted) or the file itself.
std::vector<std::string> ExpandMotionPaths(const std::string& path);

}  // namespace angie::pipeline
