#include "angie/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "angie/audio.hpp"
#include "angie/errors.hpp"
#include "angie/nn/checkpoint.hpp"

namespace angie::pipeline {

namespace fs = std::filesystem;
using motion::MotionSequence;
using nlohmann::json;

namespace {

// Offsets that give every stage its own random stream from one seed.
enum SeedSlot : std::uint64_t {
  kVqInit = 1, kVqTrain, kGptInit, kGptTrain, kRefineInit, kRefineTrain, kFeatureInit,
  kFeatureTrain, kDiversity = 100
};

std::uint64_t StageSeed(const PipelineConfig& cfg, SeedSlot slot) { return cfg.seed + slot; }

double SecondsSince(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void RefuseOverwrite(const std::string& path, bool force) {
  if (fs::exists(path) && !force) {
    throw UsageError(fmt::format("{} already exists; pass --force to overwrite it", path));
  }
}

void RequireCheckpoint(const PipelineConfig& cfg, const std::string& stage,
                       const std::string& command) {
  const std::string path = CheckpointPath(cfg, stage);
  if (!fs::exists(path)) {
    throw UsageError(fmt::format("missing {} checkpoint {}; run '{}' first", stage, path, command));
  }
}

void WriteEffectiveConfig(const PipelineConfig& cfg) {
  std::ofstream out(cfg.work_dir + "/effective_config.txt");
  out << "# digest " << cfg.Digest() << "\n" << cfg.Dump();
}

void SaveStageCheckpoint(const PipelineConfig& cfg, const std::string& stage,
                         nn::Checkpoint ckpt, const json& meta) {
  ckpt.meta = meta;
  nn::SaveCheckpoint(CheckpointPath(cfg, stage), ckpt);
}

void PrepareWorkDir(const PipelineConfig& cfg) {
  cfg.Validate();
  fs::create_directories(cfg.work_dir);
}

}  // namespace

StageLock::StageLock(const std::string& work_dir, const std::string& stage)
    : path_(work_dir + "/lock") {
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw UsageError(fmt::format(
          "{} is locked by another stage; remove the lock file if no stage is running", path_));
    }
    throw ValidationError(fmt::format("cannot create {}: {}", path_, std::strerror(errno)));
  }
  const std::string text = fmt::format("{} {}\n", ::getpid(), stage);
  const ssize_t written = ::write(fd, text.data(), text.size());
  ::close(fd);
  if (written != static_cast<ssize_t>(text.size())) {
    ::unlink(path_.c_str());
    throw ValidationError("cannot write " + path_);
  }
}

StageLock::~StageLock() { ::unlink(path_.c_str()); }

std::string CheckpointPath(const PipelineConfig& cfg, const std::string& stage) {
  return cfg.work_dir + "/" + stage + ".ckpt";
}

void AppendManifest(const PipelineConfig& cfg, const StageResult& result,
                    const std::vector<std::string>& inputs) {
  json record;
  record["stage"] = result.stage;
  record["config_digest"] = cfg.Digest();
  record["preset"] = cfg.preset;
  record["seed"] = cfg.seed;
  json in = json::object();
  for (const auto& path : inputs) in[path] = config::FileSha256(path);
  record["inputs"] = in;
  json out = json::object();
  if (!result.artifact.empty() && fs::is_regular_file(result.artifact)) {
    out[result.artifact] = config::FileSha256(result.artifact);
  }
  record["outputs"] = out;
  record["metrics"] = result.metrics;
  record["wall_seconds"] = result.seconds;
  std::ofstream manifest(cfg.work_dir + "/manifest.jsonl", std::ios::app);
  if (!manifest) throw ValidationError("cannot append to " + cfg.work_dir + "/manifest.jsonl");
  manifest << record.dump() << "\n";
}

std::vector<json> ReadManifest(const std::string& work_dir) {
  std::ifstream in(work_dir + "/manifest.jsonl");
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

vq::VqModel LoadVq(const PipelineConfig& cfg) {
  RequireCheckpoint(cfg, "vq", "train-vq");
  vq::VqModel model(nn::LoadCheckpoint(CheckpointPath(cfg, "vq")));
  if (model.config().ToJson() != cfg.vq.ToJson()) {
    throw ValidationError("vq.ckpt was trained with a different VQ configuration; rerun "
                          "train-vq with --force");
  }
  return model;
}

gpt::GptModel LoadGpt(const PipelineConfig& cfg) {
  RequireCheckpoint(cfg, "gpt", "train-gpt");
  gpt::GptModel model(nn::LoadCheckpoint(CheckpointPath(cfg, "gpt")));
  if (model.config().ToJson() != cfg.GptModelConfig().ToJson()) {
    throw ValidationError("gpt.ckpt was trained with a different GPT configuration; rerun "
                          "train-gpt with --force");
  }
  return model;
}

refine::RefineModel LoadRefine(const PipelineConfig& cfg) {
  RequireCheckpoint(cfg, "refine", "train-refine");
  refine::RefineModel model(nn::LoadCheckpoint(CheckpointPath(cfg, "refine")));
  if (model.config().ToJson() != cfg.refine.ToJson()) {
    throw ValidationError("refine.ckpt was trained with a different refinement configuration; "
                          "rerun train-refine with --force");
  }
  return model;
}

synth::Corpus LoadCorpus(const PipelineConfig& cfg) {
  if (!fs::exists(cfg.corpus_dir + "/manifest.tsv")) {
    throw UsageError(fmt::format("no corpus in {}; run 'make-corpus' first", cfg.corpus_dir));
  }
  synth::Corpus corpus = synth::LoadCorpus(cfg.corpus_dir);
  if (corpus.options.regions != cfg.corpus.regions || corpus.options.fps != cfg.corpus.fps) {
    throw ValidationError(fmt::format(
        "corpus in {} has {} regions at {} fps but the configuration expects {} at {}",
        cfg.corpus_dir, corpus.options.regions, corpus.options.fps, cfg.corpus.regions,
        cfg.corpus.fps));
  }
  return corpus;
}

nn::RowMat ClipOnsetFeatures(const PipelineConfig& cfg, const synth::SynthClip& clip) {
  const int frames = clip.motion.frames();
  if (cfg.onset_dir.empty()) {
    return audio::BuiltinOnsetFeatures(clip.audio, frames, clip.motion.fps());
  }
  const std::string path = cfg.onset_dir + "/" + clip.name + ".onset";
  const audio::OnsetTrack track = audio::LoadOnsetFile(path);
  if (track.frames < frames) {
    throw ValidationError(
        fmt::format("{} has {} frames but the clip has {}", path, track.frames, frames));
  }
  return track.Matrix().topRows(frames);
}

MotionSequence SliceFrames(const MotionSequence& seq, int start, int frames) {
  if (start < 0 || frames < 1 || start + frames > seq.frames()) {
    throw ValidationError(fmt::format("frames [{}, {}) outside a {}-frame sequence", start,
                                      start + frames, seq.frames()));
  }
  MotionSequence out(frames, seq.regions(), seq.fps());
  for (int t = 0; t < frames; ++t) {
    for (int k = 0; k < seq.regions(); ++k) out.at(t, k) = seq.at(start + t, k);
  }
  return out;
}

std::vector<gpt::GptExample> MakeGptExamples(const PipelineConfig& cfg, const vq::VqModel& vq,
                                             const std::vector<synth::SynthClip>& clips) {
  if (vq.streams().size() != 2) {
    throw UsageError(fmt::format("the GPT stage needs a two-stream quantization mode; {} "
                                 "is a VQ-only ablation",
                                 vq::ModeName(vq.config().mode)));
  }
  const int factor = vq.config().DownsampleFactor();
  std::vector<gpt::GptExample> out;
  for (const auto& clip : clips) {
    const nn::RowMat onset = ClipOnsetFeatures(cfg, clip);
    for (int s = 0; s + cfg.clip_length <= clip.motion.frames(); s += cfg.clip_stride) {
      const auto codes = vq.EncodeIndices(SliceFrames(clip.motion, s, cfg.clip_length));
      gpt::GptExample e;
      e.mu_codes = codes[0].indices;
      e.l_codes = codes[1].indices;
      e.audio = gpt::PoolRows(onset.middleRows(s, cfg.clip_length), factor);
      out.push_back(std::move(e));
    }
  }
  return out;
}

std::vector<refine::RefineExample> MakeRefineExamples(const PipelineConfig& cfg,
                                                      const vq::VqModel& vq,
                                                      const std::vector<synth::SynthClip>& clips) {
  (void)cfg;
  std::vector<refine::RefineExample> out;
  for (const auto& clip : clips) {
    std::vector<std::vector<int>> codes;
    for (auto& stream : vq.EncodeIndices(clip.motion)) codes.push_back(std::move(stream.indices));
    refine::RefineExample e;
    e.pattern = vq.DecodeIndices(codes, clip.motion.Frame(0), clip.motion.fps()).sequence;
    e.target = clip.motion;
    e.mfcc = audio::MfccWindows(audio::Mfcc(clip.audio), clip.motion.frames(), clip.motion.fps());
    out.push_back(std::move(e));
  }
  return out;
}

VqHeldOutMetrics EvaluateVq(const vq::VqModel& model,
                            std::span<const MotionSequence> sequences) {
  VqHeldOutMetrics m;
  double se = 0.0, sum = 0.0, sum_sq = 0.0;
  long count = 0;
  std::vector<int> first_stream;
  for (const auto& seq : sequences) {
    std::vector<std::vector<int>> codes;
    for (auto& stream : model.EncodeIndices(seq)) codes.push_back(std::move(stream.indices));
    first_stream.insert(first_stream.end(), codes[0].begin(), codes[0].end());
    const vq::DecodedMotion decoded = model.DecodeIndices(codes, seq.Frame(0), seq.fps());
    m.invalid_covariances += decoded.invalid_covariances;
    m.frames += decoded.sequence.frames();
    const auto truth = motion::ToRelative(seq);
    const auto rec = motion::ToRelative(decoded.sequence);
    for (std::size_t i = 0; i < truth.d_mu.size(); ++i) {
      const double d = rec.d_mu[i] - truth.d_mu[i];
      se += d * d;
      sum += truth.d_mu[i];
      sum_sq += truth.d_mu[i] * truth.d_mu[i];
      ++count;
    }
  }
  if (count == 0) throw ValidationError("VQ evaluation needs sequences of at least two frames");
  m.dmu_mse = se / count;
  const double mean = sum / count;
  m.dmu_variance = sum_sq / count - mean * mean;
  m.perplexity = vq::Perplexity(first_stream, model.config().codebook_size);
  return m;
}

StageResult MakeCorpusStage(const PipelineConfig& cfg, bool force) {
  PrepareWorkDir(cfg);
  StageLock lock(cfg.work_dir, "make-corpus");
  const std::string manifest = cfg.corpus_dir + "/manifest.tsv";
  RefuseOverwrite(manifest, force);
  const auto start = std::chrono::steady_clock::now();
  if (force && fs::exists(cfg.corpus_dir)) {
    for (const auto& entry : fs::directory_iterator(cfg.corpus_dir)) {
      const auto ext = entry.path().extension();
      if (ext == ".motion" || ext == ".wav" || ext == ".env" || ext == ".tsv") fs::remove(entry);
    }
  }
  const synth::Corpus corpus = synth::MakeCorpus(cfg.corpus, cfg.clips_per_class, cfg.seed);
  synth::SaveCorpus(cfg.corpus_dir, corpus);
  int clipped = 0;
  for (const auto* split : {&corpus.train, &corpus.eval}) {
    for (const auto& c : *split) clipped += c.clipped_frames;
  }
  StageResult r{"make-corpus", manifest, {}, SecondsSince(start)};
  r.metrics = {{"train_clips", corpus.train.size()},
               {"eval_clips", corpus.eval.size()},
               {"clipped_frames", clipped}};
  WriteEffectiveConfig(cfg);
  AppendManifest(cfg, r, {});
  return r;
}

StageResult TrainVqStage(const PipelineConfig& cfg, bool force) {
  PrepareWorkDir(cfg);
  StageLock lock(cfg.work_dir, "train-vq");
  RefuseOverwrite(CheckpointPath(cfg, "vq"), force);
  const synth::Corpus corpus = LoadCorpus(cfg);
  const auto start = std::chrono::steady_clock::now();
  const auto train = synth::Motions(corpus.train);
  const auto held_out = synth::Motions(corpus.eval);
  vq::VqModel model(cfg.vq, StageSeed(cfg, kVqInit));
  model.FitNormalization(train);
  const auto clips = vq::SampleClips(train, cfg.clip_length, cfg.clip_stride);
  vq::VqTrainOptions opt;
  opt.steps = cfg.vq_train.steps;
  opt.batch_size = cfg.vq_train.batch_size;
  opt.lr = cfg.vq_train.lr;
  opt.clip_length = cfg.clip_length;
  opt.clip_stride = cfg.clip_stride;
  opt.seed = StageSeed(cfg, kVqTrain);
  const vq::VqTrainReport report = vq::TrainVq(model, clips, opt);
  // Evaluate what later stages will load.
  nn::RoundToFloat32(model.params());
  const VqHeldOutMetrics m = EvaluateVq(model, held_out);
  StageResult r{"train-vq", CheckpointPath(cfg, "vq"), {}, SecondsSince(start)};
  r.metrics = {{"final_loss", report.loss_history.empty() ? 0.0 : report.loss_history.back()},
               {"revived_codes", report.revived_codes},
               {"heldout_dmu_mse", m.dmu_mse},
               {"heldout_dmu_variance", m.dmu_variance},
               {"heldout_mse_ratio", m.dmu_variance > 0 ? m.dmu_mse / m.dmu_variance : 0.0},
               {"heldout_perplexity", m.perplexity},
               {"heldout_invalid_covariances", m.invalid_covariances}};
  SaveStageCheckpoint(cfg, "vq", model.ToCheckpoint(cfg.Digest()), r.metrics);
  WriteEffectiveConfig(cfg);
  AppendManifest(cfg, r, {cfg.corpus_dir + "/manifest.tsv"});
  return r;
}

StageResult TrainGptStage(const PipelineConfig& cfg, bool force) {
  PrepareWorkDir(cfg);
  StageLock lock(cfg.work_dir, "train-gpt");
  RefuseOverwrite(CheckpointPath(cfg, "gpt"), force);
  const vq::VqModel vq = LoadVq(cfg);
  const synth::Corpus corpus = LoadCorpus(cfg);
  const auto start = std::chrono::steady_clock::now();
  auto train = MakeGptExamples(cfg, vq, corpus.train);
  auto held_out = MakeGptExamples(cfg, vq, corpus.eval);
  gpt::GptModel model(cfg.GptModelConfig(), StageSeed(cfg, kGptInit));
  std::vector<nn::RowMat> pooled;
  for (const auto& e : train) pooled.push_back(e.audio);
  model.FitAudioNormalization(pooled);
  for (auto* set : {&train, &held_out}) {
    for (auto& e : *set) e.audio = model.NormalizeAudio(e.audio);
  }
  gpt::GptTrainOptions opt;
  opt.steps = cfg.gpt_train.steps;
  opt.batch_size = cfg.gpt_train.batch_size;
  opt.lr = cfg.gpt_train.lr;
  opt.seed = StageSeed(cfg, kGptTrain);
  const gpt::GptTrainReport report = gpt::TrainGpt(model, train, opt);
  nn::RoundToFloat32(model.params());
  StageResult r{"train-gpt", CheckpointPath(cfg, "gpt"), {}, SecondsSince(start)};
  r.metrics = {{"final_loss", report.loss_history.empty() ? 0.0 : report.loss_history.back()},
               {"train_accuracy", gpt::NextCodeAccuracy(model, train)},
               {"heldout_accuracy", held_out.empty() ? 0.0 : gpt::NextCodeAccuracy(model, held_out)}};
  SaveStageCheckpoint(cfg, "gpt", model.ToCheckpoint(cfg.Digest()), r.metrics);
  WriteEffectiveConfig(cfg);
  AppendManifest(cfg, r, {cfg.corpus_dir + "/manifest.tsv", CheckpointPath(cfg, "vq")});
  return r;
}

StageResult TrainRefineStage(const PipelineConfig& cfg, bool force) {
  PrepareWorkDir(cfg);
  StageLock lock(cfg.work_dir, "train-refine");
  RefuseOverwrite(CheckpointPath(cfg, "refine"), force);
  const vq::VqModel vq = LoadVq(cfg);
  RequireCheckpoint(cfg, "gpt", "train-gpt");
  const synth::Corpus corpus = LoadCorpus(cfg);
  const auto start = std::chrono::steady_clock::now();
  const auto train = MakeRefineExamples(cfg, vq, corpus.train);
  const auto held_out = MakeRefineExamples(cfg, vq, corpus.eval);
  refine::RefineModel model(cfg.refine, StageSeed(cfg, kRefineInit));
  std::vector<MotionSequence> patterns;
  std::vector<nn::RowMat> windows;
  for (const auto& e : train) {
    patterns.push_back(e.pattern);
    windows.push_back(e.mfcc);
  }
  model.FitNormalization(patterns, windows);
  refine::RefineTrainOptions opt;
  opt.steps = cfg.refine_train.steps;
  opt.batch_size = cfg.refine_train.batch_size;
  opt.lr = cfg.refine_train.lr;
  opt.seed = StageSeed(cfg, kRefineTrain);
  const refine::RefineTrainReport report = refine::TrainRefine(model, train, opt);
  nn::RoundToFloat32(model.params());
  double baseline = 0.0, refined = 0.0;
  for (const auto& e : held_out) {
    baseline += refine::ResidualLoss(e.target, e.pattern);
    refined += refine::ResidualLoss(e.target, model.Refine(e.pattern, e.mfcc));
  }
  StageResult r{"train-refine", CheckpointPath(cfg, "refine"), {}, SecondsSince(start)};
  r.metrics = {{"final_loss", report.loss_history.empty() ? 0.0 : report.loss_history.back()},
               {"heldout_pattern_loss", baseline},
               {"heldout_refined_loss", refined},
               {"heldout_ratio", baseline > 0 ? refined / baseline : 0.0}};
  SaveStageCheckpoint(cfg, "refine", model.ToCheckpoint(cfg.Digest()), r.metrics);
  WriteEffectiveConfig(cfg);
  AppendManifest(cfg, r,
                 {cfg.corpus_dir + "/manifest.tsv", CheckpointPath(cfg, "vq"),
                  CheckpointPath(cfg, "gpt")});
  return r;
}

std::vector<int> RestCodes(const vq::VqModel& vq, std::span<const motion::RegionMotionFrame> init,
                           int clip_length, double fps) {
  MotionSequence rest(clip_length, static_cast<int>(init.size()), fps);
  for (int t = 0; t < clip_length; ++t) {
    for (int k = 0; k < rest.regions(); ++k) rest.at(t, k) = init[k];
  }
  std::vector<int> out;
  for (const auto& stream : vq.EncodeIndices(rest)) out.push_back(stream.indices.front());
  return out;
}

GenerateResult Generate(const PipelineConfig& cfg, const vq::VqModel& vq,
                        const gpt::GptModel& gpt, const refine::RefineModel* refiner,
                        const GenerateRequest& request) {
  request.audio.Validate();
  if (request.init.frames() < 1) throw ValidationError("generation needs an initial frame");
  if (request.init.regions() != vq.config().regions) {
    throw ValidationError(fmt::format("initial frame has {} regions, the models expect {}",
                                      request.init.regions(), vq.config().regions));
  }
  for (const auto& f : request.init.Frame(0)) f.Validate();
  if (vq.streams().size() != 2) {
    throw UsageError("generation needs a two-stream quantization mode");
  }
  const double fps = cfg.corpus.fps;
  const int factor = vq.config().DownsampleFactor();
  int available = audio::VideoFramesFor(request.audio, fps);
  if (!cfg.onset_dir.empty()) {
    if (!request.onset) throw UsageError("paths.onset is set; pass the clip's onset file");
    available = std::min<int>(available, static_cast<int>(request.onset->rows()));
  }
  const int feasible = available / factor * factor;
  if (feasible < factor) {
    throw ValidationError(fmt::format("audio covers {} frames; at least {} are needed",
                                      available, factor));
  }
  const int frames = request.frames == 0 ? feasible : request.frames;
  if (frames % factor != 0 || frames < factor) {
    throw ValidationError(fmt::format("length must be a positive multiple of {}", factor));
  }
  if (frames > feasible) {
    throw ValidationError(fmt::format(
        "audio is too short for {} frames; the longest feasible length is {}", frames, feasible));
  }
  const nn::RowMat onset =
      request.onset ? nn::RowMat(request.onset->topRows(frames))
                    : audio::BuiltinOnsetFeatures(request.audio, frames, fps);
  const nn::RowMat chunks = gpt.NormalizeAudio(gpt::PoolRows(onset, factor));
  const auto init = request.init.Frame(0);
  const std::vector<int> rest = RestCodes(vq, init, cfg.clip_length, fps);
  GenerateResult out;
  std::tie(out.mu_codes, out.l_codes) =
      gpt.Generate(chunks, {rest[0]}, {rest[1]}, frames / factor - 1, request.sampling);
  const vq::DecodedMotion decoded = vq.DecodeIndices({out.mu_codes, out.l_codes}, init, fps);
  out.pattern = decoded.sequence;
  if (request.refine) {
    if (!refiner) throw UsageError("refinement requested without a refinement model");
    const nn::RowMat windows = audio::MfccWindows(audio::Mfcc(request.audio), frames, fps);
    out.motion = refiner->Refine(out.pattern, windows);
  } else {
    out.motion = out.pattern;
  }
  out.motion.Validate();
  return out;
}

StageResult GenerateStage(const PipelineConfig& cfg, const GenerateRequest& request,
                          const std::string& output) {
  PrepareWorkDir(cfg);
  const auto start = std::chrono::steady_clock::now();
  const vq::VqModel vq = LoadVq(cfg);
  const gpt::GptModel gpt = LoadGpt(cfg);
  std::optional<refine::RefineModel> refiner;
  if (request.refine) refiner.emplace(LoadRefine(cfg));
  const GenerateResult g = Generate(cfg, vq, gpt, refiner ? &*refiner : nullptr, request);
  motion::WriteMotionFile(output, g.motion);
  StageResult r{"generate", output, {}, SecondsSince(start)};
  r.metrics = {{"frames", g.motion.frames()}, {"refined", request.refine}};
  std::vector<std::string> inputs{CheckpointPath(cfg, "vq"), CheckpointPath(cfg, "gpt")};
  if (request.refine) inputs.push_back(CheckpointPath(cfg, "refine"));
  AppendManifest(cfg, r, inputs);
  return r;
}

json Evaluate(const PipelineConfig& cfg, const metrics::FeatureExtractor& extractor,
              const EvalInput& input) {
  if (input.generated.empty()) throw ValidationError("evaluation needs generated sequences");
  if (input.reference.empty()) throw ValidationError("evaluation needs reference sequences");
  const nn::RowMat features = extractor.Features(input.generated);
  json report;
  report["config_digest"] = cfg.Digest();
  report["generated_sequences"] = input.generated.size();
  report["reference_sequences"] = input.reference.size();
  report["fgd"] = metrics::Fgd(extractor, input.reference, input.generated);

  double bc_sum = 0.0;
  int bc_count = 0;
  for (std::size_t i = 0; i < input.generated.size() && i < input.audio.size(); ++i) {
    if (!input.audio[i]) continue;
    const auto beats = audio::ComputeOnsetEnvelope(*input.audio[i]).peak_times;
    if (beats.empty()) continue;
    bc_sum += metrics::BeatConsistency(beats, input.generated[i], cfg.bc_sigma);
    ++bc_count;
  }
  report["bc"] = bc_count > 0 ? json(bc_sum / bc_count) : json(nullptr);
  report["bc_sequences"] = bc_count;

  if (features.rows() >= 2) {
    std::vector<std::uint64_t> seeds;
    for (int s = 0; s < cfg.diversity_seeds; ++s) seeds.push_back(StageSeed(cfg, kDiversity) + s);
    const auto div = metrics::DiversityOverSeeds(features, cfg.diversity_pairs, seeds);
    report["diversity"] = {{"mean", div.mean},
                           {"std", div.std},
                           {"per_seed", div.per_seed},
                           {"seeds", div.seeds},
                           {"pairs", cfg.diversity_pairs}};
  } else {
    report["diversity"] = nullptr;
  }
  return report;
}

metrics::FeatureExtractor LoadOrTrainFeatures(const PipelineConfig& cfg) {
  const std::string path = CheckpointPath(cfg, "features");
  if (fs::exists(path)) {
    metrics::FeatureExtractor model(nn::LoadCheckpoint(path));
    if (model.config().ToJson() != cfg.features.ToJson()) {
      throw ValidationError("features.ckpt was trained with a different feature configuration; "
                            "delete it to retrain");
    }
    return model;
  }
  spdlog::info("no feature extractor in {}; training one on the corpus", cfg.work_dir);
  const auto start = std::chrono::steady_clock::now();
  const synth::Corpus corpus = LoadCorpus(cfg);
  const auto train = synth::Motions(corpus.train);
  metrics::FeatureExtractor model(cfg.features, StageSeed(cfg, kFeatureInit));
  model.FitNormalization(train);
  metrics::FeatureTrainOptions opt;
  opt.steps = cfg.feature_train.steps;
  opt.batch_size = cfg.feature_train.batch_size;
  opt.lr = cfg.feature_train.lr;
  opt.seed = StageSeed(cfg, kFeatureTrain);
  const auto history = metrics::TrainFeatureExtractor(model, train, opt);
  nn::RoundToFloat32(model.params());
  StageResult r{"train-features", path, {}, SecondsSince(start)};
  r.metrics = {{"final_loss", history.empty() ? 0.0 : history.back()}};
  SaveStageCheckpoint(cfg, "features", model.ToCheckpoint(cfg.Digest()), r.metrics);
  AppendManifest(cfg, r, {cfg.corpus_dir + "/manifest.tsv"});
  return model;
}

StageResult EvalStage(const PipelineConfig& cfg, std::optional<EvalInput> input, bool refine) {
  PrepareWorkDir(cfg);
  StageLock lock(cfg.work_dir, "eval");
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::string> inputs;
  if (!input) {
    const vq::VqModel vq = LoadVq(cfg);
    const gpt::GptModel gpt = LoadGpt(cfg);
    std::optional<refine::RefineModel> refiner;
    if (refine) refiner.emplace(LoadRefine(cfg));
    const synth::Corpus corpus = LoadCorpus(cfg);
    const std::string dir = cfg.work_dir + (refine ? "/generated" : "/generated_pattern_only");
    fs::create_directories(dir);
    input.emplace();
    for (const auto& clip : corpus.eval) {
      GenerateRequest req;
      req.audio = clip.audio;
      req.init = clip.motion;
      req.frames = clip.motion.frames() / cfg.vq.DownsampleFactor() * cfg.vq.DownsampleFactor();
      req.refine = refine;
      req.sampling.seed = cfg.seed;
      if (!cfg.onset_dir.empty()) req.onset = ClipOnsetFeatures(cfg, clip);
      const GenerateResult g = Generate(cfg, vq, gpt, refiner ? &*refiner : nullptr, req);
      motion::WriteMotionFile(dir + "/" + clip.name + ".motion", g.motion);
      input->generated.push_back(g.motion);
      input->audio.emplace_back(clip.audio);
      input->reference.push_back(clip.motion);
    }
    inputs = {CheckpointPath(cfg, "vq"), CheckpointPath(cfg, "gpt")};
    if (refine) inputs.push_back(CheckpointPath(cfg, "refine"));
  }
  const metrics::FeatureExtractor extractor = LoadOrTrainFeatures(cfg);
  inputs.push_back(CheckpointPath(cfg, "features"));
  StageResult r{"eval", cfg.work_dir + "/eval_report.json", {}, 0.0};
  r.metrics = Evaluate(cfg, extractor, *input);
  r.metrics["refined"] = refine;
  r.seconds = SecondsSince(start);
  std::ofstream(r.artifact) << r.metrics.dump(2) << "\n";
  AppendManifest(cfg, r, inputs);
  return r;
}

MotionSequence InspectCodebook(const vq::VqModel& vq, int stream, int entry,
                               std::span<const motion::RegionMotionFrame> init, int chunks,
                               int clip_length, double fps) {
  const int streams = static_cast<int>(vq.streams().size());
  if (stream < 0 || stream >= streams) {
    throw ValidationError(fmt::format("stream {} out of range [0, {})", stream, streams));
  }
  if (entry < 0 || entry >= vq.config().codebook_size) {
    throw ValidationError(fmt::format("codebook entry {} out of range [0, {})", entry,
                                      vq.config().codebook_size));
  }
  if (chunks < 1) throw ValidationError("inspection needs at least one chunk");
  const std::vector<int> rest = RestCodes(vq, init, clip_length, fps);
  std::vector<std::vector<int>> codes;
  for (int s = 0; s < streams; ++s) {
    codes.emplace_back(static_cast<std::size_t>(chunks), s == stream ? entry : rest[s]);
  }
  return vq.DecodeIndices(codes, init, fps).sequence;
}

std::vector<std::string> ExpandMotionPaths(const std::string& path) {
  if (fs::is_directory(path)) {
    std::vector<std::string> out;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.path().extension() == ".motion") out.push_back(entry.path().string());
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) throw ValidationError("no .motion files in " + path);
    return out;
  }
  if (!fs::exists(path)) throw ValidationError("no such file or directory: " + path);
  return {path};
}

}  // namespace angie::pipeline
