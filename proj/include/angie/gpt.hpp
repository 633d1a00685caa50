#pragma once

#include <random>
#include <span>
#include <vector>

#include "angie/nn/checkpoint.hpp"
#include "angie/nn/ops.hpp"
#include "angie/nn/params.hpp"

// Autoregressive transformer over three token segments of equal length n:
// audio tokens, delta-mu codes and delta-L codes. Slot i of the code segments
// holds code i and predicts code i + 1; slot i of the audio segment carries
// the audio of chunk i + 1, the chunk whose codes are being predicted.
namespace angie::gpt {

struct GptConfig {
  int layers = 4;
  int channels = 128;
  int heads = 4;
  double dropout = 0.1;
  int vocab = 32;    // codebook size M of both streams
  int context = 12;  // T'; at most context - 1 slots per segment
  int audio_width = 13;

  int MaxSlots() const { return context - 1; }
  void Validate() const;
  nlohmann::json ToJson() const;
  static GptConfig FromJson(const nlohmann::json& j);
};

// (3n) x (3n) additive mask: a 3 x 3 grid of lower-triangular n x n blocks.
nn::RowMat BlockCausalMask(int n);

struct GptBatch {
  int batch = 0;
  int slots = 0;
  std::vector<double> audio;       // batch x slots x audio_width
  std::vector<int> mu_codes;       // batch x slots
  std::vector<int> l_codes;        // batch x slots
  std::vector<int> mu_targets;     // batch x slots; empty at inference
  std::vector<int> l_targets;
};

struct GptOutput {
  nn::Tensor mu_logits;  // [batch * slots, vocab]
  nn::Tensor l_logits;
};

// One clip's training material: pooled audio per chunk and both code tracks.
struct GptExample {
  nn::RowMat audio;  // T' x audio_width (normalized)
  std::vector<int> mu_codes;
  std::vector<int> l_codes;
};

// Inputs codes 0..n-1, labels codes 1..n with n = T' - 1.
GptBatch MakeTrainingBatch(std::span<const GptExample* const> examples);

struct SampleOptions {
  double temperature = 0.0;  // 0 selects greedy argmax
  int top_k = 0;             // 0 keeps the full vocabulary
  std::uint64_t seed = 0;
};

class GptModel {
 public:
  GptModel(const GptConfig& config, std::uint64_t seed);
  explicit GptModel(const nn::Checkpoint& ckpt);

  const GptConfig& config() const { return config_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  // Token embeddings plus learned positions, [batch * 3 * slots, channels].
  nn::Tensor Embed(const GptBatch& batch) const;
  // `rng` enables dropout; pass nullptr for deterministic evaluation.
  GptOutput Forward(const GptBatch& batch, std::mt19937_64* rng = nullptr) const;

  // Per-channel audio normalization statistics (non-trainable buffers).
  void FitAudioNormalization(std::span<const nn::RowMat> pooled_audio);
  nn::RowMat NormalizeAudio(const nn::RowMat& pooled) const;

  // Extends the seed codes until both streams have seed + steps entries.
  // `audio` holds one normalized row per chunk and must cover every chunk
  // that is predicted. Context slides over the last T' - 1 codes.
  std::pair<std::vector<int>, std::vector<int>> Generate(
      const nn::RowMat& audio, std::vector<int> mu_seed, std::vector<int> l_seed, int steps,
      const SampleOptions& sampling = {}) const;

  nn::Checkpoint ToCheckpoint(const std::string& config_digest) const;

 private:
  void Build(std::uint64_t seed);
  nn::Tensor Block(int layer, const nn::Tensor& x, int batch, int tokens,
                   std::mt19937_64* rng) const;

  GptConfig config_;
  nn::ParameterSet params_;
};

// Mean cross-entropy over both streams against targets (batch x slots each).
nn::Tensor GptLoss(const GptOutput& out, std::span<const int> mu_targets,
                   std::span<const int> l_targets);

// Averages every `factor` consecutive rows; a trailing partial group is
// averaged over its own length.
nn::RowMat PoolRows(const nn::RowMat& x, int factor);

struct GptTrainOptions {
  int steps = 2000;
  int batch_size = 16;
  double lr = 3e-5;
  std::uint64_t seed = 0;
  int log_every = 100;
};

struct GptTrainReport {
  std::vector<double> loss_history;
  double seconds = 0.0;
};

GptTrainReport TrainGpt(GptModel& model, std::span<const GptExample> examples,
                        const GptTrainOptions& options);

// Teacher-forced top-1 accuracy of next-code prediction over both streams.
double NextCodeAccuracy(const GptModel& model, std::span<const GptExample> examples);

}  // namespace angie::gpt
