#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "angie/motion.hpp"
#include "angie/nn/checkpoint.hpp"
#include "angie/nn/ops.hpp"
#include "angie/nn/params.hpp"

namespace angie::vq {

// Which motion components are quantized, and whether as absolute values or
// adjacent-frame differences. kRelMuRelL is the position-irrelevant Cholesky
// scheme; kNaiveMuCA quantizes mu, C and A separately with no validity
// guarantee on C.
enum class QuantizationMode { kAbsMuAbsL, kRelMuAbsL, kAbsMuRelL, kRelMuRelL, kNaiveMuCA };

std::string ModeName(QuantizationMode mode);
QuantizationMode ParseMode(const std::string& name);

enum class StreamKind { kMu, kL, kCovariance, kAffine };

struct StreamSpec {
  std::string name;  // "delta_mu", "delta_L", "mu", "L", "C", "A"
  StreamKind kind;
  bool relative;
  int channels;  // per-region values times regions
};

std::vector<StreamSpec> StreamsFor(QuantizationMode mode, int regions);

struct CodeSequence {
  std::string stream;
  std::vector<int> indices;
};

struct QuantizeResult {
  nn::RowMat quantized;
  std::vector<int> indices;
};

// Replaces every row of `latents` by its Euclidean-nearest codebook row.
// Ties resolve to the lowest index.
QuantizeResult Quantize(const nn::RowMat& latents, const nn::RowMat& codebook);

// Code-usage perplexity exp(H(p)) over a set of indices.
double Perplexity(std::span<const int> indices, int codebook_size);

struct VqConfig {
  int regions = 4;
  int codebook_size = 32;
  int width = 32;  // latent and codebook channel dimension
  int layers = 3;
  int kernel = 3;
  double beta = 0.1;
  QuantizationMode mode = QuantizationMode::kRelMuRelL;
  int dead_code_steps = 256;

  int DownsampleFactor() const { return 1 << layers; }
  void Validate() const;
  nlohmann::json ToJson() const;
  static VqConfig FromJson(const nlohmann::json& j);
};

struct VqLossTerms {
  nn::Tensor total;
  double reconstruction = 0.0;
  double codebook = 0.0;
  double commitment = 0.0;
};

// Squared-Euclidean VQ objective for one stream:
//   ||x_hat - x||^2 + ||sg[e] - e_q||^2 + beta ||e - sg[e_q]||^2
VqLossTerms VqLoss(const nn::Tensor& x, const nn::Tensor& x_hat, const nn::Tensor& e,
                   const nn::Tensor& e_q, double beta);

struct VqForwardResult {
  VqLossTerms loss;
  std::vector<nn::Tensor> inputs;    // per stream [B, T, C], normalized
  std::vector<nn::Tensor> latents;   // per stream [B, T', width]
  std::vector<nn::Tensor> outputs;   // per stream [B, T, C], normalized
  std::vector<std::vector<int>> indices;  // per stream, B * T' codes
};

struct DecodedMotion {
  motion::MotionSequence sequence;
  // Frames whose decoded covariance was not symmetric positive definite
  // (only possible in kNaiveMuCA mode).
  int invalid_covariances = 0;
};

class VqModel {
 public:
  VqModel(const VqConfig& config, std::uint64_t seed);
  explicit VqModel(const nn::Checkpoint& ckpt);

  const VqConfig& config() const { return config_; }
  const std::vector<StreamSpec>& streams() const { return streams_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  // Per-channel normalization statistics, estimated from a corpus.
  void FitNormalization(std::span<const motion::MotionSequence> corpus);

  // Raw (unnormalized) stream values [T, channels] for one sequence.
  nn::RowMat StreamValues(const motion::MotionSequence& seq, int stream) const;
  nn::Tensor StreamInput(std::span<const motion::MotionSequence* const> batch,
                         int stream) const;

  nn::Tensor Encode(int stream, const nn::Tensor& x) const;
  nn::Tensor Decode(int stream, const nn::Tensor& e_q) const;
  const nn::Tensor& Codebook(int stream) const;

  // `frozen_indices`, when given, replaces the nearest-neighbour search
  // (one index vector per stream); used to hold assignments fixed while
  // probing gradients.
  VqForwardResult Forward(std::span<const motion::MotionSequence* const> batch,
                          bool bypass_quantization = false,
                          const std::vector<std::vector<int>>* frozen_indices = nullptr) const;

  std::vector<CodeSequence> EncodeIndices(const motion::MotionSequence& seq) const;
  // Decodes code streams back into motion, integrating relative streams from
  // `init`. `frames` is T' * downsample factor.
  DecodedMotion DecodeIndices(const std::vector<std::vector<int>>& codes,
                              std::span<const motion::RegionMotionFrame> init,
                              double fps) const;
  // Raw decoded stream values [T, channels] (denormalized) for given codes.
  nn::RowMat DecodeStreamValues(int stream, std::span<const int> codes) const;

  // Entries unused for `dead_code_steps` consecutive steps are reset to
  // random rows of `latents`.
  int ReviveDeadCodes(const VqForwardResult& fwd, long step, std::mt19937_64& rng);
  // Throws if two codebook entries coincide.
  void CheckCodebooksDistinct() const;

  nn::Checkpoint ToCheckpoint(const std::string& config_digest) const;

 private:
  void Build(std::uint64_t seed);
  std::string Prefix(int stream) const;

  VqConfig config_;
  std::vector<StreamSpec> streams_;
  nn::ParameterSet params_;
  std::vector<std::vector<long>> last_used_;
};

struct VqTrainOptions {
  int steps = 1500;
  int batch_size = 16;
  double lr = 3e-5;
  int clip_length = 96;
  int clip_stride = 32;
  std::uint64_t seed = 0;
  int log_every = 100;
};

struct VqTrainReport {
  std::vector<double> loss_history;
  std::vector<double> reconstruction_history;
  int revived_codes = 0;
  double seconds = 0.0;
};

// Cuts every sequence into clip_length windows with the given stride.
std::vector<motion::MotionSequence> SampleClips(
    std::span<const motion::MotionSequence> corpus, int clip_length, int stride);

VqTrainReport TrainVq(VqModel& model, std::span<const motion::MotionSequence> clips,
                      const VqTrainOptions& options);

// "index v0 v1 ..." rows, one per codebook entry.
std::string DumpCodebook(const VqModel& model, int stream);

}  // namespace angie::vq
