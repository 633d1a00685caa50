#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "angie/motion.hpp"
#include "angie/nn/checkpoint.hpp"
#include "angie/nn/ops.hpp"
#include "angie/nn/params.hpp"

// Motion refinement: a convolutional encoder over per-frame MFCC windows and a
// bidirectional LSTM that predicts residuals on (mu, L) of a pattern motion.
namespace angie::refine {

// Five 3x3 convolutions with max-pools after the second and the fifth, then
// three ReLU linear layers. Widths differ between presets; the layer list
// and the spatial shapes do not.
struct AudioEncoderConfig {
  std::vector<int> conv_channels{64, 128, 256, 256, 512};
  std::vector<int> linear{2048, 256, 128};
  int window = 28;  // MFCC frames per window
  int coeffs = 12;

  static AudioEncoderConfig Paper();
  static AudioEncoderConfig Desk();
  int OutputWidth() const { return linear.back(); }
  // Pooled spatial size: 28 x 12 -> 26 x 5 -> 12 x 2.
  int PooledHeight() const;
  int PooledWidth() const;
  int FlattenWidth() const { return conv_channels.back() * PooledHeight() * PooledWidth(); }
  void Validate() const;
  nlohmann::json ToJson() const;
  static AudioEncoderConfig FromJson(const nlohmann::json& j);
};

struct RefineConfig {
  AudioEncoderConfig audio = AudioEncoderConfig::Desk();
  int regions = 4;
  int hidden = 128;
  double gain_init = 0.05;

  int MotionWidth() const { return 5 * regions; }  // mu_x mu_y l1 l2 l3 per region
  void Validate() const;
  nlohmann::json ToJson() const;
  static RefineConfig FromJson(const nlohmann::json& j);
};

struct ShapeTrace {
  std::string layer;
  nn::Shape shape;  // per sample, channels first
};

// Per-frame motion features [T, 5K] in region-major order.
nn::RowMat MotionFeatures(const motion::MotionSequence& seq);

// pattern + residual per frame, with the diagonal of L clamped to stay
// positive. Zero residuals return the pattern unchanged.
motion::MotionSequence Compose(const motion::MotionSequence& pattern, const nn::RowMat& residual);

// Squared Euclidean distance over all mu and L entries of all frames.
double ResidualLoss(const motion::MotionSequence& gt, const motion::MotionSequence& composed);

// One LSTM direction over x [B, T, in] with gate order (input, forget, cell,
// output); `reverse` runs from the last frame to the first. Returns [B, T, H]
// aligned with the input frames.
nn::Tensor LstmPass(const nn::ParameterSet& params, const std::string& prefix,
                    const nn::Tensor& x, bool reverse);

// Reverses the time axis of a [B, T, C] tensor.
nn::Tensor ReverseTime(const nn::Tensor& x);

class RefineModel {
 public:
  RefineModel(const RefineConfig& config, std::uint64_t seed);
  explicit RefineModel(const nn::Checkpoint& ckpt);

  const RefineConfig& config() const { return config_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  void FitNormalization(std::span<const motion::MotionSequence> patterns,
                        std::span<const nn::RowMat> mfcc_windows);

  // windows [N, window * coeffs] (normalized) -> [N, OutputWidth]
  nn::Tensor EncodeAudio(const nn::Tensor& windows) const;
  std::vector<ShapeTrace> TraceShapes() const;

  // pattern [B, T, 5K] and audio [B, T, window * coeffs], both raw.
  // Returns residuals [B, T, 5K], each bounded by |gain|.
  nn::Tensor PredictResiduals(const nn::Tensor& pattern, const nn::Tensor& mfcc) const;

  motion::MotionSequence Refine(const motion::MotionSequence& pattern,
                                const nn::RowMat& mfcc_windows) const;

  nn::Checkpoint ToCheckpoint(const std::string& config_digest) const;

 private:
  void Build(std::uint64_t seed);
  nn::Tensor Normalize(const nn::Tensor& x, const std::string& stats, int group) const;

  RefineConfig config_;
  nn::ParameterSet params_;
};

struct RefineExample {
  motion::MotionSequence pattern;
  motion::MotionSequence target;
  nn::RowMat mfcc;  // T x (window * coeffs)
};

struct RefineTrainOptions {
  int steps = 600;
  int batch_size = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int log_every = 100;
};

struct RefineTrainReport {
  std::vector<double> loss_history;
  double seconds = 0.0;
};

// Mean over entries of the squared residual error of a batch.
nn::Tensor RefineLoss(const RefineModel& model, std::span<const RefineExample* const> batch);

RefineTrainReport TrainRefine(RefineModel& model, std::span<const RefineExample> examples,
                              const RefineTrainOptions& options);

}  // namespace angie::refine
