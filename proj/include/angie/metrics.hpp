#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "angie/motion.hpp"
#include "angie/nn/checkpoint.hpp"
#include "angie/nn/ops.hpp"
#include "angie/nn/params.hpp"

namespace angie::metrics {

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Sample mean and unbiased covariance of the rows of `features`.
GaussianStats FitGaussian(const nn::RowMat& features);

// |m1 - m2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}). The trace of the square root
// is taken from the eigenvalues of S1^{1/2} S2 S1^{1/2}, negatives clamped.
double FrechetDistance(const GaussianStats& a, const GaussianStats& b);

// Mean speed of mu over regions per frame (central differences, one-sided at
// the ends), in units per second.
std::vector<double> MotionSpeed(const motion::MotionSequence& seq);

// Frames where the speed has a local minimum whose prominence is at least
// `min_prominence_ratio` times the speed standard deviation (and at least
// 1e-6 of the mean speed), as seconds.
std::vector<double> GestureBeats(const motion::MotionSequence& seq,
                                 double min_prominence_ratio = 0.1);

// Mean over audio beats of exp(-dt^2 / (2 sigma^2)), dt the distance to the
// nearest gesture beat. No gesture beats gives 0.
double BeatConsistency(std::span<const double> audio_beats, std::span<const double> gesture_beats,
                       double sigma = 0.1);
double BeatConsistency(std::span<const double> audio_beats, const motion::MotionSequence& seq,
                       double sigma = 0.1);

struct DiversityReport {
  std::vector<double> per_seed;
  std::vector<std::uint64_t> seeds;
  double mean = 0.0;
  double std = 0.0;  // population std over seeds
};

// Mean L1 distance between the features of `pairs` random distinct pairs.
double Diversity(const nn::RowMat& features, int pairs, std::uint64_t seed);
DiversityReport DiversityOverSeeds(const nn::RowMat& features, int pairs,
                                   std::span<const std::uint64_t> seeds);

// Sequence autoencoder whose pooled encoder output is the feature space of
// FGD and Diversity.
struct FeatureConfig {
  int regions = 4;
  int window = 96;  // frames per feature; divisible by 4
  int hidden = 64;
  int dim = 32;
  int kernel = 3;

  void Validate() const;
  nlohmann::json ToJson() const;
  static FeatureConfig FromJson(const nlohmann::json& j);
};

class FeatureExtractor {
 public:
  FeatureExtractor(const FeatureConfig& config, std::uint64_t seed);
  explicit FeatureExtractor(const nn::Checkpoint& ckpt);

  const FeatureConfig& config() const { return config_; }
  nn::ParameterSet& params() { return params_; }

  void FitNormalization(std::span<const motion::MotionSequence> corpus);
  // Normalized per-frame (mu, L) of whole windows, [B, window, 5K].
  nn::Tensor Input(std::span<const motion::MotionSequence* const> windows) const;
  nn::Tensor Encode(const nn::Tensor& x) const;  // [B, dim]
  nn::Tensor Decode(const nn::Tensor& z) const;  // [B, window, 5K]

  // One feature row per complete, non-overlapping window of every sequence.
  nn::RowMat Features(std::span<const motion::MotionSequence> seqs) const;

  nn::Checkpoint ToCheckpoint(const std::string& config_digest) const;

 private:
  void Build(std::uint64_t seed);

  FeatureConfig config_;
  nn::ParameterSet params_;
};

struct FeatureTrainOptions {
  int steps = 400;
  int batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

// Trains on every complete window of the corpus; returns the loss history.
std::vector<double> TrainFeatureExtractor(FeatureExtractor& model,
                                          std::span<const motion::MotionSequence> corpus,
                                          const FeatureTrainOptions& options);

double Fgd(const FeatureExtractor& extractor, std::span<const motion::MotionSequence> real,
           std::span<const motion::MotionSequence> generated);

}  // namespace angie::metrics
