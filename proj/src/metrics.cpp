#include "angie/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "angie/errors.hpp"

namespace angie::metrics {

using nn::Buffer;
using nn::RowMat;
using nn::Tensor;

GaussianStats FitGaussian(const RowMat& features) {
  if (features.rows() < 2) throw ValidationError("need at least two feature rows");
  GaussianStats s;
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centred = features.rowwise() - s.mean.transpose();
  s.cov = centred.transpose() * centred / static_cast<double>(features.rows() - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  return s;
}

namespace {

Eigen::MatrixXd SqrtPsd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

double FrechetDistance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows()) {
    throw ValidationError(fmt::format("feature dimensions differ: {} vs {}", a.mean.size(),
                                      b.mean.size()));
  }
  const Eigen::MatrixXd s = SqrtPsd(a.cov);
  Eigen::MatrixXd inner = s * b.cov * s;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(inner, Eigen::EigenvaluesOnly);
  const double trace_sqrt = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() -
                   2.0 * trace_sqrt;
  return std::max(d, 0.0);
}

std::vector<double> MotionSpeed(const motion::MotionSequence& seq) {
  const int n = seq.frames();
  if (n < 2) throw ValidationError("speed needs at least two frames");
  std::vector<double> speed(static_cast<std::size_t>(n), 0.0);
  for (int t = 0; t < n; ++t) {
    const int lo = std::max(t - 1, 0), hi = std::min(t + 1, n - 1);
    double sum = 0.0;
    for (int k = 0; k < seq.regions(); ++k) {
      sum += (seq.at(hi, k).mu - seq.at(lo, k).mu).norm();
    }
    speed[static_cast<std::size_t>(t)] = sum / seq.regions() * seq.fps() / (hi - lo);
  }
  return speed;
}

std::vector<double> GestureBeats(const motion::MotionSequence& seq, double min_prominence_ratio) {
  const std::vector<double> s = MotionSpeed(seq);
  const int n = static_cast<int>(s.size());
  const double mean = std::accumulate(s.begin(), s.end(), 0.0) / n;
  double var = 0.0;
  for (double v : s) var += (v - mean) * (v - mean);
  // The relative floor keeps rounding ripple on constant-speed motion from
  // registering as beats.
  const double threshold = std::max(min_prominence_ratio * std::sqrt(var / n), 1e-6 * mean);
  std::vector<double> beats;
  for (int i = 1; i + 1 < n; ++i) {
    if (!(s[i] < s[i - 1] && s[i] <= s[i + 1])) continue;
    // Prominence: rise to the lower of the two bounding maxima, each taken
    // up to the next strictly lower sample or the sequence edge.
    double left = s[i], right = s[i];
    for (int j = i - 1; j >= 0 && s[j] >= s[i]; --j) left = std::max(left, s[j]);
    for (int j = i + 1; j < n && s[j] >= s[i]; ++j) right = std::max(right, s[j]);
    if (std::min(left, right) - s[i] >= threshold && std::min(left, right) > s[i]) {
      beats.push_back(i / seq.fps());
    }
  }
  return beats;
}

double BeatConsistency(std::span<const double> audio_beats, std::span<const double> gesture_beats,
                       double sigma) {
  if (audio_beats.empty()) throw ValidationError("beat consistency needs at least one audio beat");
  if (gesture_beats.empty()) {
    spdlog::warn("no gesture beats found; beat consistency is 0");
    return 0.0;
  }
  double total = 0.0;
  for (double a : audio_beats) {
    double best = std::numeric_limits<double>::infinity();
    for (double g : gesture_beats) best = std::min(best, std::abs(a - g));
    total += std::exp(-best * best / (2.0 * sigma * sigma));
  }
  return total / static_cast<double>(audio_beats.size());
}

double BeatConsistency(std::span<const double> audio_beats, const motion::MotionSequence& seq,
                       double sigma) {
  const std::vector<double> g = GestureBeats(seq);
  return BeatConsistency(audio_beats, g, sigma);
}

double Diversity(const RowMat& features, int pairs, std::uint64_t seed) {
  const auto n = features.rows();
  if (n < 2) throw ValidationError("diversity needs at least two features");
  if (pairs < 1) throw ValidationError("diversity needs at least one pair");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1), second(0, n - 2);
  double total = 0.0;
  for (int p = 0; p < pairs; ++p) {
    const Eigen::Index i = first(rng);
    Eigen::Index j = second(rng);
    if (j >= i) ++j;
    total += (features.row(i) - features.row(j)).cwiseAbs().sum();
  }
  return total / pairs;
}

DiversityReport DiversityOverSeeds(const RowMat& features, int pairs,
                                   std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw ValidationError("diversity needs at least one seed");
  DiversityReport r;
  r.seeds.assign(seeds.begin(), seeds.end());
  for (auto s : seeds) r.per_seed.push_back(Diversity(features, pairs, s));
  r.mean = std::accumulate(r.per_seed.begin(), r.per_seed.end(), 0.0) / r.per_seed.size();
  double var = 0.0;
  for (double v : r.per_seed) var += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(var / r.per_seed.size());
  return r;
}

void FeatureConfig::Validate() const {
  if (regions < 1) throw ValidationError("feature extractor: regions must be >= 1");
  if (window < 4 || window % 4 != 0) {
    throw ValidationError(fmt::format("feature window {} must be a positive multiple of 4", window));
  }
  if (hidden < 1 || dim < 1 || kernel < 1 || kernel % 2 == 0) {
    throw ValidationError("feature extractor widths must be positive and the kernel odd");
  }
}

nlohmann::json FeatureConfig::ToJson() const {
  return {{"regions", regions}, {"window", window}, {"hidden", hidden},
          {"dim", dim},         {"kernel", kernel}};
}

FeatureConfig FeatureConfig::FromJson(const nlohmann::json& j) {
  FeatureConfig c;
  c.regions = j.at("regions");
  c.window = j.at("window");
  c.hidden = j.at("hidden");
  c.dim = j.at("dim");
  c.kernel = j.at("kernel");
  return c;
}

FeatureExtractor::FeatureExtractor(const FeatureConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.Validate();
  Build(seed);
}

FeatureExtractor::FeatureExtractor(const nn::Checkpoint& ckpt) {
  if (ckpt.kind != "features") {
    throw ValidationError("checkpoint is not a feature extractor: " + ckpt.kind);
  }
  config_ = FeatureConfig::FromJson(ckpt.config.at("features"));
  config_.Validate();
  Build(0);
  for (auto& [name, t] : params_.entries()) {
    const Tensor& src = ckpt.params.Get(name);
    if (src.shape() != t.shape()) {
      throw ValidationError("checkpoint tensor " + name + " has the wrong shape");
    }
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
  }
}

void FeatureExtractor::Build(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int c = 5 * config_.regions, h = config_.hidden, k = config_.kernel;
  auto layer = [&](const std::string& name, int fan_in, int out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    params_.Add(name + ".w", {fan_in, out});
    params_.InitUniform(name + ".w", bound, rng);
    params_.Add(name + ".b", {out});
    params_.InitUniform(name + ".b", bound, rng);
  };
  layer("enc0", k * c, h);
  layer("enc1", k * h, config_.dim);
  layer("dec_in", config_.dim, config_.window / 4 * h);
  layer("dec0", k * h, h);
  layer("dec1", k * h, c);
  params_.Add("mean", {c}, false);
  params_.Add("std", {c}, false);
  params_.Fill("std", 1.0);
}

void FeatureExtractor::FitNormalization(std::span<const motion::MotionSequence> corpus) {
  const int c = 5 * config_.regions;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(c), sq = Eigen::VectorXd::Zero(c);
  double n = 0.0;
  for (const auto& seq : corpus) {
    for (int t = 0; t < seq.frames(); ++t) {
      for (int k = 0; k < seq.regions() && k < config_.regions; ++k) {
        const auto& f = seq.at(t, k);
        const double v[5] = {f.mu.x(), f.mu.y(), f.L.l1, f.L.l2, f.L.l3};
        for (int j = 0; j < 5; ++j) {
          sum[5 * k + j] += v[j];
          sq[5 * k + j] += v[j] * v[j];
        }
      }
      n += 1.0;
    }
  }
  if (n == 0.0) throw ValidationError("cannot fit feature normalization on an empty corpus");
  auto mean = params_.Get("mean").mutable_data();
  auto std = params_.Get("std").mutable_data();
  for (int j = 0; j < c; ++j) {
    mean[j] = sum[j] / n;
    std[j] = std::max(std::sqrt(std::max(sq[j] / n - mean[j] * mean[j], 0.0)), 1e-6);
  }
}

Tensor FeatureExtractor::Input(std::span<const motion::MotionSequence* const> windows) const {
  const int c = 5 * config_.regions, w = config_.window;
  const auto mean = params_.Get("mean").data();
  const auto std = params_.Get("std").data();
  Buffer data;
  data.reserve(windows.size() * static_cast<std::size_t>(w) * c);
  for (const auto* seq : windows) {
    if (seq->frames() != w || seq->regions() != config_.regions) {
      throw ValidationError(fmt::format("feature windows must be {} frames x {} regions, got {}x{}",
                                        w, config_.regions, seq->frames(), seq->regions()));
    }
    for (int t = 0; t < w; ++t) {
      for (int k = 0; k < config_.regions; ++k) {
        const auto& f = seq->at(t, k);
        const double v[5] = {f.mu.x(), f.mu.y(), f.L.l1, f.L.l2, f.L.l3};
        for (int j = 0; j < 5; ++j) data.push_back((v[j] - mean[5 * k + j]) / std[5 * k + j]);
      }
    }
  }
  return Tensor::FromBuffer({static_cast<int>(windows.size()), w, c}, std::move(data));
}

Tensor FeatureExtractor::Encode(const Tensor& x) const {
  const int k = config_.kernel, b = x.dim(0), steps = config_.window / 4, d = config_.dim;
  Tensor h = nn::Relu(nn::Conv1d(x, params_.Get("enc0.w"), params_.Get("enc0.b"), k, 2, k / 2));
  h = nn::Conv1d(h, params_.Get("enc1.w"), params_.Get("enc1.b"), k, 2, k / 2);
  // Temporal average as a product with a fixed pooling matrix.
  Buffer pool(static_cast<std::size_t>(steps) * d * d, 0.0);
  for (int t = 0; t < steps; ++t) {
    for (int j = 0; j < d; ++j) pool[(static_cast<std::size_t>(t) * d + j) * d + j] = 1.0 / steps;
  }
  return nn::MatMul(nn::Reshape(h, {b, steps * d}), Tensor::FromBuffer({steps * d, d}, pool));
}

Tensor FeatureExtractor::Decode(const Tensor& z) const {
  const int k = config_.kernel, b = z.dim(0), h = config_.hidden;
  Tensor x = nn::Relu(nn::Linear(z, params_.Get("dec_in.w"), params_.Get("dec_in.b")));
  x = nn::Reshape(x, {b, config_.window / 4, h});
  x = nn::Relu(nn::Conv1d(nn::Upsample1d(x, 2), params_.Get("dec0.w"), params_.Get("dec0.b"), k,
                          1, k / 2));
  return nn::Conv1d(nn::Upsample1d(x, 2), params_.Get("dec1.w"), params_.Get("dec1.b"), k, 1,
                    k / 2);
}

namespace {

std::vector<motion::MotionSequence> Windows(std::span<const motion::MotionSequence> seqs,
                                            int window) {
  std::vector<motion::MotionSequence> out;
  for (const auto& s : seqs) {
    for (int start = 0; start + window <= s.frames(); start += window) {
      motion::MotionSequence w(window, s.regions(), s.fps());
      for (int t = 0; t < window; ++t) {
        for (int k = 0; k < s.regions(); ++k) w.at(t, k) = s.at(start + t, k);
      }
      out.push_back(std::move(w));
    }
  }
  if (out.empty()) {
    throw ValidationError(fmt::format("no sequence has the {} frames a feature needs", window));
  }
  return out;
}

}  // namespace

RowMat FeatureExtractor::Features(std::span<const motion::MotionSequence> seqs) const {
  nn::NoGradGuard no_grad;
  const auto windows = Windows(seqs, config_.window);
  std::vector<const motion::MotionSequence*> ptrs;
  for (const auto& w : windows) ptrs.push_back(&w);
  return RowMat(Encode(Input(ptrs)).matrix());
}

nn::Checkpoint FeatureExtractor::ToCheckpoint(const std::string& config_digest) const {
  nn::Checkpoint ckpt;
  ckpt.kind = "features";
  ckpt.config_digest = config_digest;
  ckpt.config = {{"features", config_.ToJson()}};
  ckpt.meta = nlohmann::json::object();
  ckpt.params = params_;
  return ckpt;
}

std::vector<double> TrainFeatureExtractor(FeatureExtractor& model,
                                          std::span<const motion::MotionSequence> corpus,
                                          const FeatureTrainOptions& options) {
  const auto windows = Windows(corpus, model.config().window);
  std::mt19937_64 rng(options.seed);
  nn::Adam adam(model.params(), {.lr = options.lr});
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  std::vector<double> history;
  for (int step = 0; step < options.steps; ++step) {
    std::vector<const motion::MotionSequence*> batch;
    for (int b = 0; b < options.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&windows[order[cursor++]]);
    }
    Tensor x = model.Input(batch);
    Tensor loss = nn::MseLoss(model.Decode(model.Encode(x)), x);
    if (!std::isfinite(loss.item())) {
      throw NumericalError(fmt::format("feature autoencoder loss is not finite at step {}", step));
    }
    history.push_back(loss.item());
    loss.Backward();
    adam.Step();
  }
  return history;
}

double Fgd(const FeatureExtractor& extractor, std::span<const motion::MotionSequence> real,
           std::span<const motion::MotionSequence> generated) {
  if (real.empty() || generated.empty()) throw ValidationError("FGD needs non-empty sets");
  return FrechetDistance(FitGaussian(extractor.Features(real)),
                         FitGaussian(extractor.Features(generated)));
}

}  // namespace angie::metrics
