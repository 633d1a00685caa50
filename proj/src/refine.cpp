#include "angie/refine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "angie/errors.hpp"

namespace angie::refine {

using nn::Buffer;
using nn::RowMat;
using nn::Tensor;

namespace {

int PoolOut(int n, int kernel, int stride) { return (n - kernel) / stride + 1; }

nlohmann::json IntList(const std::vector<int>& v) { return nlohmann::json(v); }

}  // namespace

AudioEncoderConfig AudioEncoderConfig::Paper() { return {}; }

AudioEncoderConfig AudioEncoderConfig::Desk() {
  AudioEncoderConfig c;
  c.conv_channels = {4, 8, 8, 8, 8};
  c.linear = {64, 32, 32};
  return c;
}

int AudioEncoderConfig::PooledHeight() const { return PoolOut(PoolOut(window, 3, 1), 3, 2); }
int AudioEncoderConfig::PooledWidth() const { return PoolOut(PoolOut(coeffs, 3, 2), 3, 2); }

void AudioEncoderConfig::Validate() const {
  if (conv_channels.size() != 5) throw ValidationError("audio encoder needs 5 conv widths");
  if (linear.size() != 3) throw ValidationError("audio encoder needs 3 linear widths");
  for (int c : conv_channels) {
    if (c < 1) throw ValidationError("audio encoder widths must be positive");
  }
  for (int c : linear) {
    if (c < 1) throw ValidationError("audio encoder widths must be positive");
  }
  if (PooledHeight() < 1 || PooledWidth() < 1) {
    throw ValidationError(fmt::format("MFCC window {}x{} is too small for the encoder",
                                      window, coeffs));
  }
}

nlohmann::json AudioEncoderConfig::ToJson() const {
  return {{"conv_channels", IntList(conv_channels)}, {"linear", IntList(linear)},
          {"window", window}, {"coeffs", coeffs}};
}

AudioEncoderConfig AudioEncoderConfig::FromJson(const nlohmann::json& j) {
  AudioEncoderConfig c;
  c.conv_channels = j.at("conv_channels").get<std::vector<int>>();
  c.linear = j.at("linear").get<std::vector<int>>();
  c.window = j.at("window");
  c.coeffs = j.at("coeffs");
  return c;
}

void RefineConfig::Validate() const {
  audio.Validate();
  if (regions < 1) throw ValidationError("refine: regions must be >= 1");
  if (hidden < 1) throw ValidationError("refine: hidden size must be >= 1");
}

nlohmann::json RefineConfig::ToJson() const {
  return {{"audio", audio.ToJson()}, {"regions", regions}, {"hidden", hidden},
          {"gain_init", gain_init}};
}

RefineConfig RefineConfig::FromJson(const nlohmann::json& j) {
  RefineConfig c;
  c.audio = AudioEncoderConfig::FromJson(j.at("audio"));
  c.regions = j.at("regions");
  c.hidden = j.at("hidden");
  c.gain_init = j.at("gain_init");
  return c;
}

RowMat MotionFeatures(const motion::MotionSequence& seq) {
  RowMat f(seq.frames(), 5 * seq.regions());
  for (int t = 0; t < seq.frames(); ++t) {
    for (int k = 0; k < seq.regions(); ++k) {
      const auto& fr = seq.at(t, k);
      f.block(t, 5 * k, 1, 5) << fr.mu.x(), fr.mu.y(), fr.L.l1, fr.L.l2, fr.L.l3;
    }
  }
  return f;
}

motion::MotionSequence Compose(const motion::MotionSequence& pattern, const RowMat& residual) {
  if (residual.rows() != pattern.frames() || residual.cols() != 5 * pattern.regions()) {
    throw ValidationError(fmt::format("residual track is {}x{}, pattern needs {}x{}",
                                      residual.rows(), residual.cols(), pattern.frames(),
                                      5 * pattern.regions()));
  }
  motion::MotionSequence out = pattern;
  for (int t = 0; t < pattern.frames(); ++t) {
    for (int k = 0; k < pattern.regions(); ++k) {
      auto& fr = out.at(t, k);
      const Eigen::RowVectorXd r = residual.block(t, 5 * k, 1, 5);
      fr.mu += motion::Vec2(r(0), r(1));
      fr.L = motion::ClampPositiveDiagonal({fr.L.l1 + r(2), fr.L.l2 + r(3), fr.L.l3 + r(4)});
    }
  }
  return out;
}

double ResidualLoss(const motion::MotionSequence& gt, const motion::MotionSequence& composed) {
  if (gt.frames() != composed.frames() || gt.regions() != composed.regions()) {
    throw ValidationError(fmt::format("motion shapes differ: {}x{} vs {}x{}", gt.frames(),
                                      gt.regions(), composed.frames(), composed.regions()));
  }
  return (MotionFeatures(gt) - MotionFeatures(composed)).squaredNorm();
}

Tensor LstmPass(const nn::ParameterSet& params, const std::string& prefix, const Tensor& x,
                bool reverse) {
  const Tensor& wx = params.Get(prefix + "wx");
  const Tensor& wh = params.Get(prefix + "wh");
  const int b = x.dim(0), steps = x.dim(1), h = wh.dim(0);
  Tensor xw = nn::Reshape(nn::Linear(x, wx, params.Get(prefix + "b")), {b, steps * 4 * h});
  Tensor hidden = Tensor::Zeros({b, h});
  Tensor cell = Tensor::Zeros({b, h});
  std::vector<Tensor> out(static_cast<std::size_t>(steps));
  for (int s = 0; s < steps; ++s) {
    const int t = reverse ? steps - 1 - s : s;
    Tensor g = nn::Add(nn::SliceCols(xw, t * 4 * h, 4 * h), nn::MatMul(hidden, wh));
    Tensor in = nn::Sigmoid(nn::SliceCols(g, 0, h));
    Tensor forget = nn::Sigmoid(nn::SliceCols(g, h, h));
    Tensor cand = nn::Tanh(nn::SliceCols(g, 2 * h, h));
    Tensor gate = nn::Sigmoid(nn::SliceCols(g, 3 * h, h));
    cell = nn::Add(nn::Mul(forget, cell), nn::Mul(in, cand));
    hidden = nn::Mul(gate, nn::Tanh(cell));
    out[static_cast<std::size_t>(t)] = hidden;
  }
  return nn::Reshape(nn::ConcatCols(out), {b, steps, h});
}

Tensor ReverseTime(const Tensor& x) {
  const int b = x.dim(0), steps = x.dim(1), c = x.dim(2);
  Tensor flat = nn::Reshape(x, {b, steps * c});
  std::vector<Tensor> parts;
  for (int t = steps - 1; t >= 0; --t) parts.push_back(nn::SliceCols(flat, t * c, c));
  return nn::Reshape(nn::ConcatCols(parts), {b, steps, c});
}

RefineModel::RefineModel(const RefineConfig& config, std::uint64_t seed) : config_(config) {
  config_.Validate();
  Build(seed);
}

RefineModel::RefineModel(const nn::Checkpoint& ckpt) {
  if (ckpt.kind != "refine") {
    throw ValidationError("checkpoint is not a refinement model: " + ckpt.kind);
  }
  config_ = RefineConfig::FromJson(ckpt.config.at("refine"));
  config_.Validate();
  Build(0);
  for (auto& [name, t] : params_.entries()) {
    const Tensor& src = ckpt.params.Get(name);
    if (src.shape() != t.shape()) {
      throw ValidationError("checkpoint tensor " + name + " has shape " +
                            nn::ShapeString(src.shape()) + ", expected " +
                            nn::ShapeString(t.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
  }
}

void RefineModel::Build(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const AudioEncoderConfig& a = config_.audio;
  auto he = [&](const std::string& name, nn::Shape shape, int fan_in) {
    params_.Add(name, shape);
    params_.InitNormal(name, std::sqrt(2.0 / fan_in), rng);
  };
  int in = 1;
  for (int i = 0; i < 5; ++i) {
    const std::string p = fmt::format("audio.conv{}.", i + 1);
    he(p + "w", {9 * in, a.conv_channels[i]}, 9 * in);
    params_.Add(p + "b", {a.conv_channels[i]});
    in = a.conv_channels[i];
  }
  in = a.FlattenWidth();
  for (int i = 0; i < 3; ++i) {
    const std::string p = fmt::format("audio.fc{}.", i + 1);
    he(p + "w", {in, a.linear[i]}, in);
    params_.Add(p + "b", {a.linear[i]});
    in = a.linear[i];
  }
  const int h = config_.hidden, lstm_in = config_.MotionWidth() + a.OutputWidth();
  const double bound = 1.0 / std::sqrt(static_cast<double>(h));
  for (const char* dir : {"lstm_fwd.", "lstm_bwd."}) {
    const std::string p = dir;
    params_.Add(p + "wx", {lstm_in, 4 * h});
    params_.InitNormal(p + "wx", bound, rng);
    params_.Add(p + "wh", {h, 4 * h});
    params_.InitNormal(p + "wh", bound, rng);
    params_.Add(p + "b", {4 * h});
    // Forget-gate bias 1 keeps early gradients flowing through time.
    auto bias = params_.Get(p + "b").mutable_data();
    std::fill(bias.begin() + h, bias.begin() + 2 * h, 1.0);
  }
  // Zero head: the untrained refiner returns the pattern unchanged.
  params_.Add("head.w", {2 * h, config_.MotionWidth()});
  params_.Add("head.b", {config_.MotionWidth()});
  params_.Add("head.gain", {1});
  params_.Fill("head.gain", config_.gain_init);
  params_.Add("motion_mean", {config_.MotionWidth()}, false);
  params_.Add("motion_std", {config_.MotionWidth()}, false);
  params_.Fill("motion_std", 1.0);
  params_.Add("mfcc_mean", {a.coeffs}, false);
  params_.Add("mfcc_std", {a.coeffs}, false);
  params_.Fill("mfcc_std", 1.0);
}

void RefineModel::FitNormalization(std::span<const motion::MotionSequence> patterns,
                                   std::span<const RowMat> mfcc_windows) {
  auto fit = [](const std::vector<const RowMat*>& mats, int group, std::span<double> mean,
                std::span<double> std) {
    const std::size_t w = mean.size();
    std::vector<double> sum(w, 0.0), sq(w, 0.0);
    double n = 0.0;
    for (const RowMat* m : mats) {
      for (Eigen::Index r = 0; r < m->rows(); ++r) {
        for (Eigen::Index c = 0; c < m->cols(); ++c) {
          const double v = (*m)(r, c);
          sum[static_cast<std::size_t>(c) % w] += v;
          sq[static_cast<std::size_t>(c) % w] += v * v;
        }
        n += group;
      }
    }
    if (n == 0.0) throw ValidationError("cannot fit normalization on an empty set");
    for (std::size_t j = 0; j < w; ++j) {
      mean[j] = sum[j] / n;
      std[j] = std::max(std::sqrt(std::max(sq[j] / n - mean[j] * mean[j], 0.0)), 1e-6);
    }
  };
  std::vector<RowMat> feats;
  for (const auto& p : patterns) {
    if (p.regions() != config_.regions) {
      throw ValidationError(fmt::format("pattern has {} regions, model expects {}",
                                        p.regions(), config_.regions));
    }
    feats.push_back(MotionFeatures(p));
  }
  std::vector<const RowMat*> ptrs;
  for (const auto& f : feats) ptrs.push_back(&f);
  fit(ptrs, 1, params_.Get("motion_mean").mutable_data(),
      params_.Get("motion_std").mutable_data());
  ptrs.clear();
  for (const auto& m : mfcc_windows) {
    if (m.cols() != config_.audio.window * config_.audio.coeffs) {
      throw ValidationError(fmt::format("MFCC windows have width {}, expected {}", m.cols(),
                                        config_.audio.window * config_.audio.coeffs));
    }
    ptrs.push_back(&m);
  }
  fit(ptrs, config_.audio.window, params_.Get("mfcc_mean").mutable_data(),
      params_.Get("mfcc_std").mutable_data());
}

// Inputs are data, so normalization happens outside the graph.
Tensor RefineModel::Normalize(const Tensor& x, const std::string& stats, int group) const {
  const auto mean = params_.Get(stats + "_mean").data();
  const auto std = params_.Get(stats + "_std").data();
  const std::size_t w = mean.size();
  Buffer out(x.data().begin(), x.data().end());
  const std::size_t row = w * static_cast<std::size_t>(group);
  if (out.size() % row != 0) throw ValidationError("normalization width mismatch");
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - mean[i % w]) / std[i % w];
  return Tensor::FromBuffer(x.shape(), std::move(out));
}

Tensor RefineModel::EncodeAudio(const Tensor& windows) const {
  const AudioEncoderConfig& a = config_.audio;
  const int width = a.window * a.coeffs;
  if (windows.rank() != 2 || windows.dim(1) != width) {
    throw ValidationError(fmt::format("audio encoder expects [N, {}] windows, got {}", width,
                                      nn::ShapeString(windows.shape())));
  }
  const int n = windows.dim(0);
  auto conv = [&](const Tensor& x, int i) {
    const std::string p = fmt::format("audio.conv{}.", i);
    return nn::Conv2d(x, params_.Get(p + "w"), params_.Get(p + "b"), 3, 1, 1);
  };
  Tensor x = nn::Reshape(windows, {n, a.window, a.coeffs, 1});
  x = conv(conv(x, 1), 2);
  x = nn::MaxPool2d(x, 3, 1, 2);
  x = conv(conv(conv(x, 3), 4), 5);
  x = nn::MaxPool2d(x, 3, 2, 2);
  x = nn::Reshape(x, {n, a.FlattenWidth()});
  for (int i = 1; i <= 3; ++i) {
    const std::string p = fmt::format("audio.fc{}.", i);
    x = nn::Relu(nn::Linear(x, params_.Get(p + "w"), params_.Get(p + "b")));
  }
  return x;
}

std::vector<ShapeTrace> RefineModel::TraceShapes() const {
  nn::NoGradGuard no_grad;
  const AudioEncoderConfig& a = config_.audio;
  std::vector<ShapeTrace> trace;
  auto record = [&](const std::string& name, const Tensor& t) {
    // NHWC activations are reported channels first, like the layer table.
    nn::Shape s(t.shape().begin() + 1, t.shape().end());
    if (s.size() == 3) s = {s[2], s[0], s[1]};
    trace.push_back({name, s});
  };
  auto conv = [&](const Tensor& x, int i) {
    const std::string p = fmt::format("audio.conv{}.", i);
    return nn::Conv2d(x, params_.Get(p + "w"), params_.Get(p + "b"), 3, 1, 1);
  };
  Tensor x = Tensor::Zeros({1, a.window, a.coeffs, 1});
  record("input", x);
  x = conv(x, 1);
  record("layer-1", x);
  x = conv(x, 2);
  record("layer-2", x);
  x = nn::MaxPool2d(x, 3, 1, 2);
  record("layer-3", x);
  x = conv(x, 3);
  record("layer-4", x);
  x = conv(x, 4);
  record("layer-5", x);
  x = conv(x, 5);
  record("layer-6", x);
  x = nn::MaxPool2d(x, 3, 2, 2);
  record("flatten", x);
  x = nn::Reshape(x, {1, a.FlattenWidth()});
  record("layer-7", x);
  for (int i = 1; i <= 3; ++i) {
    const std::string p = fmt::format("audio.fc{}.", i);
    x = nn::Relu(nn::Linear(x, params_.Get(p + "w"), params_.Get(p + "b")));
    record(i < 3 ? fmt::format("layer-{}", 7 + i) : std::string("output"), x);
  }
  return trace;
}

Tensor RefineModel::PredictResiduals(const Tensor& pattern, const Tensor& mfcc) const {
  const int motion_width = config_.MotionWidth();
  const int audio_width = config_.audio.window * config_.audio.coeffs;
  if (pattern.rank() != 3 || pattern.dim(2) != motion_width) {
    throw ValidationError(fmt::format("pattern must be [B, T, {}], got {}", motion_width,
                                      nn::ShapeString(pattern.shape())));
  }
  if (mfcc.rank() != 3 || mfcc.dim(2) != audio_width) {
    throw ValidationError(fmt::format("MFCC windows must be [B, T, {}], got {}", audio_width,
                                      nn::ShapeString(mfcc.shape())));
  }
  const int b = pattern.dim(0), steps = pattern.dim(1);
  if (mfcc.dim(0) != b || mfcc.dim(1) != steps) {
    throw ValidationError(fmt::format("pattern has {} frames but audio has {}", steps,
                                      mfcc.dim(1)));
  }
  Tensor audio = EncodeAudio(
      nn::Reshape(Normalize(mfcc, "mfcc", config_.audio.window), {b * steps, audio_width}));
  audio = nn::Reshape(audio, {b, steps, config_.audio.OutputWidth()});
  Tensor x = nn::ConcatCols({Normalize(pattern, "motion", 1), audio});
  Tensor h = nn::ConcatCols(
      {LstmPass(params_, "lstm_fwd.", x, false), LstmPass(params_, "lstm_bwd.", x, true)});
  Tensor r = nn::Tanh(nn::Linear(h, params_.Get("head.w"), params_.Get("head.b")));
  return nn::ScaleBy(r, params_.Get("head.gain"));
}

motion::MotionSequence RefineModel::Refine(const motion::MotionSequence& pattern,
                                           const RowMat& mfcc_windows) const {
  nn::NoGradGuard no_grad;
  if (mfcc_windows.rows() != pattern.frames()) {
    throw ValidationError(fmt::format("pattern has {} frames but audio has {}",
                                      pattern.frames(), mfcc_windows.rows()));
  }
  const RowMat f = MotionFeatures(pattern);
  Tensor p = Tensor::FromBuffer({1, static_cast<int>(f.rows()), static_cast<int>(f.cols())},
                                Buffer(f.data(), f.data() + f.size()));
  Tensor m = Tensor::FromBuffer(
      {1, static_cast<int>(mfcc_windows.rows()), static_cast<int>(mfcc_windows.cols())},
      Buffer(mfcc_windows.data(), mfcc_windows.data() + mfcc_windows.size()));
  Tensor r = PredictResiduals(p, m);
  return Compose(pattern, RowMat(r.matrix()));
}

nn::Checkpoint RefineModel::ToCheckpoint(const std::string& config_digest) const {
  nn::Checkpoint ckpt;
  ckpt.kind = "refine";
  ckpt.config_digest = config_digest;
  ckpt.config = {{"refine", config_.ToJson()}};
  ckpt.meta = nlohmann::json::object();
  ckpt.params = params_;
  return ckpt;
}

namespace {

Tensor Stack(const std::vector<const RowMat*>& mats) {
  const RowMat& first = *mats[0];
  const int rows = static_cast<int>(first.rows()), cols = static_cast<int>(first.cols());
  Buffer data;
  data.reserve(mats.size() * first.size());
  for (const RowMat* m : mats) {
    if (m->rows() != rows || m->cols() != cols) {
      throw ValidationError("refinement examples in a batch must share their shape");
    }
    data.insert(data.end(), m->data(), m->data() + m->size());
  }
  return Tensor::FromBuffer({static_cast<int>(mats.size()), rows, cols}, std::move(data));
}

}  // namespace

Tensor RefineLoss(const RefineModel& model, std::span<const RefineExample* const> batch) {
  if (batch.empty()) throw ValidationError("empty refinement batch");
  std::vector<RowMat> pattern, target;
  std::vector<const RowMat*> mfcc;
  for (const RefineExample* ex : batch) {
    pattern.push_back(MotionFeatures(ex->pattern));
    target.push_back(MotionFeatures(ex->target));
    mfcc.push_back(&ex->mfcc);
  }
  auto ptrs = [](const std::vector<RowMat>& v) {
    std::vector<const RowMat*> out;
    for (const auto& m : v) out.push_back(&m);
    return out;
  };
  Tensor p = Stack(ptrs(pattern));
  Tensor t = Stack(ptrs(target));
  Tensor m = Stack(mfcc);
  Tensor composed = nn::Add(p, model.PredictResiduals(p, m));
  return nn::MseLoss(composed, t);
}

RefineTrainReport TrainRefine(RefineModel& model, std::span<const RefineExample> examples,
                              const RefineTrainOptions& options) {
  if (examples.empty()) throw ValidationError("refinement training set is empty");
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(options.seed);
  nn::Adam adam(model.params(), {.lr = options.lr});
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  RefineTrainReport report;
  for (int step = 1; step <= options.steps; ++step) {
    std::vector<const RefineExample*> batch;
    for (int b = 0; b < options.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&examples[order[cursor++]]);
    }
    Tensor loss = RefineLoss(model, batch);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericalError(fmt::format("refinement loss is not finite at step {}", step));
    }
    loss.Backward();
    adam.Step();
    report.loss_history.push_back(value);
    if (options.log_every > 0 && step % options.log_every == 0) {
      spdlog::info("refine step {} loss {:.6g}", step, value);
    }
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace angie::refine
