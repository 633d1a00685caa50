#include "angie/gpt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "angie/errors.hpp"

namespace angie::gpt {

using nn::RowMat;
using nn::Tensor;

void GptConfig::Validate() const {
  if (layers < 1) throw ValidationError("gpt: layers must be >= 1");
  if (channels < 1 || heads < 1 || channels % heads != 0) {
    throw ValidationError(fmt::format("gpt: channels ({}) must be divisible by heads ({})",
                                      channels, heads));
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ValidationError("gpt: dropout must be in [0, 1)");
  if (vocab < 2) throw ValidationError("gpt: vocabulary must have >= 2 entries");
  if (context < 2) throw ValidationError("gpt: context must be >= 2");
  if (audio_width < 1) throw ValidationError("gpt: audio width must be >= 1");
}

nlohmann::json GptConfig::ToJson() const {
  return {{"layers", layers}, {"channels", channels}, {"heads", heads},
          {"dropout", dropout}, {"vocab", vocab},     {"context", context},
          {"audio_width", audio_width}};
}

GptConfig GptConfig::FromJson(const nlohmann::json& j) {
  GptConfig c;
  c.layers = j.at("layers");
  c.channels = j.at("channels");
  c.heads = j.at("heads");
  c.dropout = j.at("dropout");
  c.vocab = j.at("vocab");
  c.context = j.at("context");
  c.audio_width = j.at("audio_width");
  return c;
}

RowMat BlockCausalMask(int n) {
  RowMat mask(3 * n, 3 * n);
  const double blocked = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < 3 * n; ++r) {
    for (int c = 0; c < 3 * n; ++c) mask(r, c) = (c % n) <= (r % n) ? 0.0 : blocked;
  }
  return mask;
}

GptBatch MakeTrainingBatch(std::span<const GptExample* const> examples) {
  if (examples.empty()) throw ValidationError("empty GPT batch");
  GptBatch b;
  b.batch = static_cast<int>(examples.size());
  const auto len = examples[0]->mu_codes.size();
  if (len < 2) throw ValidationError("GPT examples need at least two codes");
  b.slots = static_cast<int>(len) - 1;
  for (const GptExample* ex : examples) {
    if (ex->mu_codes.size() != len || ex->l_codes.size() != len ||
        ex->audio.rows() != static_cast<Eigen::Index>(len)) {
      throw ValidationError("GPT example lengths disagree");
    }
    for (int i = 0; i < b.slots; ++i) {
      for (Eigen::Index j = 0; j < ex->audio.cols(); ++j) b.audio.push_back(ex->audio(i + 1, j));
      b.mu_codes.push_back(ex->mu_codes[i]);
      b.l_codes.push_back(ex->l_codes[i]);
      b.mu_targets.push_back(ex->mu_codes[i + 1]);
      b.l_targets.push_back(ex->l_codes[i + 1]);
    }
  }
  return b;
}

GptModel::GptModel(const GptConfig& config, std::uint64_t seed) : config_(config) {
  config_.Validate();
  Build(seed);
}

GptModel::GptModel(const nn::Checkpoint& ckpt) {
  if (ckpt.kind != "gpt") throw ValidationError("checkpoint is not a GPT model: " + ckpt.kind);
  config_ = GptConfig::FromJson(ckpt.config.at("gpt"));
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

void GptModel::Build(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int c = config_.channels, m = config_.vocab;
  const double std = 0.02, proj_std = 0.02 / std::sqrt(2.0 * config_.layers);
  auto weight = [&](const std::string& name, nn::Shape shape, double s) {
    params_.Add(name, shape);
    params_.InitNormal(name, s, rng);
  };
  weight("audio.w", {config_.audio_width, c}, std);
  params_.Add("audio.b", {c});
  weight("embed_mu", {m, c}, std);
  weight("embed_l", {m, c}, std);
  weight("pos", {3 * config_.MaxSlots(), c}, std);
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = fmt::format("block{}.", l);
    params_.Add(p + "ln1.g", {c});
    params_.Fill(p + "ln1.g", 1.0);
    params_.Add(p + "ln1.b", {c});
    weight(p + "attn.w", {c, 3 * c}, std);
    params_.Add(p + "attn.b", {3 * c});
    weight(p + "proj.w", {c, c}, proj_std);
    params_.Add(p + "proj.b", {c});
    params_.Add(p + "ln2.g", {c});
    params_.Fill(p + "ln2.g", 1.0);
    params_.Add(p + "ln2.b", {c});
    weight(p + "fc1.w", {c, 4 * c}, std);
    params_.Add(p + "fc1.b", {4 * c});
    weight(p + "fc2.w", {4 * c, c}, proj_std);
    params_.Add(p + "fc2.b", {c});
  }
  params_.Add("ln_f.g", {c});
  params_.Fill("ln_f.g", 1.0);
  params_.Add("ln_f.b", {c});
  weight("head_mu.w", {c, m}, std);
  params_.Add("head_mu.b", {m});
  weight("head_l.w", {c, m}, std);
  params_.Add("head_l.b", {m});
  params_.Add("audio_mean", {config_.audio_width}, false);
  params_.Add("audio_std", {config_.audio_width}, false);
  params_.Fill("audio_std", 1.0);
}

Tensor GptModel::Embed(const GptBatch& batch) const {
  const int b = batch.batch, n = batch.slots, c = config_.channels;
  if (n < 1 || n > config_.MaxSlots()) {
    throw ValidationError(fmt::format("GPT batch has {} slots; model supports 1..{}", n,
                                      config_.MaxSlots()));
  }
  const std::size_t cells = static_cast<std::size_t>(b) * n;
  if (batch.mu_codes.size() != cells || batch.l_codes.size() != cells ||
      batch.audio.size() != cells * config_.audio_width) {
    throw ValidationError("GPT batch buffers do not match batch x slots");
  }
  for (int code : batch.mu_codes) {
    if (code < 0 || code >= config_.vocab) {
      throw ValidationError(fmt::format("delta_mu code {} outside vocabulary of {}", code,
                                        config_.vocab));
    }
  }
  for (int code : batch.l_codes) {
    if (code < 0 || code >= config_.vocab) {
      throw ValidationError(fmt::format("delta_L code {} outside vocabulary of {}", code,
                                        config_.vocab));
    }
  }
  Tensor audio = Tensor::FromData({b, n, config_.audio_width}, batch.audio);
  Tensor a = nn::Linear(audio, params_.Get("audio.w"), params_.Get("audio.b"));
  Tensor mu = nn::Embedding(params_.Get("embed_mu"), batch.mu_codes);
  Tensor l = nn::Embedding(params_.Get("embed_l"), batch.l_codes);
  Tensor tokens = nn::ConcatCols({nn::Reshape(a, {b, n * c}), nn::Reshape(mu, {b, n * c}),
                                  nn::Reshape(l, {b, n * c})});
  tokens = nn::Reshape(tokens, {b * 3 * n, c});
  std::vector<int> pos;
  pos.reserve(static_cast<std::size_t>(b) * 3 * n);
  for (int i = 0; i < b; ++i) {
    for (int seg = 0; seg < 3; ++seg) {
      for (int s = 0; s < n; ++s) pos.push_back(seg * config_.MaxSlots() + s);
    }
  }
  return nn::Add(tokens, nn::Embedding(params_.Get("pos"), pos));
}

Tensor GptModel::Block(int layer, const Tensor& x, int batch, int tokens,
                       std::mt19937_64* rng) const {
  const std::string p = fmt::format("block{}.", layer);
  const int c = config_.channels;
  auto drop = [&](const Tensor& t) {
    return rng != nullptr ? nn::Dropout(t, config_.dropout, *rng) : t;
  };
  Tensor h = nn::LayerNorm(x, params_.Get(p + "ln1.g"), params_.Get(p + "ln1.b"));
  Tensor qkv = nn::Linear(h, params_.Get(p + "attn.w"), params_.Get(p + "attn.b"));
  Tensor att = nn::MaskedAttention(nn::SliceCols(qkv, 0, c), nn::SliceCols(qkv, c, c),
                                   nn::SliceCols(qkv, 2 * c, c), batch, config_.heads,
                                   BlockCausalMask(tokens / 3));
  Tensor out = nn::Add(x, drop(nn::Linear(att, params_.Get(p + "proj.w"),
                                          params_.Get(p + "proj.b"))));
  h = nn::LayerNorm(out, params_.Get(p + "ln2.g"), params_.Get(p + "ln2.b"));
  h = nn::Gelu(nn::Linear(h, params_.Get(p + "fc1.w"), params_.Get(p + "fc1.b")));
  h = nn::Linear(h, params_.Get(p + "fc2.w"), params_.Get(p + "fc2.b"));
  return nn::Add(out, drop(h));
}

GptOutput GptModel::Forward(const GptBatch& batch, std::mt19937_64* rng) const {
  const int b = batch.batch, n = batch.slots, c = config_.channels;
  Tensor x = Embed(batch);
  if (rng != nullptr) x = nn::Dropout(x, config_.dropout, *rng);
  for (int l = 0; l < config_.layers; ++l) x = Block(l, x, b, 3 * n, rng);
  x = nn::LayerNorm(x, params_.Get("ln_f.g"), params_.Get("ln_f.b"));
  // Probabilities are read only from the two code segments.
  Tensor rows = nn::Reshape(x, {b, 3 * n * c});
  Tensor mu = nn::Reshape(nn::SliceCols(rows, n * c, n * c), {b * n, c});
  Tensor l = nn::Reshape(nn::SliceCols(rows, 2 * n * c, n * c), {b * n, c});
  GptOutput out;
  out.mu_logits = nn::Linear(mu, params_.Get("head_mu.w"), params_.Get("head_mu.b"));
  out.l_logits = nn::Linear(l, params_.Get("head_l.w"), params_.Get("head_l.b"));
  return out;
}

Tensor GptLoss(const GptOutput& out, std::span<const int> mu_targets,
               std::span<const int> l_targets) {
  return nn::Scale(nn::Add(nn::SoftmaxCrossEntropy(out.mu_logits, mu_targets),
                           nn::SoftmaxCrossEntropy(out.l_logits, l_targets)),
                   0.5);
}

RowMat PoolRows(const RowMat& x, int factor) {
  if (factor < 1) throw ValidationError("pooling factor must be >= 1");
  const Eigen::Index groups = (x.rows() + factor - 1) / factor;
  RowMat out(groups, x.cols());
  for (Eigen::Index g = 0; g < groups; ++g) {
    const Eigen::Index start = g * factor;
    const Eigen::Index len = std::min<Eigen::Index>(factor, x.rows() - start);
    out.row(g) = x.middleRows(start, len).colwise().mean();
  }
  return out;
}

void GptModel::FitAudioNormalization(std::span<const RowMat> pooled_audio) {
  const int w = config_.audio_width;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(w), sq = Eigen::VectorXd::Zero(w);
  double n = 0.0;
  for (const RowMat& a : pooled_audio) {
    if (a.cols() != w) {
      throw ValidationError(fmt::format("audio features have width {}, model expects {}",
                                        a.cols(), w));
    }
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      sum += a.row(r).transpose();
      sq += a.row(r).transpose().cwiseAbs2();
      n += 1.0;
    }
  }
  if (n == 0.0) throw ValidationError("cannot fit audio normalization on no frames");
  const Eigen::VectorXd mean = sum / n;
  const Eigen::VectorXd std =
      (sq / n - mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt().cwiseMax(1e-6);
  auto m = params_.Get("audio_mean").mutable_data();
  auto s = params_.Get("audio_std").mutable_data();
  for (int j = 0; j < w; ++j) m[j] = mean[j], s[j] = std[j];
}

RowMat GptModel::NormalizeAudio(const RowMat& pooled) const {
  if (pooled.cols() != config_.audio_width) {
    throw ValidationError(fmt::format("audio features have width {}, model expects {}",
                                      pooled.cols(), config_.audio_width));
  }
  const auto m = params_.Get("audio_mean").data();
  const auto s = params_.Get("audio_std").data();
  RowMat out = pooled;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    for (Eigen::Index j = 0; j < out.cols(); ++j) out(r, j) = (out(r, j) - m[j]) / s[j];
  }
  return out;
}

namespace {

int Pick(std::span<const double> logits, const SampleOptions& opt, std::mt19937_64& rng) {
  const int m = static_cast<int>(logits.size());
  if (opt.temperature <= 0.0) {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<int> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return logits[a] > logits[b]; });
  const int keep = opt.top_k > 0 ? std::min(opt.top_k, m) : m;
  std::vector<double> w(static_cast<std::size_t>(keep));
  for (int i = 0; i < keep; ++i) {
    w[i] = std::exp((logits[order[i]] - logits[order[0]]) / opt.temperature);
  }
  std::discrete_distribution<int> dist(w.begin(), w.end());
  return order[dist(rng)];
}

}  // namespace

std::pair<std::vector<int>, std::vector<int>> GptModel::Generate(
    const RowMat& audio, std::vector<int> mu, std::vector<int> l, int steps,
    const SampleOptions& sampling) const {
  nn::NoGradGuard no_grad;
  if (steps < 1) throw UsageError("generation needs at least one step");
  if (mu.empty() || mu.size() != l.size()) {
    throw ValidationError("generation needs matching, non-empty seed codes for both streams");
  }
  const std::size_t needed = mu.size() + static_cast<std::size_t>(steps);
  if (static_cast<std::size_t>(audio.rows()) < needed) {
    throw ValidationError(fmt::format("audio covers {} chunks but {} are required",
                                      audio.rows(), needed));
  }
  std::mt19937_64 rng(sampling.seed);
  for (int step = 0; step < steps; ++step) {
    const int len = static_cast<int>(mu.size());
    const int n = std::min(len, config_.MaxSlots());
    const int start = len - n;
    GptBatch b;
    b.batch = 1;
    b.slots = n;
    for (int i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < audio.cols(); ++j) b.audio.push_back(audio(start + i + 1, j));
      b.mu_codes.push_back(mu[start + i]);
      b.l_codes.push_back(l[start + i]);
    }
    GptOutput out = Forward(b);
    const int m = config_.vocab;
    const auto last_mu = out.mu_logits.data().subspan(static_cast<std::size_t>(n - 1) * m, m);
    const auto last_l = out.l_logits.data().subspan(static_cast<std::size_t>(n - 1) * m, m);
    mu.push_back(Pick(last_mu, sampling, rng));
    l.push_back(Pick(last_l, sampling, rng));
  }
  return {std::move(mu), std::move(l)};
}

nn::Checkpoint GptModel::ToCheckpoint(const std::string& config_digest) const {
  nn::Checkpoint ckpt;
  ckpt.kind = "gpt";
  ckpt.config_digest = config_digest;
  ckpt.config = {{"gpt", config_.ToJson()}};
  ckpt.meta = nlohmann::json::object();
  ckpt.params = params_;
  return ckpt;
}

GptTrainReport TrainGpt(GptModel& model, std::span<const GptExample> examples,
                        const GptTrainOptions& options) {
  if (examples.empty()) throw ValidationError("GPT training set is empty");
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(options.seed);
  std::mt19937_64 dropout_rng(options.seed ^ 0x5deece66dULL);
  nn::Adam adam(model.params(), {.lr = options.lr});
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  GptTrainReport report;
  for (int step = 1; step <= options.steps; ++step) {
    std::vector<const GptExample*> batch;
    for (int b = 0; b < options.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&examples[order[cursor++]]);
    }
    GptBatch gb = MakeTrainingBatch(batch);
    Tensor loss = GptLoss(model.Forward(gb, &dropout_rng), gb.mu_targets, gb.l_targets);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericalError(fmt::format("GPT loss is not finite at step {}", step));
    }
    loss.Backward();
    adam.Step();
    report.loss_history.push_back(value);
    if (options.log_every > 0 && step % options.log_every == 0) {
      spdlog::info("gpt step {} loss {:.5f}", step, value);
    }
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

double NextCodeAccuracy(const GptModel& model, std::span<const GptExample> examples) {
  nn::NoGradGuard no_grad;
  if (examples.empty()) throw ValidationError("no examples to score");
  long correct = 0, total = 0;
  for (const GptExample& ex : examples) {
    const GptExample* ptr = &ex;
    GptBatch b = MakeTrainingBatch({&ptr, 1});
    GptOutput out = model.Forward(b);
    const int m = model.config().vocab;
    for (int i = 0; i < b.slots; ++i) {
      const auto mu = out.mu_logits.data().subspan(static_cast<std::size_t>(i) * m, m);
      const auto l = out.l_logits.data().subspan(static_cast<std::size_t>(i) * m, m);
      correct += (std::max_element(mu.begin(), mu.end()) - mu.begin()) == b.mu_targets[i];
      correct += (std::max_element(l.begin(), l.end()) - l.begin()) == b.l_targets[i];
      total += 2;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace angie::gpt
