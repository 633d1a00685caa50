#include "angie/vq.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "angie/errors.hpp"

namespace angie::vq {

using motion::MotionSequence;
using nn::RowMat;
using nn::Tensor;

std::string ModeName(QuantizationMode mode) {
  switch (mode) {
    case QuantizationMode::kAbsMuAbsL: return "abs_mu_abs_L";
    case QuantizationMode::kRelMuAbsL: return "rel_mu_abs_L";
    case QuantizationMode::kAbsMuRelL: return "abs_mu_rel_L";
    case QuantizationMode::kRelMuRelL: return "rel_mu_rel_L";
    case QuantizationMode::kNaiveMuCA: return "naive_mu_C_A";
  }
  return "unknown";
}

QuantizationMode ParseMode(const std::string& name) {
  for (auto m : {QuantizationMode::kAbsMuAbsL, QuantizationMode::kRelMuAbsL,
                 QuantizationMode::kAbsMuRelL, QuantizationMode::kRelMuRelL,
                 QuantizationMode::kNaiveMuCA}) {
    if (ModeName(m) == name) return m;
  }
  throw ValidationError("unknown quantization mode '" + name +
                        "' (expected abs_mu_abs_L, rel_mu_abs_L, abs_mu_rel_L, "
                        "rel_mu_rel_L or naive_mu_C_A)");
}

std::vector<StreamSpec> StreamsFor(QuantizationMode mode, int regions) {
  switch (mode) {
    case QuantizationMode::kAbsMuAbsL:
      return {{"mu", StreamKind::kMu, false, 2 * regions},
              {"L", StreamKind::kL, false, 3 * regions}};
    case QuantizationMode::kRelMuAbsL:
      return {{"delta_mu", StreamKind::kMu, true, 2 * regions},
              {"L", StreamKind::kL, false, 3 * regions}};
    case QuantizationMode::kAbsMuRelL:
      return {{"mu", StreamKind::kMu, false, 2 * regions},
              {"delta_L", StreamKind::kL, true, 3 * regions}};
    case QuantizationMode::kRelMuRelL:
      return {{"delta_mu", StreamKind::kMu, true, 2 * regions},
              {"delta_L", StreamKind::kL, true, 3 * regions}};
    case QuantizationMode::kNaiveMuCA:
      return {{"mu", StreamKind::kMu, false, 2 * regions},
              {"C", StreamKind::kCovariance, false, 4 * regions},
              {"A", StreamKind::kAffine, false, 4 * regions}};
  }
  return {};
}

QuantizeResult Quantize(const RowMat& latents, const RowMat& codebook) {
  if (codebook.rows() < 1) throw ValidationError("codebook is empty");
  if (latents.cols() != codebook.cols()) {
    throw ValidationError(fmt::format("latent width {} != codebook width {}",
                                      latents.cols(), codebook.cols()));
  }
  QuantizeResult r;
  r.quantized.resize(latents.rows(), latents.cols());
  r.indices.resize(static_cast<std::size_t>(latents.rows()));
  for (Eigen::Index i = 0; i < latents.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    Eigen::Index best_m = 0;
    for (Eigen::Index m = 0; m < codebook.rows(); ++m) {
      const double d = (latents.row(i) - codebook.row(m)).squaredNorm();
      if (d < best) {
        best = d;
        best_m = m;
      }
    }
    r.indices[static_cast<std::size_t>(i)] = static_cast<int>(best_m);
    r.quantized.row(i) = codebook.row(best_m);
  }
  return r;
}

double Perplexity(std::span<const int> indices, int codebook_size) {
  if (indices.empty()) return 0.0;
  std::vector<double> counts(static_cast<std::size_t>(codebook_size), 0.0);
  for (int i : indices) counts.at(static_cast<std::size_t>(i)) += 1.0;
  double h = 0.0;
  for (double c : counts) {
    if (c > 0.0) {
      const double p = c / static_cast<double>(indices.size());
      h -= p * std::log(p);
    }
  }
  return std::exp(h);
}

void VqConfig::Validate() const {
  if (regions < 1) throw ValidationError("vq: regions must be >= 1");
  if (codebook_size < 2) throw ValidationError("vq: codebook size must be >= 2");
  if (width < 1) throw ValidationError("vq: width must be >= 1");
  if (layers < 1 || kernel < 1) throw ValidationError("vq: bad conv geometry");
  if (beta < 0.0) throw ValidationError("vq: beta must be >= 0");
}

nlohmann::json VqConfig::ToJson() const {
  return {{"regions", regions},       {"codebook_size", codebook_size},
          {"width", width},           {"layers", layers},
          {"kernel", kernel},         {"beta", beta},
          {"mode", ModeName(mode)},   {"dead_code_steps", dead_code_steps}};
}

VqConfig VqConfig::FromJson(const nlohmann::json& j) {
  VqConfig c;
  c.regions = j.at("regions");
  c.codebook_size = j.at("codebook_size");
  c.width = j.at("width");
  c.layers = j.at("layers");
  c.kernel = j.at("kernel");
  c.beta = j.at("beta");
  c.mode = ParseMode(j.at("mode"));
  c.dead_code_steps = j.at("dead_code_steps");
  return c;
}

VqLossTerms VqLoss(const Tensor& x, const Tensor& x_hat, const Tensor& e,
                   const Tensor& e_q, double beta) {
  Tensor recon = nn::SumSquares(nn::Sub(x_hat, x));
  Tensor book = nn::SumSquares(nn::Sub(nn::Detach(e), e_q));
  Tensor commit = nn::Scale(nn::SumSquares(nn::Sub(e, nn::Detach(e_q))), beta);
  VqLossTerms t;
  t.reconstruction = recon.item();
  t.codebook = book.item();
  t.commitment = commit.item();
  t.total = nn::Add(nn::Add(recon, book), commit);
  return t;
}

VqModel::VqModel(const VqConfig& config, std::uint64_t seed) : config_(config) {
  config_.Validate();
  streams_ = StreamsFor(config_.mode, config_.regions);
  Build(seed);
}

VqModel::VqModel(const nn::Checkpoint& ckpt) {
  if (ckpt.kind != "vq") throw ValidationError("checkpoint is not a VQ model: " + ckpt.kind);
  config_ = VqConfig::FromJson(ckpt.config.at("vq"));
  config_.Validate();
  streams_ = StreamsFor(config_.mode, config_.regions);
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

std::string VqModel::Prefix(int stream) const { return streams_.at(stream).name + "."; }

void VqModel::Build(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int w = config_.width, k = config_.kernel;
  for (int s = 0; s < static_cast<int>(streams_.size()); ++s) {
    const std::string p = Prefix(s);
    const int c = streams_[s].channels;
    for (int i = 0; i < config_.layers; ++i) {
      const int cin = i == 0 ? c : w;
      const double bound = 1.0 / std::sqrt(static_cast<double>(k * cin));
      params_.Add(p + fmt::format("enc{}.w", i), {k * cin, w});
      params_.Add(p + fmt::format("enc{}.b", i), {w});
      params_.InitUniform(p + fmt::format("enc{}.w", i), bound, rng);
      params_.InitUniform(p + fmt::format("enc{}.b", i), bound, rng);
    }
    for (int i = 0; i < config_.layers; ++i) {
      const int cout = i + 1 == config_.layers ? c : w;
      const double bound = 1.0 / std::sqrt(static_cast<double>(k * w));
      params_.Add(p + fmt::format("dec{}.w", i), {k * w, cout});
      params_.Add(p + fmt::format("dec{}.b", i), {cout});
      params_.InitUniform(p + fmt::format("dec{}.w", i), bound, rng);
      params_.InitUniform(p + fmt::format("dec{}.b", i), bound, rng);
    }
    params_.Add(p + "codebook", {config_.codebook_size, w});
    params_.InitNormal(p + "codebook", 1.0 / std::sqrt(static_cast<double>(w)), rng);
    params_.Add(p + "norm_mean", {c}, false);
    params_.Add(p + "norm_std", {c}, false);
    params_.Fill(p + "norm_std", 1.0);
  }
  last_used_.assign(streams_.size(),
                    std::vector<long>(static_cast<std::size_t>(config_.codebook_size), 0));
}

RowMat VqModel::StreamValues(const MotionSequence& seq, int stream) const {
  const StreamSpec& spec = streams_.at(stream);
  if (seq.regions() != config_.regions) {
    throw ValidationError(fmt::format("sequence has {} regions, model expects {}",
                                      seq.regions(), config_.regions));
  }
  const int per = spec.channels / config_.regions;
  RowMat v = RowMat::Zero(seq.frames(), spec.channels);
  auto region_values = [&](int t, int k, double* out) {
    const auto& f = seq.at(t, k);
    switch (spec.kind) {
      case StreamKind::kMu:
        out[0] = f.mu.x();
        out[1] = f.mu.y();
        break;
      case StreamKind::kL:
        out[0] = f.L.l1;
        out[1] = f.L.l2;
        out[2] = f.L.l3;
        break;
      case StreamKind::kCovariance: {
        const motion::Mat2 c = f.Covariance();
        out[0] = c(0, 0);
        out[1] = c(0, 1);
        out[2] = c(1, 0);
        out[3] = c(1, 1);
        break;
      }
      case StreamKind::kAffine: {
        const motion::Mat2 a = f.Affine();
        out[0] = a(0, 0);
        out[1] = a(0, 1);
        out[2] = a(1, 0);
        out[3] = a(1, 1);
        break;
      }
    }
  };
  std::vector<double> cur(static_cast<std::size_t>(per)), prev(static_cast<std::size_t>(per));
  for (int t = 0; t < seq.frames(); ++t) {
    for (int k = 0; k < config_.regions; ++k) {
      region_values(t, k, cur.data());
      if (spec.relative) {
        // Row 0 is the zero left-pad; row t holds frame t minus frame t-1.
        if (t == 0) continue;
        region_values(t - 1, k, prev.data());
        for (int j = 0; j < per; ++j) v(t, k * per + j) = cur[j] - prev[j];
      } else {
        for (int j = 0; j < per; ++j) v(t, k * per + j) = cur[j];
      }
    }
  }
  return v;
}

void VqModel::FitNormalization(std::span<const MotionSequence> corpus) {
  if (corpus.empty()) throw ValidationError("cannot fit normalization on empty corpus");
  for (int s = 0; s < static_cast<int>(streams_.size()); ++s) {
    const StreamSpec& spec = streams_[s];
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(spec.channels);
    Eigen::VectorXd sq = Eigen::VectorXd::Zero(spec.channels);
    double n = 0.0;
    for (const auto& seq : corpus) {
      RowMat v = StreamValues(seq, s);
      const int first = spec.relative ? 1 : 0;
      for (Eigen::Index t = first; t < v.rows(); ++t) {
        sum += v.row(t).transpose();
        sq += v.row(t).transpose().cwiseAbs2();
        n += 1.0;
      }
    }
    Eigen::VectorXd mean = sum / n;
    Eigen::VectorXd var = (sq / n - mean.cwiseAbs2()).cwiseMax(0.0);
    Eigen::VectorXd std = var.cwiseSqrt();
    // Relative streams stay zero-centred so a zero delta maps to a zero input.
    if (spec.relative) std = (sq / n).cwiseSqrt(), mean.setZero();
    const double floor = std::max(1e-3 * std.maxCoeff(), 1e-12);
    std = std.cwiseMax(floor);
    auto m = params_.Get(Prefix(s) + "norm_mean").mutable_data();
    auto d = params_.Get(Prefix(s) + "norm_std").mutable_data();
    for (int c = 0; c < spec.channels; ++c) {
      m[c] = mean[c];
      d[c] = std[c];
    }
  }
}

Tensor VqModel::StreamInput(std::span<const MotionSequence* const> batch, int stream) const {
  if (batch.empty()) throw ValidationError("empty batch");
  const int t = batch[0]->frames();
  if (t % config_.DownsampleFactor() != 0) {
    throw ValidationError(fmt::format("sequence length {} is not divisible by {}", t,
                                      config_.DownsampleFactor()));
  }
  const int c = streams_.at(stream).channels;
  const auto mean = params_.Get(Prefix(stream) + "norm_mean").data();
  const auto std = params_.Get(Prefix(stream) + "norm_std").data();
  std::vector<double> data;
  data.reserve(batch.size() * static_cast<std::size_t>(t) * c);
  for (const MotionSequence* seq : batch) {
    if (seq->frames() != t) throw ValidationError("batch sequences differ in length");
    RowMat v = StreamValues(*seq, stream);
    for (int i = 0; i < t; ++i) {
      for (int j = 0; j < c; ++j) {
        const bool pad = streams_[stream].relative && i == 0;
        data.push_back(pad ? 0.0 : (v(i, j) - mean[j]) / std[j]);
      }
    }
  }
  return Tensor::FromData({static_cast<int>(batch.size()), t, c}, std::move(data));
}

Tensor VqModel::Encode(int stream, const Tensor& x) const {
  const std::string p = Prefix(stream);
  if (x.rank() != 3 || x.dim(2) != streams_.at(stream).channels) {
    throw ValidationError(fmt::format("encoder for {} expects {} channels, got {}",
                                      streams_.at(stream).name, streams_.at(stream).channels,
                                      nn::ShapeString(x.shape())));
  }
  Tensor h = x;
  for (int i = 0; i < config_.layers; ++i) {
    h = nn::Conv1d(h, params_.Get(p + fmt::format("enc{}.w", i)),
                   params_.Get(p + fmt::format("enc{}.b", i)), config_.kernel, 2,
                   config_.kernel / 2);
    if (i + 1 < config_.layers) h = nn::Relu(h);
  }
  return h;
}

Tensor VqModel::Decode(int stream, const Tensor& e_q) const {
  const std::string p = Prefix(stream);
  Tensor h = e_q;
  for (int i = 0; i < config_.layers; ++i) {
    h = nn::Upsample1d(h, 2);
    h = nn::Conv1d(h, params_.Get(p + fmt::format("dec{}.w", i)),
                   params_.Get(p + fmt::format("dec{}.b", i)), config_.kernel, 1,
                   config_.kernel / 2);
    if (i + 1 < config_.layers) h = nn::Relu(h);
  }
  return h;
}

const Tensor& VqModel::Codebook(int stream) const {
  return params_.Get(Prefix(stream) + "codebook");
}

VqForwardResult VqModel::Forward(std::span<const MotionSequence* const> batch,
                                 bool bypass_quantization,
                                 const std::vector<std::vector<int>>* frozen_indices) const {
  VqForwardResult r;
  Tensor total;
  for (int s = 0; s < static_cast<int>(streams_.size()); ++s) {
    Tensor x = StreamInput(batch, s);
    Tensor e = Encode(s, x);
    const Tensor& book = Codebook(s);
    Tensor e_q, decoder_in;
    std::vector<int> idx;
    if (bypass_quantization) {
      e_q = nn::Detach(e);
      decoder_in = e;
    } else {
      if (frozen_indices != nullptr) {
        idx = frozen_indices->at(static_cast<std::size_t>(s));
      } else {
        idx = Quantize(RowMat(e.matrix()), RowMat(book.matrix())).indices;
      }
      e_q = nn::Reshape(nn::Embedding(book, idx), e.shape());
      decoder_in = nn::StraightThrough(e, e_q);
    }
    Tensor x_hat = Decode(s, decoder_in);
    VqLossTerms terms = VqLoss(x, x_hat, e, e_q, config_.beta);
    r.loss.reconstruction += terms.reconstruction;
    r.loss.codebook += terms.codebook;
    r.loss.commitment += terms.commitment;
    total = total.defined() ? nn::Add(total, terms.total) : terms.total;
    r.inputs.push_back(x);
    r.latents.push_back(e);
    r.outputs.push_back(x_hat);
    r.indices.push_back(std::move(idx));
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  r.loss.total = nn::Scale(total, inv_b);
  r.loss.reconstruction *= inv_b;
  r.loss.codebook *= inv_b;
  r.loss.commitment *= inv_b;
  return r;
}

std::vector<CodeSequence> VqModel::EncodeIndices(const MotionSequence& seq) const {
  nn::NoGradGuard no_grad;
  const MotionSequence* ptr = &seq;
  std::vector<CodeSequence> out;
  for (int s = 0; s < static_cast<int>(streams_.size()); ++s) {
    Tensor e = Encode(s, StreamInput({&ptr, 1}, s));
    QuantizeResult q = Quantize(RowMat(e.matrix()), RowMat(Codebook(s).matrix()));
    out.push_back({streams_[s].name, std::move(q.indices)});
  }
  return out;
}

RowMat VqModel::DecodeStreamValues(int stream, std::span<const int> codes) const {
  nn::NoGradGuard no_grad;
  for (int c : codes) {
    if (c < 0 || c >= config_.codebook_size) {
      throw ValidationError(fmt::format("code {} outside codebook of size {}", c,
                                        config_.codebook_size));
    }
  }
  const int tq = static_cast<int>(codes.size());
  Tensor e_q = nn::Reshape(nn::Embedding(Codebook(stream), codes), {1, tq, config_.width});
  Tensor x_hat = Decode(stream, e_q);
  RowMat v = x_hat.matrix();
  const auto mean = params_.Get(Prefix(stream) + "norm_mean").data();
  const auto std = params_.Get(Prefix(stream) + "norm_std").data();
  for (Eigen::Index t = 0; t < v.rows(); ++t) {
    for (Eigen::Index j = 0; j < v.cols(); ++j) v(t, j) = v(t, j) * std[j] + mean[j];
  }
  return v;
}

DecodedMotion VqModel::DecodeIndices(const std::vector<std::vector<int>>& codes,
                                     std::span<const motion::RegionMotionFrame> init,
                                     double fps) const {
  if (codes.size() != streams_.size()) {
    throw ValidationError(fmt::format("expected {} code streams, got {}", streams_.size(),
                                      codes.size()));
  }
  if (static_cast<int>(init.size()) != config_.regions) {
    throw ValidationError("initial frame region count does not match the model");
  }
  std::vector<RowMat> values;
  for (int s = 0; s < static_cast<int>(streams_.size()); ++s) {
    if (codes[s].empty()) throw ValidationError("empty code stream");
    values.push_back(DecodeStreamValues(s, codes[s]));
  }
  const int frames = static_cast<int>(values[0].rows());
  const int regions = config_.regions;
  DecodedMotion out;
  const bool rel_mu = streams_[0].relative;
  const bool rel_l = streams_.size() == 2 && streams_[1].relative;
  if (rel_mu && rel_l) {
    motion::RelativeMotionSequence rel;
    rel.steps = frames - 1;
    rel.regions = regions;
    for (int t = 1; t < frames; ++t) {
      for (int j = 0; j < 2 * regions; ++j) rel.d_mu.push_back(values[0](t, j));
      for (int j = 0; j < 3 * regions; ++j) rel.d_l.push_back(values[1](t, j));
    }
    out.sequence = motion::Integrate(init, rel, fps);
    return out;
  }
  out.sequence = MotionSequence(frames, regions, fps);
  for (int k = 0; k < regions; ++k) {
    motion::Vec2 mu = init[k].mu;
    motion::CholeskyFactor l = init[k].L;
    for (int t = 0; t < frames; ++t) {
      auto& f = out.sequence.at(t, k);
      const RowMat& vm = values[0];
      if (rel_mu) {
        if (t > 0) mu += motion::Vec2(vm(t, 2 * k), vm(t, 2 * k + 1));
        f.mu = mu;
      } else {
        f.mu = motion::Vec2(vm(t, 2 * k), vm(t, 2 * k + 1));
      }
      if (config_.mode == QuantizationMode::kNaiveMuCA) {
        const RowMat& vc = values[1];
        motion::Mat2 c;
        c << vc(t, 4 * k), vc(t, 4 * k + 1), vc(t, 4 * k + 2), vc(t, 4 * k + 3);
        if (motion::IsSymmetricPositiveDefinite(c)) {
          f.L = motion::CholeskyDecompose(0.5 * (c + c.transpose()));
        } else {
          ++out.invalid_covariances;
          const double l1 = std::sqrt(std::max(c(0, 0), 0.0));
          f.L = motion::ProjectPositiveDiagonal({l1, 0.0, 0.0});
        }
        continue;
      }
      const RowMat& vl = values[1];
      motion::CholeskyFactor raw{vl(t, 3 * k), vl(t, 3 * k + 1), vl(t, 3 * k + 2)};
      if (rel_l) {
        if (t > 0) {
          l.l1 += raw.l1;
          l.l2 += raw.l2;
          l.l3 += raw.l3;
        }
        f.L = motion::ClampPositiveDiagonal(l);
      } else {
        f.L = motion::ProjectPositiveDiagonal(raw);
      }
    }
  }
  return out;
}

int VqModel::ReviveDeadCodes(const VqForwardResult& fwd, long step, std::mt19937_64& rng) {
  int revived = 0;
  for (int s = 0; s < static_cast<int>(streams_.size()); ++s) {
    auto& used = last_used_[s];
    for (int idx : fwd.indices[s]) used[static_cast<std::size_t>(idx)] = step;
    const RowMat lat = fwd.latents[s].matrix();
    if (lat.rows() == 0) continue;
    auto book = params_.Get(Prefix(s) + "codebook").mutable_matrix();
    std::uniform_int_distribution<Eigen::Index> pick(0, lat.rows() - 1);
    for (int m = 0; m < config_.codebook_size; ++m) {
      if (step - used[static_cast<std::size_t>(m)] >= config_.dead_code_steps) {
        book.row(m) = lat.row(pick(rng));
        used[static_cast<std::size_t>(m)] = step;
        ++revived;
      }
    }
  }
  return revived;
}

void VqModel::CheckCodebooksDistinct() const {
  for (int s = 0; s < static_cast<int>(streams_.size()); ++s) {
    const RowMat book = Codebook(s).matrix();
    if (!book.allFinite()) throw NumericalError("codebook has non-finite entries");
    for (Eigen::Index a = 0; a < book.rows(); ++a) {
      for (Eigen::Index b = a + 1; b < book.rows(); ++b) {
        if (book.row(a) == book.row(b)) {
          throw ValidationError(fmt::format("codebook {} entries {} and {} coincide",
                                            streams_[s].name, a, b));
        }
      }
    }
  }
}

nn::Checkpoint VqModel::ToCheckpoint(const std::string& config_digest) const {
  nn::Checkpoint ckpt;
  ckpt.kind = "vq";
  ckpt.config_digest = config_digest;
  ckpt.config = {{"vq", config_.ToJson()}};
  ckpt.meta = nlohmann::json::object();
  ckpt.params = params_;
  return ckpt;
}

std::vector<MotionSequence> SampleClips(std::span<const MotionSequence> corpus,
                                        int clip_length, int stride) {
  if (clip_length < 1 || stride < 1) throw ValidationError("bad clip sampling geometry");
  std::vector<MotionSequence> clips;
  for (const auto& seq : corpus) {
    for (int start = 0; start + clip_length <= seq.frames(); start += stride) {
      MotionSequence clip(clip_length, seq.regions(), seq.fps());
      for (int t = 0; t < clip_length; ++t) {
        for (int k = 0; k < seq.regions(); ++k) clip.at(t, k) = seq.at(start + t, k);
      }
      clips.push_back(std::move(clip));
    }
  }
  return clips;
}

VqTrainReport TrainVq(VqModel& model, std::span<const MotionSequence> clips,
                      const VqTrainOptions& options) {
  if (clips.empty()) throw ValidationError("VQ training corpus is empty");
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(options.seed);
  nn::Adam adam(model.params(), {.lr = options.lr});
  std::vector<std::size_t> order(clips.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  VqTrainReport report;
  for (int step = 1; step <= options.steps; ++step) {
    std::vector<const MotionSequence*> batch;
    for (int b = 0; b < options.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&clips[order[cursor++]]);
    }
    VqForwardResult fwd = model.Forward(batch);
    const double loss = fwd.loss.total.item();
    if (!std::isfinite(loss)) {
      throw NumericalError(fmt::format(
          "VQ loss is not finite at step {} (reconstruction={:.6g}, codebook={:.6g}, "
          "commitment={:.6g})",
          step, fwd.loss.reconstruction, fwd.loss.codebook, fwd.loss.commitment));
    }
    fwd.loss.total.Backward();
    adam.Step();
    report.revived_codes += model.ReviveDeadCodes(fwd, step, rng);
    report.loss_history.push_back(loss);
    report.reconstruction_history.push_back(fwd.loss.reconstruction);
    if (options.log_every > 0 && step % options.log_every == 0) {
      spdlog::info("vq step {} loss {:.5f} recon {:.5f} codebook {:.5f} commit {:.5f}", step,
                   loss, fwd.loss.reconstruction, fwd.loss.codebook, fwd.loss.commitment);
    }
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::string DumpCodebook(const VqModel& model, int stream) {
  const RowMat book = model.Codebook(stream).matrix();
  std::string out;
  for (Eigen::Index m = 0; m < book.rows(); ++m) {
    out += std::to_string(m);
    for (Eigen::Index j = 0; j < book.cols(); ++j) out += fmt::format(" {:.9g}", book(m, j));
    out += "\n";
  }
  return out;
}

}  // namespace angie::vq
