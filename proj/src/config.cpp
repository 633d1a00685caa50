#include "angie/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <openssl/evp.h>

#include "angie/errors.hpp"

namespace angie::config {

namespace {

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int ParseInt(const std::string& key, const std::string& v) {
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ValidationError(fmt::format("config key '{}' expects an integer, got '{}'", key, v));
  }
  return out;
}

std::uint64_t ParseU64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ValidationError(
        fmt::format("config key '{}' expects a non-negative integer, got '{}'", key, v));
  }
  return out;
}

double ParseDouble(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(out)) {
    throw ValidationError(fmt::format("config key '{}' expects a number, got '{}'", key, v));
  }
  return out;
}

std::vector<int> ParseIntList(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(ParseInt(key, Trim(item)));
  if (out.empty()) throw ValidationError(fmt::format("config key '{}' expects a list", key));
  return out;
}

std::string FormatDouble(double v) { return fmt::format("{}", v); }

std::string FormatList(const std::vector<int>& v) { return fmt::format("{}", fmt::join(v, ",")); }

struct Field {
  std::string key;
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

#define ANGIE_INT(KEY, EXPR)                                                              \
  Field {                                                                                 \
    KEY, [](PipelineConfig& c, const std::string& v) { EXPR = ParseInt(KEY, v); },        \
        [](const PipelineConfig& c) { return std::to_string(EXPR); }                      \
  }
#define ANGIE_DOUBLE(KEY, EXPR)                                                           \
  Field {                                                                                 \
    KEY, [](PipelineConfig& c, const std::string& v) { EXPR = ParseDouble(KEY, v); },     \
        [](const PipelineConfig& c) { return FormatDouble(EXPR); }                        \
  }
#define ANGIE_STRING(KEY, EXPR)                                                           \
  Field {                                                                                 \
    KEY, [](PipelineConfig& c, const std::string& v) { EXPR = v; },                       \
        [](const PipelineConfig& c) { return EXPR; }                                      \
  }
#define ANGIE_LIST(KEY, EXPR)                                                             \
  Field {                                                                                 \
    KEY, [](PipelineConfig& c, const std::string& v) { EXPR = ParseIntList(KEY, v); },    \
        [](const PipelineConfig& c) { return FormatList(EXPR); }                          \
  }

const std::vector<Field>& Schema() {
  static const std::vector<Field> fields = {
      ANGIE_STRING("preset", c.preset),
      Field{"seed", [](PipelineConfig& c, const std::string& v) { c.seed = ParseU64("seed", v); },
            [](const PipelineConfig& c) { return std::to_string(c.seed); }},
      ANGIE_INT("corpus.classes", c.corpus.classes),
      Field{"regions",
            [](PipelineConfig& c, const std::string& v) {
              const int k = ParseInt("regions", v);
              c.corpus.regions = c.vq.regions = c.refine.regions = c.features.regions = k;
            },
            [](const PipelineConfig& c) { return std::to_string(c.corpus.regions); }},
      ANGIE_INT("corpus.frames", c.corpus.frames),
      ANGIE_DOUBLE("corpus.fps", c.corpus.fps),
      ANGIE_DOUBLE("corpus.jitter_scale", c.corpus.jitter_scale),
      ANGIE_INT("corpus.period", c.corpus.period),
      ANGIE_INT("corpus.clips_per_class", c.clips_per_class),
      ANGIE_STRING("paths.corpus", c.corpus_dir),
      ANGIE_STRING("paths.work", c.work_dir),
      ANGIE_STRING("paths.onset", c.onset_dir),
      Field{"vq.mode",
            [](PipelineConfig& c, const std::string& v) { c.vq.mode = vq::ParseMode(v); },
            [](const PipelineConfig& c) { return vq::ModeName(c.vq.mode); }},
      ANGIE_INT("vq.codebook_size", c.vq.codebook_size),
      ANGIE_INT("vq.width", c.vq.width),
      ANGIE_INT("vq.layers", c.vq.layers),
      ANGIE_INT("vq.kernel", c.vq.kernel),
      ANGIE_DOUBLE("vq.beta", c.vq.beta),
      ANGIE_INT("vq.dead_code_steps", c.vq.dead_code_steps),
      ANGIE_INT("vq.steps", c.vq_train.steps),
      ANGIE_INT("vq.batch_size", c.vq_train.batch_size),
      ANGIE_DOUBLE("vq.lr", c.vq_train.lr),
      ANGIE_INT("vq.clip_length", c.clip_length),
      ANGIE_INT("vq.clip_stride", c.clip_stride),
      ANGIE_INT("gpt.layers", c.gpt.layers),
      ANGIE_INT("gpt.channels", c.gpt.channels),
      ANGIE_INT("gpt.heads", c.gpt.heads),
      ANGIE_DOUBLE("gpt.dropout", c.gpt.dropout),
      ANGIE_INT("gpt.steps", c.gpt_train.steps),
      ANGIE_INT("gpt.batch_size", c.gpt_train.batch_size),
      ANGIE_DOUBLE("gpt.lr", c.gpt_train.lr),
      ANGIE_LIST("refine.conv_channels", c.refine.audio.conv_channels),
      ANGIE_LIST("refine.linear", c.refine.audio.linear),
      ANGIE_INT("refine.hidden", c.refine.hidden),
      ANGIE_DOUBLE("refine.gain_init", c.refine.gain_init),
      ANGIE_INT("refine.steps", c.refine_train.steps),
      ANGIE_INT("refine.batch_size", c.refine_train.batch_size),
      ANGIE_DOUBLE("refine.lr", c.refine_train.lr),
      ANGIE_INT("features.window", c.features.window),
      ANGIE_INT("features.hidden", c.features.hidden),
      ANGIE_INT("features.dim", c.features.dim),
      ANGIE_INT("features.steps", c.feature_train.steps),
      ANGIE_INT("features.batch_size", c.feature_train.batch_size),
      ANGIE_DOUBLE("features.lr", c.feature_train.lr),
      ANGIE_INT("eval.diversity_pairs", c.diversity_pairs),
      ANGIE_INT("eval.diversity_seeds", c.diversity_seeds),
      ANGIE_DOUBLE("eval.bc_sigma", c.bc_sigma),
  };
  return fields;
}

#undef ANGIE_INT
#undef ANGIE_DOUBLE
#undef ANGIE_STRING
#undef ANGIE_LIST

const Field& Find(const std::string& key) {
  for (const auto& f : Schema()) {
    if (f.key == key) return f;
  }
  throw ValidationError(fmt::format("unknown config key '{}'", key));
}

}  // namespace

PipelineConfig PipelineConfig::Desk() {
  PipelineConfig c;
  c.vq.dead_code_steps = 30;
  return c;
}

PipelineConfig PipelineConfig::Paper() {
  PipelineConfig c;
  c.preset = "paper";
  c.corpus.regions = 20;
  c.vq.regions = 20;
  c.vq.codebook_size = 512;
  c.vq.width = 512;
  c.vq_train = {1500, 16, 3e-5};
  c.gpt.layers = 12;
  c.gpt.channels = 768;
  c.gpt.heads = 12;
  c.gpt_train = {2000, 16, 3e-5};
  c.refine.audio = refine::AudioEncoderConfig::Paper();
  c.refine.regions = 20;
  c.refine_train = {2000, 8, 3e-5};
  c.features.regions = 20;
  return c;
}

PipelineConfig PipelineConfig::ForPreset(const std::string& name) {
  if (name == "desk") return Desk();
  if (name == "paper") return Paper();
  throw UsageError(fmt::format("unknown preset '{}' (expected desk or paper)", name));
}

void PipelineConfig::Set(const std::string& key, const std::string& value) {
  Find(key).set(*this, Trim(value));
}

std::string PipelineConfig::Get(const std::string& key) const { return Find(key).get(*this); }

std::vector<std::string> PipelineConfig::Keys() {
  std::vector<std::string> out;
  for (const auto& f : Schema()) out.push_back(f.key);
  return out;
}

void PipelineConfig::Validate() const {
  auto positive = [](const char* key, double v) {
    if (!(v > 0)) throw ValidationError(fmt::format("config key '{}' must be positive", key));
  };
  if (corpus.classes < 1) throw ValidationError("corpus.classes must be >= 1");
  if (corpus.frames < 2) throw ValidationError("corpus.frames must be at least 2");
  positive("corpus.fps", corpus.fps);
  if (corpus.jitter_scale < 0) throw ValidationError("corpus.jitter_scale must be >= 0");
  if (clips_per_class < 2) throw ValidationError("corpus.clips_per_class must be >= 2");
  if (corpus.regions != vq.regions || corpus.regions != refine.regions ||
      corpus.regions != features.regions) {
    throw ValidationError(fmt::format(
        "region counts disagree: corpus {}, vq {}, refine {}, features {}", corpus.regions,
        vq.regions, refine.regions, features.regions));
  }
  vq.Validate();
  if (clip_length % vq.DownsampleFactor() != 0 || clip_length > corpus.frames) {
    throw ValidationError(fmt::format("vq.clip_length {} must divide by {} and fit in {} frames",
                                      clip_length, vq.DownsampleFactor(), corpus.frames));
  }
  if (corpus.frames % vq.DownsampleFactor() != 0) {
    throw ValidationError(fmt::format("corpus.frames {} must be a multiple of {}", corpus.frames,
                                      vq.DownsampleFactor()));
  }
  if (clip_stride < 1) throw ValidationError("vq.clip_stride must be >= 1");
  GptModelConfig().Validate();
  refine.Validate();
  features.Validate();
  if (features.window > corpus.frames) {
    throw ValidationError("features.window must not exceed corpus.frames");
  }
  for (const auto* s : {&vq_train, &gpt_train, &refine_train, &feature_train}) {
    if (s->steps < 0 || s->batch_size < 1) {
      throw ValidationError("training steps must be >= 0 and batch sizes >= 1");
    }
    positive("lr", s->lr);
  }
  if (diversity_pairs < 1 || diversity_seeds < 1) {
    throw ValidationError("diversity needs at least one pair and one seed");
  }
  positive("eval.bc_sigma", bc_sigma);
}

gpt::GptConfig PipelineConfig::GptModelConfig() const {
  gpt::GptConfig g = gpt;
  g.vocab = vq.codebook_size;
  g.context = clip_length / vq.DownsampleFactor();
  g.audio_width = onset_dir.empty() ? audio::kBuiltinOnsetWidth : audio::kPaperOnsetWidth;
  return g;
}

std::string PipelineConfig::Dump() const {
  std::string out;
  for (const auto& f : Schema()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

std::string PipelineConfig::Digest() const { return Sha256Hex(Dump()); }

void ApplyConfigText(PipelineConfig& base, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = Trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(fmt::format("{}:{}: expected 'key = value'", origin, number));
    }
    try {
      base.Set(Trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ValidationError& e) {
      throw ValidationError(fmt::format("{}:{}: {}", origin, number, e.what()));
    }
  }
}

PipelineConfig LoadConfigFile(const std::string& path, PipelineConfig base) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  ApplyConfigText(base, ss.str(), path);
  return base;
}

std::string Sha256Hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw NumericalError("SHA-256 computation failed");
  }
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

std::string FileSha256(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return Sha256Hex(ss.str());
}

}  // namespace angie::config
