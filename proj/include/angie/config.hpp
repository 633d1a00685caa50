#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "angie/gpt.hpp"
#include "angie/metrics.hpp"
#include "angie/refine.hpp"
#include "angie/synth.hpp"
#include "angie/vq.hpp"

// Every hyperparameter of every stage, in one flat key = value schema.
namespace angie::config {

struct TrainSchedule {
  int steps = 0;
  int batch_size = 16;
  double lr = 1e-3;
};

struct PipelineConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;

  synth::SynthOptions corpus;
  int clips_per_class = 40;
  std::string corpus_dir = "corpus";
  std::string work_dir = "run";
  // Directory of per-clip "<name>.onset" files; empty selects the built-in
  // onset features.
  std::string onset_dir;

  vq::VqConfig vq;
  TrainSchedule vq_train{600, 16, 1e-3};
  int clip_length = 96;
  int clip_stride = 32;

  gpt::GptConfig gpt;
  TrainSchedule gpt_train{1000, 16, 1e-3};

  refine::RefineConfig refine;
  TrainSchedule refine_train{200, 8, 1e-3};

  metrics::FeatureConfig features;
  TrainSchedule feature_train{400, 16, 1e-3};
  int diversity_pairs = 400;
  int diversity_seeds = 5;
  double bc_sigma = 0.1;

  static PipelineConfig Desk();
  static PipelineConfig Paper();
  static PipelineConfig ForPreset(const std::string& name);

  // Assigns one key from its text form; unknown keys and malformed values
  // throw ValidationError naming the key.
  void Set(const std::string& key, const std::string& value);
  std::string Get(const std::string& key) const;
  static std::vector<std::string> Keys();

  // GPT architecture with vocabulary, context and audio width filled in
  // from the VQ and audio settings.
  gpt::GptConfig GptModelConfig() const;

  void Validate() const;
  // "key = value" lines in schema order.
  std::string Dump() const;
  // SHA-256 of Dump(), hex.
  std::string Digest() const;
};

// Applies "key = value" lines ('#' starts a comment) on top of `base`.
void ApplyConfigText(PipelineConfig& base, const std::string& text, const std::string& origin);
PipelineConfig LoadConfigFile(const std::string& path, PipelineConfig base);

std::string Sha256Hex(const std::string& bytes);
std::string FileSha256(const std::string& path);

}  // namespace angie::config
