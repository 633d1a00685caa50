#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "angie/audio.hpp"
#include "angie/config.hpp"
#include "angie/errors.hpp"
#include "angie/pipeline.hpp"
#include "angie/render.hpp"
#include "angie/runtime.hpp"

namespace {

using angie::config::PipelineConfig;
namespace pl = angie::pipeline;

struct GlobalOptions {
  std::string preset = "desk";
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string quant_mode;
  std::string log_level = "info";
  bool force = false;
};

PipelineConfig Resolve(const GlobalOptions& g) {
  PipelineConfig cfg = PipelineConfig::ForPreset(g.preset);
  if (!g.config_file.empty()) cfg = angie::config::LoadConfigFile(g.config_file, cfg);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw angie::UsageError("--set expects key=value, got " + kv);
    cfg.Set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) cfg.seed = *g.seed;
  if (!g.quant_mode.empty()) cfg.Set("vq.mode", g.quant_mode);
  cfg.Validate();
  return cfg;
}

void Report(const pl::StageResult& r) {
  nlohmann::json out{{"stage", r.stage},
                     {"artifact", r.artifact},
                     {"seconds", r.seconds},
                     {"metrics", r.metrics}};
  std::cout << out.dump(2) << std::endl;
}

std::string RenderDir(const std::string& output) {
  std::filesystem::path p(output);
  return (p.parent_path() / (p.stem().string() + "_render")).string();
}

std::vector<angie::motion::MotionSequence> ReadAll(const std::vector<std::string>& paths,
                                                   std::vector<std::optional<angie::audio::Waveform>>* audio) {
  std::vector<angie::motion::MotionSequence> out;
  for (const auto& path : paths) {
    for (const auto& file : pl::ExpandMotionPaths(path)) {
      out.push_back(angie::motion::ReadMotionFile(file));
      if (audio) {
        const auto wav = std::filesystem::path(file).replace_extension(".wav");
        if (std::filesystem::exists(wav)) {
          audio->emplace_back(angie::audio::ReadWav(wav.string()));
        } else {
          audio->emplace_back(std::nullopt);
        }
      }
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  angie::TuneAllocator();
  CLI::App app{"Co-speech gesture generation on region motion: corpus, training, generation, "
               "evaluation"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--preset", g.preset, "Hyperparameter preset")
      ->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--config", g.config_file, "key = value configuration file")
      ->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Override one key (key=value); repeatable");
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--quant-mode", g.quant_mode,
                 "abs_mu_abs_L, rel_mu_abs_L, abs_mu_rel_L, rel_mu_rel_L or naive_mu_C_A");
  app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error or off");
  app.add_flag("--force", g.force, "Overwrite existing artifacts");

  auto* config_cmd = app.add_subcommand("config", "Print the effective configuration");
  auto* corpus_cmd = app.add_subcommand("make-corpus", "Write the synthetic corpus");
  auto* vq_cmd = app.add_subcommand("train-vq", "Train the motion quantizer");
  auto* gpt_cmd = app.add_subcommand("train-gpt", "Train the code transformer (needs train-vq)");
  auto* refine_cmd =
      app.add_subcommand("train-refine", "Train the refinement network (needs train-gpt)");

  auto* gen_cmd = app.add_subcommand("generate", "Generate motion for an audio clip");
  std::string audio_path, onset_path, init_path, output;
  int frames = 0;
  bool no_refine = false, render = false;
  angie::gpt::SampleOptions sampling;
  gen_cmd->add_option("--audio", audio_path, "16 kHz mono WAV")->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--init", init_path, "Motion file whose first frame starts the motion")
      ->required()
      ->check(CLI::ExistingFile);
  gen_cmd->add_option("--onset", onset_path, "Onset feature file (with paths.onset)")
      ->check(CLI::ExistingFile);
  gen_cmd->add_option("--frames", frames, "Length in frames; 0 covers the audio");
  gen_cmd->add_option("--out", output, "Output motion file")->required();
  gen_cmd->add_option("--temperature", sampling.temperature, "0 selects greedy decoding");
  gen_cmd->add_option("--top-k", sampling.top_k, "Sample among the k best codes");
  gen_cmd->add_option("--sample-seed", sampling.seed, "Seed of the code sampler");
  gen_cmd->add_flag("--no-refine", no_refine, "Skip refinement (pattern only)");
  gen_cmd->add_flag("--render", render, "Also write ellipse frames and an animation");

  auto* eval_cmd = app.add_subcommand("eval", "FGD, beat consistency and diversity");
  std::vector<std::string> generated, reference;
  eval_cmd->add_option("--generated", generated, "Motion files or directories");
  eval_cmd->add_option("--reference", reference, "Motion files or directories");
  eval_cmd->add_flag("--no-refine", no_refine, "Evaluate the pattern-only path");

  auto* inspect_cmd = app.add_subcommand("inspect-codebook", "Decode one repeated code");
  int entry = 0, chunks = 0;
  std::string stream_name;
  inspect_cmd->add_option("--entry", entry, "Codebook entry")->required();
  inspect_cmd->add_option("--stream", stream_name, "Stream name (default: the first)");
  inspect_cmd->add_option("--init", init_path, "Motion file whose first frame starts the clip")
      ->required()
      ->check(CLI::ExistingFile);
  inspect_cmd->add_option("--chunks", chunks, "Number of repetitions (default: one clip)");
  inspect_cmd->add_option("--out", output, "Output motion file")->required();
  inspect_cmd->add_flag("--render", render, "Also write ellipse frames and an animation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    spdlog::set_level(spdlog::level::from_str(g.log_level));
    const PipelineConfig cfg = Resolve(g);
    spdlog::debug("config digest {}", cfg.Digest());

    if (*config_cmd) {
      std::cout << "# digest " << cfg.Digest() << "\n" << cfg.Dump();
    } else if (*corpus_cmd) {
      Report(pl::MakeCorpusStage(cfg, g.force));
    } else if (*vq_cmd) {
      Report(pl::TrainVqStage(cfg, g.force));
    } else if (*gpt_cmd) {
      Report(pl::TrainGptStage(cfg, g.force));
    } else if (*refine_cmd) {
      Report(pl::TrainRefineStage(cfg, g.force));
    } else if (*gen_cmd) {
      if (std::filesystem::exists(output) && !g.force) {
        throw angie::UsageError(output + " already exists; pass --force to overwrite it");
      }
      pl::GenerateRequest req;
      req.audio = angie::audio::ReadWav(audio_path);
      req.init = angie::motion::ReadMotionFile(init_path);
      req.frames = frames;
      req.refine = !no_refine;
      req.sampling = sampling;
      if (!onset_path.empty()) {
        req.onset = angie::audio::LoadOnsetFile(onset_path).Matrix();
      }
      pl::StageResult r = pl::GenerateStage(cfg, req, output);
      if (render) {
        r.metrics["animation"] =
            angie::render::RenderSequence(angie::motion::ReadMotionFile(output), RenderDir(output));
      }
      Report(r);
    } else if (*eval_cmd) {
      std::optional<pl::EvalInput> input;
      if (!generated.empty() || !reference.empty()) {
        if (generated.empty() || reference.empty()) {
          throw angie::UsageError("eval needs both --generated and --reference, or neither");
        }
        input.emplace();
        input->generated = ReadAll(generated, &input->audio);
        input->reference = ReadAll(reference, nullptr);
      }
      Report(pl::EvalStage(cfg, input, !no_refine));
    } else if (*inspect_cmd) {
      if (std::filesystem::exists(output) && !g.force) {
        throw angie::UsageError(output + " already exists; pass --force to overwrite it");
      }
      const angie::vq::VqModel vq = pl::LoadVq(cfg);
      int stream = 0;
      if (!stream_name.empty()) {
        stream = -1;
        for (std::size_t s = 0; s < vq.streams().size(); ++s) {
          if (vq.streams()[s].name == stream_name) stream = static_cast<int>(s);
        }
        if (stream < 0) throw angie::ValidationError("the VQ model has no stream " + stream_name);
      }
      const int factor = cfg.vq.DownsampleFactor();
      if (chunks == 0) chunks = cfg.clip_length / factor;
      const auto init = angie::motion::ReadMotionFile(init_path);
      const auto seq = pl::InspectCodebook(vq, stream, entry, init.Frame(0), chunks,
                                           cfg.clip_length, cfg.corpus.fps);
      angie::motion::WriteMotionFile(output, seq);
      pl::StageResult r{"inspect-codebook", output, {}, 0.0};
      r.metrics = {{"stream", vq.streams()[stream].name}, {"entry", entry}, {"frames", seq.frames()}};
      if (render) r.metrics["animation"] = angie::render::RenderSequence(seq, RenderDir(output));
      Report(r);
    }
  } catch (const angie::UsageError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const angie::ValidationError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const angie::NumericalError& e) {
    spdlog::error("numerical failure: {}", e.what());
    return 3;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}
