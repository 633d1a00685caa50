#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "angie/audio.hpp"
#include "angie/motion.hpp"

// Synthetic gesture corpus: periodic per-class motion templates plus a smooth
// rhythmic jitter whose amplitude is carried by a tone in the paired audio.
namespace angie::synth {

struct SynthOptions {
  int classes = 8;
  int regions = 4;
  int frames = 96;
  double fps = 25.0;
  double jitter_scale = 0.02;
  int period = 16;  // template period in frames
};

// Pitch of the tone identifying class `c` and of the jitter carrier.
double ClassToneHz(int class_id);
inline constexpr double kDriverHz = 3136.0;

struct SynthClip {
  std::string name;  // file stem inside a saved corpus
  int class_id = 0;
  std::uint64_t seed = 0;
  int phase = 0;  // template time offset in frames
  motion::MotionSequence motion;
  motion::MotionSequence clean;  // template without jitter
  audio::Waveform audio;
  std::vector<double> envelope;  // jitter driver per frame, in [0, 1]
  int clipped_frames = 0;        // frames whose diagonal needed clamping
};

// Jitter-free template for a class, starting `phase` frames into its cycle.
motion::MotionSequence TemplateMotion(int class_id, int phase, const SynthOptions& opt);

// Jitter direction of region k for mu (unit vector).
motion::Vec2 JitterDirection(int region);

SynthClip MakeClip(int class_id, std::uint64_t seed, const SynthOptions& opt);

// Per-frame magnitude of the jitter carrier measured from the audio alone.
std::vector<double> MeasureDriverEnvelope(const audio::Waveform& w, int frames, double fps);

// Per-frame size of the applied jitter, |motion - clean| over mu.
std::vector<double> JitterMagnitude(const SynthClip& clip);

struct Corpus {
  SynthOptions options;
  std::uint64_t seed = 0;
  std::vector<SynthClip> train;
  std::vector<SynthClip> eval;
};

// n_per_class clips per class; 10% of each class (at least one) held out.
Corpus MakeCorpus(const SynthOptions& opt, int n_per_class, std::uint64_t seed);

// Directory layout: manifest.tsv (name, class, seed, phase, split) plus
// <name>.motion, <name>.wav and <name>.env per clip.
void SaveCorpus(const std::string& dir, const Corpus& corpus);
Corpus LoadCorpus(const std::string& dir);

// Thin ellipses (minor / major axis ratio `thinness`) rotating at constant
// angular speed. Their near-singular covariances stress quantizers that give
// no validity guarantee.
std::vector<motion::MotionSequence> StressSequences(int count, int frames, int regions,
                                                    std::uint64_t seed, double thinness = 0.02);

std::vector<motion::MotionSequence> Motions(const std::vector<SynthClip>& clips);

double Pearson(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace angie::synth
