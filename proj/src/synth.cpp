#include "angie/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "angie/errors.hpp"

namespace angie::synth {

using motion::MotionSequence;
using motion::Vec2;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr std::uint64_t kLibrarySeed = 0x9e3779b97f4a7c15ULL;

struct RegionShape {
  double ax1, ay1, ax2, ay2;  // first/second harmonic amplitudes
  double px1, py1, px2, py2;  // phases
  double l_phase;
};

const Vec2 kBase[] = {{0.5, 0.25}, {0.3, 0.55}, {0.7, 0.55}, {0.5, 0.75}};

Vec2 RegionBase(int k) {
  if (k < 4) return kBase[k];
  return {0.2 + 0.6 * ((k * 37) % 11) / 10.0, 0.2 + 0.6 * ((k * 53) % 7) / 6.0};
}

RegionShape ShapeFor(int class_id, int region) {
  std::mt19937_64 rng(kLibrarySeed ^ (static_cast<std::uint64_t>(class_id) * 1315423911ULL +
                                      static_cast<std::uint64_t>(region) * 2654435761ULL));
  std::uniform_real_distribution<double> amp(0.04, 0.10), small(0.0, 0.04),
      phase(0.0, kTwoPi);
  RegionShape s;
  s.ax1 = amp(rng);
  s.ay1 = amp(rng);
  s.ax2 = small(rng);
  s.ay2 = small(rng);
  s.px1 = phase(rng);
  s.py1 = phase(rng);
  s.px2 = phase(rng);
  s.py2 = phase(rng);
  s.l_phase = phase(rng);
  return s;
}

std::uint64_t Mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Smooth bumps in [0, 1].
std::vector<double> Envelope(int frames, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(3, 6);
  std::uniform_real_distribution<double> centre(0.0, frames), width(2.0, 4.0), height(0.6, 1.0);
  std::vector<double> e(static_cast<std::size_t>(frames), 0.0);
  const int n = count(rng);
  for (int b = 0; b < n; ++b) {
    const double c = centre(rng), w = width(rng), h = height(rng);
    for (int t = 0; t < frames; ++t) e[t] += h * std::exp(-0.5 * (t - c) * (t - c) / (w * w));
  }
  for (double& v : e) v = std::min(v, 1.0);
  return e;
}

}  // namespace

double ClassToneHz(int class_id) { return 440.0 * std::pow(2.0, class_id / 12.0); }

Vec2 JitterDirection(int region) {
  const double angle = 0.7 + 1.9 * region;
  return {std::cos(angle), std::sin(angle)};
}

MotionSequence TemplateMotion(int class_id, int phase, const SynthOptions& opt) {
  if (class_id < 0 || class_id >= opt.classes) {
    throw ValidationError(fmt::format("class {} outside [0, {})", class_id, opt.classes));
  }
  MotionSequence seq(opt.frames, opt.regions, opt.fps);
  const double w = kTwoPi / opt.period;
  for (int k = 0; k < opt.regions; ++k) {
    const RegionShape s = ShapeFor(class_id, k);
    const Vec2 base = RegionBase(k);
    for (int t = 0; t < opt.frames; ++t) {
      const double u = w * (t + phase);
      auto& f = seq.at(t, k);
      f.mu = base + Vec2(s.ax1 * std::sin(u + s.px1) + s.ax2 * std::sin(2 * u + s.px2),
                         s.ay1 * std::sin(u + s.py1) + s.ay2 * std::sin(2 * u + s.py2));
      f.L = {0.06 + 0.012 * std::sin(u + s.l_phase), 0.01 * std::sin(u + s.px1),
             0.05 + 0.01 * std::cos(u + s.l_phase)};
    }
  }
  return seq;
}

SynthClip MakeClip(int class_id, std::uint64_t seed, const SynthOptions& opt) {
  if (opt.frames < 2) throw ValidationError("synthetic clips need at least two frames");
  SynthClip clip;
  clip.class_id = class_id;
  clip.seed = seed;
  std::mt19937_64 rng(Mix(seed ^ (static_cast<std::uint64_t>(class_id) << 32)));
  // Offsets stay on the code grid (8 frames) so every clip starts a chunk
  // at the same point of one of a few cycle positions.
  const int phases = std::max(1, opt.period / 8);
  clip.phase = 8 * std::uniform_int_distribution<int>(0, phases - 1)(rng);
  clip.clean = TemplateMotion(class_id, clip.phase, opt);
  clip.envelope = Envelope(opt.frames, rng);
  clip.motion = clip.clean;
  const double s = opt.jitter_scale;
  for (int t = 0; t < opt.frames; ++t) {
    const double e = clip.envelope[t];
    bool clipped = false;
    for (int k = 0; k < opt.regions; ++k) {
      auto& f = clip.motion.at(t, k);
      f.mu += s * e * JitterDirection(k);
      motion::CholeskyFactor l{f.L.l1 + 0.5 * s * e, f.L.l2 + 0.25 * s * e,
                               f.L.l3 - 0.3 * s * e};
      if (l.l1 < motion::kDiagonalEpsilon || l.l3 < motion::kDiagonalEpsilon) clipped = true;
      f.L = motion::ClampPositiveDiagonal(l);
    }
    if (clipped) ++clip.clipped_frames;
  }
  if (clip.clipped_frames * 100 > opt.frames) {
    spdlog::warn("clip class {} seed {}: jitter clamped {} of {} frames", class_id, seed,
                 clip.clipped_frames, opt.frames);
  }

  const int sr = audio::kSampleRate;
  const double samples_per_frame = sr / opt.fps;
  const auto n = static_cast<std::size_t>(std::llround(opt.frames * samples_per_frame));
  clip.audio.sample_rate = sr;
  clip.audio.samples.resize(n);
  const double tone = ClassToneHz(class_id);
  for (std::size_t i = 0; i < n; ++i) {
    // Envelope value at this sample, interpolated between frame centres.
    const double pos = std::clamp(i / samples_per_frame - 0.5, 0.0, opt.frames - 1.0);
    const int i0 = static_cast<int>(pos);
    const int i1 = std::min(i0 + 1, opt.frames - 1);
    const double a = pos - i0;
    const double e = (1 - a) * clip.envelope[i0] + a * clip.envelope[i1];
    const double time = static_cast<double>(i) / sr;
    clip.audio.samples[i] =
        0.25 * std::sin(kTwoPi * tone * time) + 0.35 * e * std::sin(kTwoPi * kDriverHz * time);
  }
  return clip;
}

std::vector<double> MeasureDriverEnvelope(const audio::Waveform& w, int frames, double fps) {
  const double spf = w.sample_rate / fps;
  std::vector<double> out(static_cast<std::size_t>(frames), 0.0);
  for (int t = 0; t < frames; ++t) {
    const auto start = static_cast<std::size_t>(std::llround(t * spf));
    const auto len = static_cast<std::size_t>(std::llround(spf));
    if (start + len > w.samples.size()) break;
    const std::vector<double> hann = audio::HannWindow(static_cast<int>(len));
    double re = 0.0, im = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double ph = kTwoPi * kDriverHz * static_cast<double>(start + i) / w.sample_rate;
      re += hann[i] * w.samples[start + i] * std::cos(ph);
      im += hann[i] * w.samples[start + i] * std::sin(ph);
    }
    out[t] = std::hypot(re, im) * 4.0 / static_cast<double>(len);
  }
  return out;
}

std::vector<double> JitterMagnitude(const SynthClip& clip) {
  std::vector<double> m(static_cast<std::size_t>(clip.motion.frames()), 0.0);
  for (int t = 0; t < clip.motion.frames(); ++t) {
    for (int k = 0; k < clip.motion.regions(); ++k) {
      m[t] += (clip.motion.at(t, k).mu - clip.clean.at(t, k).mu).norm();
    }
    m[t] /= clip.motion.regions();
  }
  return m;
}

double Pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ValidationError("Pearson needs equal lengths >= 2");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

Corpus MakeCorpus(const SynthOptions& opt, int n_per_class, std::uint64_t seed) {
  if (n_per_class < 2) throw ValidationError("need at least two clips per class");
  Corpus corpus;
  corpus.options = opt;
  corpus.seed = seed;
  std::mt19937_64 rng(Mix(seed));
  const int held_out = std::max(1, static_cast<int>(std::lround(0.1 * n_per_class)));
  for (int c = 0; c < opt.classes; ++c) {
    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n_per_class));
    for (auto& s : seeds) s = rng();
    for (int i = 0; i < n_per_class; ++i) {
      SynthClip clip = MakeClip(c, seeds[i], opt);
      (i < n_per_class - held_out ? corpus.train : corpus.eval).push_back(std::move(clip));
    }
  }
  std::size_t index = 0;
  for (auto* split : {&corpus.train, &corpus.eval}) {
    for (SynthClip& clip : *split) clip.name = fmt::format("clip{:05d}_c{}", index++, clip.class_id);
  }
  return corpus;
}

std::vector<MotionSequence> StressSequences(int count, int frames, int regions,
                                            std::uint64_t seed, double thinness) {
  if (count < 1 || frames < 1 || regions < 1) throw ValidationError("empty stress corpus");
  if (!(thinness > 0 && thinness <= 1)) throw ValidationError("thinness must be in (0, 1]");
  std::mt19937_64 rng(Mix(seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<MotionSequence> out;
  for (int n = 0; n < count; ++n) {
    MotionSequence seq(frames, regions, 25.0);
    for (int k = 0; k < regions; ++k) {
      const double angle0 = 2 * std::numbers::pi * u(rng);
      const double omega = (0.05 + 0.15 * u(rng)) * (u(rng) < 0.5 ? -1 : 1);
      const double major = 0.05 + 0.07 * u(rng);
      const double minor = major * thinness;
      const double phase = 2 * std::numbers::pi * u(rng);
      const motion::Vec2 centre(0.3 + 0.4 * u(rng), 0.3 + 0.4 * u(rng));
      for (int t = 0; t < frames; ++t) {
        const double a = angle0 + omega * t;
        motion::Mat2 r;
        r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
        const motion::Mat2 c =
            r * motion::Vec2(major * major, minor * minor).asDiagonal() * r.transpose();
        auto& f = seq.at(t, k);
        f.mu = centre + 0.1 * motion::Vec2(std::sin(0.07 * t + phase), std::cos(0.05 * t + phase));
        f.L = motion::CholeskyDecompose(0.5 * (c + c.transpose()));
      }
    }
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<MotionSequence> Motions(const std::vector<SynthClip>& clips) {
  std::vector<MotionSequence> out;
  out.reserve(clips.size());
  for (const auto& c : clips) out.push_back(c.motion);
  return out;
}

void SaveCorpus(const std::string& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.tsv");
  if (!manifest) throw ValidationError("cannot write corpus manifest in " + dir);
  const SynthOptions& o = corpus.options;
  manifest << fmt::format("# classes={} regions={} frames={} fps={:.17g} jitter_scale={:.17g} "
                          "period={} seed={}\n",
                          o.classes, o.regions, o.frames, o.fps, o.jitter_scale, o.period,
                          corpus.seed);
  for (const auto* split : {&corpus.train, &corpus.eval}) {
    const char* tag = split == &corpus.train ? "train" : "eval";
    for (const SynthClip& clip : *split) {
      if (clip.name.empty()) throw ValidationError("corpus clip without a name");
      const std::string& name = clip.name;
      motion::WriteMotionFile(dir + "/" + name + ".motion", clip.motion);
      audio::WriteWav(dir + "/" + name + ".wav", clip.audio);
      std::ofstream env(dir + "/" + name + ".env");
      for (double e : clip.envelope) env << fmt::format("{:.17g}\n", e);
      manifest << fmt::format("{}\t{}\t{}\t{}\t{}\n", name, clip.class_id, clip.seed, clip.phase,
                              tag);
    }
  }
}

Corpus LoadCorpus(const std::string& dir) {
  std::ifstream manifest(dir + "/manifest.tsv");
  if (!manifest) throw ValidationError("no corpus manifest in " + dir + " (run make-corpus first)");
  Corpus corpus;
  std::string line;
  if (!std::getline(manifest, line) || line.rfind("# ", 0) != 0) {
    throw ValidationError(dir + "/manifest.tsv: missing header");
  }
  {
    std::istringstream ss(line.substr(2));
    std::string kv;
    while (ss >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ValidationError("bad corpus header field " + kv);
      const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
      SynthOptions& o = corpus.options;
      if (key == "classes") o.classes = std::stoi(value);
      else if (key == "regions") o.regions = std::stoi(value);
      else if (key == "frames") o.frames = std::stoi(value);
      else if (key == "fps") o.fps = std::stod(value);
      else if (key == "jitter_scale") o.jitter_scale = std::stod(value);
      else if (key == "period") o.period = std::stoi(value);
      else if (key == "seed") corpus.seed = std::stoull(value);
      else throw ValidationError("unknown corpus header field " + key);
    }
  }
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string split;
    SynthClip clip;
    if (!(ss >> clip.name >> clip.class_id >> clip.seed >> clip.phase >> split)) {
      throw ValidationError("bad corpus manifest line: " + line);
    }
    const std::string& name = clip.name;
    clip.motion = motion::ReadMotionFile(dir + "/" + name + ".motion");
    clip.audio = audio::ReadWav(dir + "/" + name + ".wav");
    clip.clean = TemplateMotion(clip.class_id, clip.phase, corpus.options);
    std::ifstream env(dir + "/" + name + ".env");
    double e;
    while (env >> e) clip.envelope.push_back(e);
    (split == "train" ? corpus.train : corpus.eval).push_back(std::move(clip));
  }
  if (corpus.train.empty()) throw ValidationError(dir + ": corpus has no training clips");
  return corpus;
}

}  // namespace angie::synth
