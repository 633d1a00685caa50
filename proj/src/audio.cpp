#include "angie/audio.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>

#include <fftw3.h>
#include <fmt/format.h>

#include "angie/errors.hpp"

namespace angie::audio {

using nn::RowMat;

namespace {

// FFTW planning is not thread-safe; execution on distinct plans is.
std::mutex& PlannerMutex() {
  static std::mutex m;
  return m;
}

class RealFft {
 public:
  explicit RealFft(int n) : n_(n) {
    in_ = fftw_alloc_real(static_cast<std::size_t>(n));
    out_ = fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1));
    std::lock_guard<std::mutex> lock(PlannerMutex());
    plan_ = fftw_plan_dft_r2c_1d(n, in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    {
      std::lock_guard<std::mutex> lock(PlannerMutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }
  int bins() const { return n_ / 2 + 1; }
  void Execute() { fftw_execute(plan_); }
  double Power(int k) const { return out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1]; }
  double Magnitude(int k) const { return std::sqrt(Power(k)); }

 private:
  int n_;
  double* in_;
  fftw_complex* out_;
  fftw_plan plan_;
};

double HzToMel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double MelToHz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

void RequireRate(const Waveform& w) {
  if (w.sample_rate != kSampleRate) {
    throw ValidationError(fmt::format("sample rate {} Hz is not supported (expected {} Hz)",
                                      w.sample_rate, kSampleRate));
  }
}

// Sample i of a signal zero-padded by `pad` on the left.
double Padded(const std::vector<double>& x, long i) {
  return i >= 0 && i < static_cast<long>(x.size()) ? x[static_cast<std::size_t>(i)] : 0.0;
}

void PutU16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  out.write(b, 2);
}
void PutU32(std::ostream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
std::uint32_t GetU32(const unsigned char* p) {
  return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t GetU16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

}  // namespace

void Waveform::Validate() const {
  if (samples.empty()) throw ValidationError("waveform is empty");
  if (sample_rate <= 0) throw ValidationError("waveform sample rate must be positive");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!std::isfinite(samples[i]) || std::abs(samples[i]) > 1.0) {
      throw ValidationError(fmt::format("sample {} = {} is outside [-1, 1]", i, samples[i]));
    }
  }
}

Waveform ReadWav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open WAV file " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::string(bytes.begin(), bytes.begin() + 4) != "RIFF" ||
      std::string(bytes.begin() + 8, bytes.begin() + 12) != "WAVE") {
    throw ValidationError(path + ": not a RIFF/WAVE file");
  }
  int channels = 0, bits = 0, rate = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id(bytes.begin() + pos, bytes.begin() + pos + 4);
    const std::uint32_t size = GetU32(&bytes[pos + 4]);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw ValidationError(path + ": truncated chunk " + id);
    if (id == "fmt ") {
      if (size < 16) throw ValidationError(path + ": short fmt chunk");
      if (GetU16(&bytes[body]) != 1) throw ValidationError(path + ": only PCM is supported");
      channels = GetU16(&bytes[body + 2]);
      rate = static_cast<int>(GetU32(&bytes[body + 4]));
      bits = GetU16(&bytes[body + 14]);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw ValidationError(path + ": data before fmt chunk");
      if (channels != 1 || bits != 16) {
        throw ValidationError(fmt::format("{}: expected 16-bit mono, got {} channels x {} bits",
                                          path, channels, bits));
      }
      Waveform w;
      w.sample_rate = rate;
      w.samples.resize(size / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(GetU16(&bytes[body + 2 * i]));
        w.samples[i] = v / 32768.0;
      }
      return w;
    }
    pos = body + size + (size & 1);
  }
  throw ValidationError(path + ": no data chunk");
}

void WriteWav(const std::string& path, const Waveform& w) {
  w.Validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write WAV file " + path);
  const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  out.write("RIFF", 4);
  PutU32(out, 36 + data_bytes);
  out.write("WAVEfmt ", 8);
  PutU32(out, 16);
  PutU16(out, 1);
  PutU16(out, 1);
  PutU32(out, static_cast<std::uint32_t>(w.sample_rate));
  PutU32(out, static_cast<std::uint32_t>(w.sample_rate * 2));
  PutU16(out, 2);
  PutU16(out, 16);
  out.write("data", 4);
  PutU32(out, data_bytes);
  for (double s : w.samples) {
    const long v = std::lround(std::clamp(s, -1.0, 32767.0 / 32768.0) * 32768.0);
    PutU16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
  }
}

std::vector<double> HannWindow(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

RowMat PowerSpectrogram(const Waveform& w, const MfccOptions& opt) {
  RequireRate(w);
  if (static_cast<int>(w.samples.size()) < opt.window) {
    throw ValidationError(fmt::format("signal of {} samples is shorter than one {}-sample window",
                                      w.samples.size(), opt.window));
  }
  if (opt.fft_size < opt.window) throw ValidationError("FFT size smaller than window");
  const int frames = 1 + (static_cast<int>(w.samples.size()) - opt.window) / opt.hop;
  const std::vector<double> hann = HannWindow(opt.window);
  RealFft fft(opt.fft_size);
  RowMat power(frames, fft.bins());
  for (int f = 0; f < frames; ++f) {
    double* in = fft.input();
    std::fill(in, in + opt.fft_size, 0.0);
    for (int i = 0; i < opt.window; ++i) in[i] = w.samples[f * opt.hop + i] * hann[i];
    fft.Execute();
    for (int k = 0; k < fft.bins(); ++k) power(f, k) = fft.Power(k);
  }
  return power;
}

RowMat MelFilterbank(const MfccOptions& opt, int sample_rate) {
  const int bins = opt.fft_size / 2 + 1;
  const double lo = HzToMel(opt.low_hz), hi = HzToMel(opt.high_hz);
  std::vector<double> edges(static_cast<std::size_t>(opt.filters + 2));
  for (int i = 0; i < opt.filters + 2; ++i) {
    edges[i] = MelToHz(lo + (hi - lo) * i / (opt.filters + 1));
  }
  RowMat fb = RowMat::Zero(opt.filters, bins);
  for (int m = 0; m < opt.filters; ++m) {
    const double left = edges[m], centre = edges[m + 1], right = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double hz = static_cast<double>(k) * sample_rate / opt.fft_size;
      if (hz > left && hz < right) {
        fb(m, k) = hz <= centre ? (hz - left) / (centre - left) : (right - hz) / (right - centre);
      }
    }
  }
  return fb;
}

RowMat FilterbankEnergies(const Waveform& w, const MfccOptions& opt) {
  return PowerSpectrogram(w, opt) * MelFilterbank(opt, w.sample_rate).transpose();
}

RowMat DctMatrix(int n) {
  RowMat d(n, n);
  for (int k = 0; k < n; ++k) {
    const double scale = std::sqrt((k == 0 ? 1.0 : 2.0) / n);
    for (int i = 0; i < n; ++i) {
      d(k, i) = scale * std::cos(std::numbers::pi * k * (2 * i + 1) / (2.0 * n));
    }
  }
  return d;
}

RowMat Mfcc(const Waveform& w, const MfccOptions& opt) {
  RowMat energy = FilterbankEnergies(w, opt);
  RowMat logs = energy.unaryExpr([&](double e) { return std::log(std::max(e, opt.log_floor)); });
  RowMat cep = logs * DctMatrix(opt.filters).transpose();
  return cep.middleCols(1, opt.cepstra - 1);
}

RowMat MfccWindows(const RowMat& track, int video_frames, double fps, int width, int hop,
                   int sample_rate) {
  if (track.rows() < 1) throw ValidationError("MFCC track is empty");
  if (video_frames < 1) throw ValidationError("need at least one video frame");
  const double per_frame = sample_rate / (fps * hop);
  const long last = static_cast<long>(track.rows()) - 1;
  RowMat out(video_frames, static_cast<Eigen::Index>(width) * track.cols());
  for (int t = 0; t < video_frames; ++t) {
    const long centre = std::lround(t * per_frame);
    for (int j = 0; j < width; ++j) {
      const long src = std::clamp(centre - width / 2 + j, 0L, last);
      out.block(t, static_cast<Eigen::Index>(j) * track.cols(), 1, track.cols()) = track.row(src);
    }
  }
  return out;
}

int VideoFramesFor(const Waveform& w, double fps) {
  return static_cast<int>(std::floor(static_cast<double>(w.samples.size()) * fps / w.sample_rate));
}

OnsetEnvelope ComputeOnsetEnvelope(const Waveform& w, int hop, int window) {
  RequireRate(w);
  OnsetEnvelope env;
  env.hop = hop;
  env.sample_rate = w.sample_rate;
  const long n = static_cast<long>(w.samples.size());
  const int frames = static_cast<int>(1 + n / hop);
  const std::vector<double> hann = HannWindow(window);
  RealFft fft(window);
  std::vector<double> prev(static_cast<std::size_t>(fft.bins()), 0.0), cur(prev.size());
  env.strength.assign(static_cast<std::size_t>(frames), 0.0);
  for (int f = 0; f < frames; ++f) {
    const long start = static_cast<long>(f) * hop - window / 2;
    for (int i = 0; i < window; ++i) fft.input()[i] = Padded(w.samples, start + i) * hann[i];
    fft.Execute();
    double flux = 0.0;
    for (int k = 0; k < fft.bins(); ++k) {
      cur[k] = fft.Magnitude(k);
      if (f > 0) flux += std::max(0.0, cur[k] - prev[k]);
    }
    env.strength[f] = flux;
    std::swap(prev, cur);
  }
  double mean = 0.0, sq = 0.0;
  for (double s : env.strength) mean += s;
  mean /= frames;
  for (double s : env.strength) sq += (s - mean) * (s - mean);
  const double threshold = mean + std::sqrt(sq / frames);
  for (int f = 0; f < frames; ++f) {
    const double s = env.strength[f];
    const bool left = f == 0 || s > env.strength[f - 1];
    const bool right = f + 1 == frames || s >= env.strength[f + 1];
    if (left && right && s > threshold) {
      env.peak_times.push_back(static_cast<double>(f) * hop / w.sample_rate);
    }
  }
  return env;
}

RowMat Chroma(const Waveform& w, int hop, int window) {
  RequireRate(w);
  const long n = static_cast<long>(w.samples.size());
  const int frames = static_cast<int>(1 + n / hop);
  const std::vector<double> hann = HannWindow(window);
  RealFft fft(window);
  std::vector<int> pitch_class(static_cast<std::size_t>(fft.bins()), -1);
  for (int k = 1; k < fft.bins(); ++k) {
    const double hz = static_cast<double>(k) * w.sample_rate / window;
    if (hz < 55.0) continue;
    const long semis = std::lround(12.0 * std::log2(hz / 440.0));
    pitch_class[k] = static_cast<int>(((semis % 12) + 12) % 12);
  }
  RowMat chroma = RowMat::Zero(frames, 12);
  for (int f = 0; f < frames; ++f) {
    const long start = static_cast<long>(f) * hop - window / 2;
    for (int i = 0; i < window; ++i) fft.input()[i] = Padded(w.samples, start + i) * hann[i];
    fft.Execute();
    for (int k = 0; k < fft.bins(); ++k) {
      if (pitch_class[k] >= 0) chroma(f, pitch_class[k]) += fft.Power(k);
    }
    const double peak = chroma.row(f).maxCoeff();
    if (peak > 1e-12) chroma.row(f) /= peak;
  }
  return chroma;
}

RowMat BuiltinOnsetFeatures(const Waveform& w, int video_frames, double fps) {
  const OnsetEnvelope env = ComputeOnsetEnvelope(w);
  const RowMat chroma = Chroma(w);
  // Linear interpolation of hop-rate tracks at video frame centres.
  auto sample = [&](int row_count, double t_seconds, auto&& value) {
    const double pos = t_seconds * w.sample_rate / 512.0;
    const int i0 = std::clamp(static_cast<int>(std::floor(pos)), 0, row_count - 1);
    const int i1 = std::min(i0 + 1, row_count - 1);
    const double a = std::clamp(pos - i0, 0.0, 1.0);
    return (1 - a) * value(i0) + a * value(i1);
  };
  RowMat out(video_frames, kBuiltinOnsetWidth);
  const int rows = static_cast<int>(env.strength.size());
  for (int t = 0; t < video_frames; ++t) {
    const double ts = (t + 0.5) / fps;
    out(t, 0) = sample(rows, ts, [&](int i) { return env.strength[i]; });
    for (int c = 0; c < 12; ++c) {
      out(t, 1 + c) = sample(rows, ts, [&](int i) { return chroma(i, c); });
    }
  }
  return out;
}

RowMat OnsetTrack::Matrix() const {
  RowMat m(frames, width);
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

OnsetTrack LoadOnsetFile(const std::string& path, int expected_width) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open onset file " + path);
  OnsetTrack track;
  track.width = expected_width;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (in.eof() && !line.empty()) {
      throw ValidationError(fmt::format("{}:{}: truncated (last frame has no line end)", path,
                                        line_no));
    }
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    int count = 0;
    std::string tok;
    while (ss >> tok) {
      try {
        std::size_t used = 0;
        const double v = std::stod(tok, &used);
        if (used != tok.size() || !std::isfinite(v)) throw std::invalid_argument(tok);
        track.values.push_back(v);
      } catch (const std::exception&) {
        throw ValidationError(fmt::format("{}:{}: cannot parse value '{}'", path, line_no, tok));
      }
      ++count;
    }
    if (count != expected_width) {
      throw ValidationError(fmt::format("{}:{}: expected {} onset values per frame, found {}",
                                        path, line_no, expected_width, count));
    }
    ++track.frames;
  }
  if (track.frames == 0) throw ValidationError(path + ": onset file has no frames");
  return track;
}

void WriteOnsetFile(const std::string& path, const OnsetTrack& track) {
  if (track.values.size() != static_cast<std::size_t>(track.frames) * track.width) {
    throw ValidationError("onset track size does not match frames x width");
  }
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write onset file " + path);
  for (int t = 0; t < track.frames; ++t) {
    std::string line;
    for (int j = 0; j < track.width; ++j) {
      if (j) line += ' ';
      line += fmt::format("{:.17g}", track.values[static_cast<std::size_t>(t) * track.width + j]);
    }
    out << line << '\n';
  }
}

void WriteMfccCache(const std::string& path, const RowMat& windows, int width, int coeffs) {
  if (windows.cols() != static_cast<Eigen::Index>(width) * coeffs) {
    throw ValidationError("MFCC window matrix does not match width x coeffs");
  }
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write MFCC cache " + path);
  out << windows.rows() << ' ' << width << ' ' << coeffs << '\n';
  for (Eigen::Index t = 0; t < windows.rows(); ++t) {
    std::string line;
    for (Eigen::Index j = 0; j < windows.cols(); ++j) {
      if (j) line += ' ';
      line += fmt::format("{:.17g}", windows(t, j));
    }
    out << line << '\n';
  }
}

RowMat ReadMfccCache(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open MFCC cache " + path);
  long frames = 0, width = 0, coeffs = 0;
  if (!(in >> frames >> width >> coeffs) || frames < 1 || width < 1 || coeffs < 1) {
    throw ValidationError(path + ": bad MFCC cache header");
  }
  RowMat m(frames, width * coeffs);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (!(in >> m.data()[i])) {
      throw ValidationError(fmt::format("{}: truncated after {} of {} values", path, i, m.size()));
    }
  }
  return m;
}

}  // namespace angie::audio
