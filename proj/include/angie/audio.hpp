#pragma once

#include <string>
#include <vector>

#include "angie/nn/tensor.hpp"

namespace angie::audio {

inline constexpr int kSampleRate = 16000;
inline constexpr int kPaperOnsetWidth = 426;

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = kSampleRate;

  double Seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
  // Non-empty, finite, within [-1, 1].
  void Validate() const;
};

// 16-bit PCM mono little-endian WAV.
Waveform ReadWav(const std::string& path);
void WriteWav(const std::string& path, const Waveform& w);

struct MfccOptions {
  int window = 400;  // 25 ms at 16 kHz
  int hop = 160;     // 10 ms
  int fft_size = 512;
  int filters = 26;
  int cepstra = 13;  // coefficient 0 is dropped from the output
  double low_hz = 0.0;
  double high_hz = 8000.0;
  double log_floor = 1e-10;
};

// Periodic Hann window of length n.
std::vector<double> HannWindow(int n);

// frames x (fft_size / 2 + 1) power spectra of Hann-windowed frames. Frame i
// starts at sample i * hop; there are 1 + (N - window) / hop frames.
nn::RowMat PowerSpectrogram(const Waveform& w, const MfccOptions& opt = {});

// filters x (fft_size / 2 + 1) triangular mel filterbank (HTK mel scale).
nn::RowMat MelFilterbank(const MfccOptions& opt = {}, int sample_rate = kSampleRate);

// frames x filters filterbank energies.
nn::RowMat FilterbankEnergies(const Waveform& w, const MfccOptions& opt = {});

// Orthonormal DCT-II matrix (n x n); its transpose is the inverse.
nn::RowMat DctMatrix(int n);

// frames x (cepstra - 1) coefficients 1..cepstra-1.
nn::RowMat Mfcc(const Waveform& w, const MfccOptions& opt = {});

// One window of `width` MFCC frames per video frame, flattened row-major to
// frames x (width * coeffs). Video frame t is centred on MFCC frame
// round(t * sample_rate / (fps * hop)); rows outside the track replicate the
// nearest edge frame.
nn::RowMat MfccWindows(const nn::RowMat& track, int video_frames, double fps,
                       int width = 28, int hop = 160, int sample_rate = kSampleRate);

// Number of MFCC frames centred within a waveform, per video frame.
int VideoFramesFor(const Waveform& w, double fps);

struct OnsetEnvelope {
  std::vector<double> strength;  // one value per hop, >= 0
  std::vector<double> peak_times;  // seconds
  int hop = 512;
  int sample_rate = kSampleRate;
};

// Half-wave-rectified magnitude spectral flux over centred Hann frames.
// Peaks are local maxima above mean + 1 std of the envelope.
OnsetEnvelope ComputeOnsetEnvelope(const Waveform& w, int hop = 512, int window = 384);

// frames x 12 chroma (pitch class A = 0), each row scaled to max 1.
nn::RowMat Chroma(const Waveform& w, int hop = 512, int window = 2048);

// Built-in onset feature: [onset strength, 12 chroma] per video frame.
inline constexpr int kBuiltinOnsetWidth = 13;
nn::RowMat BuiltinOnsetFeatures(const Waveform& w, int video_frames, double fps);

struct OnsetTrack {
  int frames = 0;
  int width = 0;
  std::vector<double> values;  // frames x width, row-major

  nn::RowMat Matrix() const;
};

// Text matrix: one frame per line, `expected_width` decimals per line.
OnsetTrack LoadOnsetFile(const std::string& path, int expected_width = kPaperOnsetWidth);
void WriteOnsetFile(const std::string& path, const OnsetTrack& track);

// MFCC window cache: header "T 28 12" then T lines of 336 decimals.
void WriteMfccCache(const std::string& path, const nn::RowMat& windows, int width = 28,
                    int coeffs = 12);
nn::RowMat ReadMfccCache(const std::string& path);

}  // namespace angie::audio
