#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "angie/audio.hpp"
#include "angie/config.hpp"
#include "angie/errors.hpp"
#include "angie/metrics.hpp"
#include "angie/motion.hpp"
#include "angie/pipeline.hpp"
#include "angie/runtime.hpp"
#include "angie/vq.hpp"

namespace py = pybind11;
using namespace angie;

namespace {

// Motion sequences cross the boundary as (mu [T, K, 2], L [T, K, 3], fps).
py::tuple SequenceToArrays(const motion::MotionSequence& seq) {
  py::array_t<double> mu({seq.frames(), seq.regions(), 2});
  py::array_t<double> l({seq.frames(), seq.regions(), 3});
  auto m = mu.mutable_unchecked<3>();
  auto c = l.mutable_unchecked<3>();
  for (int t = 0; t < seq.frames(); ++t) {
    for (int k = 0; k < seq.regions(); ++k) {
      const auto& f = seq.at(t, k);
      m(t, k, 0) = f.mu.x();
      m(t, k, 1) = f.mu.y();
      c(t, k, 0) = f.L.l1;
      c(t, k, 1) = f.L.l2;
      c(t, k, 2) = f.L.l3;
    }
  }
  return py::make_tuple(mu, l, seq.fps());
}

motion::MotionSequence ArraysToSequence(py::array_t<double> mu, py::array_t<double> l, double fps) {
  if (mu.ndim() != 3 || l.ndim() != 3 || mu.shape(2) != 2 || l.shape(2) != 3 ||
      mu.shape(0) != l.shape(0) || mu.shape(1) != l.shape(1)) {
    throw ValidationError("expected mu [T, K, 2] and L [T, K, 3]");
  }
  const auto m = mu.unchecked<3>();
  const auto c = l.unchecked<3>();
  motion::MotionSequence seq(static_cast<int>(mu.shape(0)), static_cast<int>(mu.shape(1)), fps);
  for (int t = 0; t < seq.frames(); ++t) {
    for (int k = 0; k < seq.regions(); ++k) {
      auto& f = seq.at(t, k);
      f.mu = {m(t, k, 0), m(t, k, 1)};
      f.L = {c(t, k, 0), c(t, k, 1), c(t, k, 2)};
    }
  }
  seq.Validate();
  return seq;
}

}  // namespace

PYBIND11_MODULE(_angie, m) {
  m.doc() = "Region-motion gesture generation: motion algebra, quantization, metrics, pipeline";
  TuneAllocator();

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_RuntimeError);

  m.def("cholesky", [](const motion::Mat2& c) {
    const auto f = motion::CholeskyDecompose(c);
    return f.Matrix();
  }, py::arg("covariance"), "Lower-triangular L with L L^T = C.");
  m.def("affine_from_covariance", &motion::AffineFromCovariance, py::arg("covariance"));
  m.def("is_spd", [](const motion::Mat2& c) { return motion::IsSymmetricPositiveDefinite(c); });

  m.def("quantize", [](const nn::RowMat& latents, const nn::RowMat& codebook) {
    return vq::Quantize(latents, codebook).indices;
  }, py::arg("latents"), py::arg("codebook"), "Nearest codebook row per latent row.");
  m.def("perplexity", [](const std::vector<int>& idx, int size) { return vq::Perplexity(idx, size); });

  m.def("mfcc", [](const std::vector<double>& samples, int sample_rate) {
    audio::Waveform w{samples, sample_rate};
    if (sample_rate != audio::kSampleRate) throw ValidationError("MFCC expects 16 kHz audio");
    return audio::Mfcc(w);
  }, py::arg("samples"), py::arg("sample_rate") = audio::kSampleRate);
  m.def("onset_peaks", [](const std::vector<double>& samples) {
    return audio::ComputeOnsetEnvelope(audio::Waveform{samples, audio::kSampleRate}).peak_times;
  }, py::arg("samples"));

  m.def("frechet_distance", [](const nn::RowMat& a, const nn::RowMat& b) {
    return metrics::FrechetDistance(metrics::FitGaussian(a), metrics::FitGaussian(b));
  }, py::arg("features_a"), py::arg("features_b"));
  m.def("beat_consistency", [](const std::vector<double>& audio, const std::vector<double>& gesture,
                               double sigma) {
    return metrics::BeatConsistency(audio, gesture, sigma);
  }, py::arg("audio_beats"), py::arg("gesture_beats"), py::arg("sigma") = 0.1);
  m.def("diversity", &metrics::Diversity, py::arg("features"), py::arg("pairs"), py::arg("seed"));

  m.def("read_motion", [](const std::string& path) {
    return SequenceToArrays(motion::ReadMotionFile(path));
  }, py::arg("path"), "Returns (mu [T, K, 2], L [T, K, 3], fps).");
  m.def("write_motion", [](const std::string& path, py::array_t<double> mu, py::array_t<double> l,
                           double fps) {
    motion::WriteMotionFile(path, ArraysToSequence(mu, l, fps));
  }, py::arg("path"), py::arg("mu"), py::arg("L"), py::arg("fps") = 25.0);

  py::class_<config::PipelineConfig>(m, "PipelineConfig")
      .def(py::init([](const std::string& preset) {
             return config::PipelineConfig::ForPreset(preset);
           }),
           py::arg("preset") = "desk")
      .def("set", &config::PipelineConfig::Set)
      .def("get", &config::PipelineConfig::Get)
      .def("keys", [](const config::PipelineConfig&) { return config::PipelineConfig::Keys(); })
      .def("validate", &config::PipelineConfig::Validate)
      .def("dump", &config::PipelineConfig::Dump)
      .def("digest", &config::PipelineConfig::Digest);

  auto stage = [](auto fn) {
    return [fn](const config::PipelineConfig& cfg, bool force) {
      py::gil_scoped_release release;
      const auto r = fn(cfg, force);
      py::gil_scoped_acquire acquire;
      return py::make_tuple(r.artifact, r.metrics.dump(), r.seconds);
    };
  };
  m.def("make_corpus", stage(&pipeline::MakeCorpusStage), py::arg("config"), py::arg("force") = false);
  m.def("train_vq", stage(&pipeline::TrainVqStage), py::arg("config"), py::arg("force") = false);
  m.def("train_gpt", stage(&pipeline::TrainGptStage), py::arg("config"), py::arg("force") = false);
  m.def("train_refine", stage(&pipeline::TrainRefineStage), py::arg("config"),
        py::arg("force") = false);
  m.def("evaluate", [](const config::PipelineConfig& cfg, bool refine) {
    const auto r = pipeline::EvalStage(cfg, std::nullopt, refine);
    return r.metrics.dump();
  }, py::arg("config"), py::arg("refine") = true);
}
