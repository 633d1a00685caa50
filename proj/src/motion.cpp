#include "angie/motion.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "angie/errors.hpp"

namespace angie::motion {

Mat2 CholeskyFactor::Matrix() const {
  Mat2 m;
  m << l1, 0.0, l2, l3;
  return m;
}

Mat2 CholeskyFactor::Covariance() const {
  Mat2 c;
  c << l1 * l1, l1 * l2, l1 * l2, l2 * l2 + l3 * l3;
  return c;
}

Mat2 RegionMotionFrame::Affine() const { return AffineFromCovariance(Covariance()); }

void RegionMotionFrame::Validate() const {
  if (!mu.allFinite() || !std::isfinite(L.l1) || !std::isfinite(L.l2) ||
      !std::isfinite(L.l3)) {
    throw ValidationError("region frame has non-finite values");
  }
  if (!(L.l1 > 0.0) || !(L.l3 > 0.0)) {
    throw ValidationError(fmt::format(
        "Cholesky diagonal must be positive, got l1={:.9g} l3={:.9g}", L.l1, L.l3));
  }
}

Vec2 Heatmap::Coordinate(int row, int col) const {
  const double x = width > 1 ? static_cast<double>(col) / (width - 1) : 0.0;
  const double y = height > 1 ? static_cast<double>(row) / (height - 1) : 0.0;
  return {x, y};
}

Moments HeatmapMoments(const Heatmap& h) {
  if (h.height < 1 || h.width < 1 ||
      h.values.size() != static_cast<std::size_t>(h.height) * h.width) {
    throw ValidationError("heatmap dimensions do not match its values");
  }
  double total = 0.0;
  for (double v : h.values) {
    if (!(v >= 0.0)) throw ValidationError("heatmap entries must be nonnegative");
    total += v;
  }
  if (std::abs(total - 1.0) > kHeatmapSumTolerance) {
    throw ValidationError(fmt::format("heatmap is not normalized: sum={:.9g}", total));
  }
  Vec2 mu = Vec2::Zero();
  for (int r = 0; r < h.height; ++r) {
    for (int c = 0; c < h.width; ++c) {
      mu += h.values[static_cast<std::size_t>(r) * h.width + c] * h.Coordinate(r, c);
    }
  }
  Mat2 cov = Mat2::Zero();
  for (int r = 0; r < h.height; ++r) {
    for (int c = 0; c < h.width; ++c) {
      const Vec2 d = h.Coordinate(r, c) - mu;
      cov += h.values[static_cast<std::size_t>(r) * h.width + c] * (d * d.transpose());
    }
  }
  return {mu, cov};
}

RegionMotionFrame FrameFromMoments(const Moments& m) {
  RegionMotionFrame f;
  f.mu = m.mu;
  f.L = CholeskyDecompose(m.covariance + kCovarianceRidge * Mat2::Identity());
  return f;
}

Mat2 AffineFromCovariance(const Mat2& c) {
  const double a = c(0, 0), d = c(1, 1);
  const double b = 0.5 * (c(0, 1) + c(1, 0));
  if (std::abs(c(0, 1) - c(1, 0)) > 1e-9 * std::max(1.0, c.cwiseAbs().maxCoeff())) {
    throw ValidationError("covariance is not symmetric");
  }
  const double mean = 0.5 * (a + d);
  const double radius = std::hypot(0.5 * (a - d), b);
  const double lambda1 = mean + radius;
  const double lambda2 = mean - radius;
  if (!(lambda2 > 0.0)) {
    throw NumericalError(fmt::format(
        "covariance is not positive definite: eigenvalue {:.9g}", lambda2));
  }
  Vec2 u1;
  if (b == 0.0) {
    u1 = a >= d ? Vec2(1.0, 0.0) : Vec2(0.0, 1.0);
  } else if (a >= d) {
    u1 = Vec2(lambda1 - d, b).normalized();
  } else {
    u1 = Vec2(b, lambda1 - a).normalized();
  }
  Vec2 u2(-u1.y(), u1.x());
  auto fix_sign = [](Vec2& u) {
    const double lead = u.x() != 0.0 ? u.x() : u.y();
    if (lead < 0.0) u = -u;
  };
  fix_sign(u1);
  fix_sign(u2);
  Mat2 out;
  out.col(0) = u1 * std::sqrt(lambda1);
  out.col(1) = u2 * std::sqrt(lambda2);
  return out;
}

CholeskyFactor CholeskyDecompose(const Mat2& c) {
  if (std::abs(c(0, 1) - c(1, 0)) > 1e-9 * std::max(1.0, c.cwiseAbs().maxCoeff())) {
    throw ValidationError("covariance is not symmetric");
  }
  if (!(c(0, 0) > 0.0)) {
    throw NumericalError(fmt::format("matrix is not SPD: c11={:.9g}", c(0, 0)));
  }
  CholeskyFactor l;
  l.l1 = std::sqrt(c(0, 0));
  l.l2 = c(1, 0) / l.l1;
  const double rest = c(1, 1) - l.l2 * l.l2;
  if (!(rest > 0.0)) {
    throw NumericalError(fmt::format("matrix is not SPD: c22 - l2^2={:.9g}", rest));
  }
  l.l3 = std::sqrt(rest);
  return l;
}

CholeskyFactor ProjectPositiveDiagonal(const CholeskyFactor& l, double eps) {
  return {std::max(l.l1, 0.0) + eps, l.l2, std::max(l.l3, 0.0) + eps};
}

CholeskyFactor ClampPositiveDiagonal(const CholeskyFactor& l, double eps) {
  return {std::max(l.l1, eps), l.l2, std::max(l.l3, eps)};
}

bool IsSymmetricPositiveDefinite(const Mat2& c, double sym_tol) {
  if (!c.allFinite()) return false;
  if (std::abs(c(0, 1) - c(1, 0)) > sym_tol * std::max(1.0, c.cwiseAbs().maxCoeff())) {
    return false;
  }
  const double b = 0.5 * (c(0, 1) + c(1, 0));
  return c(0, 0) > 0.0 && c(0, 0) * c(1, 1) - b * b > 0.0;
}

MotionSequence::MotionSequence(int frames, int regions, double fps)
    : frames_(frames), regions_(regions), fps_(fps) {
  if (frames < 1 || regions < 1 || !(fps > 0.0)) {
    throw ValidationError(fmt::format(
        "invalid motion sequence dimensions T={} K={} fps={}", frames, regions, fps));
  }
  data_.resize(static_cast<std::size_t>(frames) * regions);
}

std::span<const RegionMotionFrame> MotionSequence::Frame(int t) const {
  return {data_.data() + Index(t, 0), static_cast<std::size_t>(regions_)};
}

void MotionSequence::Validate() const {
  for (int t = 0; t < frames_; ++t) {
    for (int k = 0; k < regions_; ++k) {
      try {
        at(t, k).Validate();
      } catch (const ValidationError& e) {
        throw ValidationError(fmt::format("frame {} region {}: {}", t, k, e.what()));
      }
    }
  }
}

bool MotionSequence::operator==(const MotionSequence& o) const {
  if (frames_ != o.frames_ || regions_ != o.regions_ || fps_ != o.fps_) return false;
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (data_[i].mu != o.data_[i].mu || !(data_[i].L == o.data_[i].L)) return false;
  }
  return true;
}

RelativeMotionSequence ToRelative(const MotionSequence& seq) {
  if (seq.frames() < 2) {
    throw ValidationError(fmt::format(
        "sequence too short for differencing: T={} (need >= 2)", seq.frames()));
  }
  RelativeMotionSequence rel;
  rel.steps = seq.frames() - 1;
  rel.regions = seq.regions();
  rel.d_mu.reserve(static_cast<std::size_t>(rel.steps) * rel.regions * 2);
  rel.d_l.reserve(static_cast<std::size_t>(rel.steps) * rel.regions * 3);
  for (int t = 1; t < seq.frames(); ++t) {
    for (int k = 0; k < seq.regions(); ++k) {
      const auto& cur = seq.at(t, k);
      const auto& prev = seq.at(t - 1, k);
      rel.d_mu.push_back(cur.mu.x() - prev.mu.x());
      rel.d_mu.push_back(cur.mu.y() - prev.mu.y());
      rel.d_l.push_back(cur.L.l1 - prev.L.l1);
      rel.d_l.push_back(cur.L.l2 - prev.L.l2);
      rel.d_l.push_back(cur.L.l3 - prev.L.l3);
    }
  }
  return rel;
}

MotionSequence Integrate(std::span<const RegionMotionFrame> init,
                         const RelativeMotionSequence& rel, double fps) {
  if (static_cast<int>(init.size()) != rel.regions) {
    throw ValidationError(fmt::format("initial frame has {} regions, deltas have {}",
                                      init.size(), rel.regions));
  }
  MotionSequence seq(rel.steps + 1, rel.regions, fps);
  std::vector<RegionMotionFrame> running(init.begin(), init.end());
  for (int k = 0; k < rel.regions; ++k) {
    seq.at(0, k) = running[k];
    seq.at(0, k).L = ClampPositiveDiagonal(running[k].L);
  }
  for (int t = 0; t < rel.steps; ++t) {
    for (int k = 0; k < rel.regions; ++k) {
      auto& r = running[k];
      r.mu.x() += rel.dmu(t, k, 0);
      r.mu.y() += rel.dmu(t, k, 1);
      r.L.l1 += rel.dl(t, k, 0);
      r.L.l2 += rel.dl(t, k, 1);
      r.L.l3 += rel.dl(t, k, 2);
      seq.at(t + 1, k).mu = r.mu;
      seq.at(t + 1, k).L = ClampPositiveDiagonal(r.L);
    }
  }
  return seq;
}

MotionSequence Translate(const MotionSequence& seq, const Vec2& offset) {
  MotionSequence out = seq;
  for (int t = 0; t < seq.frames(); ++t) {
    for (int k = 0; k < seq.regions(); ++k) out.at(t, k).mu += offset;
  }
  return out;
}

std::string FormatMotion(const MotionSequence& seq) {
  fmt::memory_buffer buf;
  fmt::format_to(std::back_inserter(buf), "version=1 K={} fps={:.17g} T={}\n",
                 seq.regions(), seq.fps(), seq.frames());
  for (int t = 0; t < seq.frames(); ++t) {
    for (int k = 0; k < seq.regions(); ++k) {
      const auto& f = seq.at(t, k);
      fmt::format_to(std::back_inserter(buf),
                     "{} {} {:.17g} {:.17g} {:.17g} {:.17g} {:.17g}\n", t, k,
                     f.mu.x(), f.mu.y(), f.L.l1, f.L.l2, f.L.l3);
    }
  }
  return fmt::to_string(buf);
}

MotionSequence ParseMotion(const std::string& text) {
  std::istringstream in(text);
  std::string header;
  if (!std::getline(in, header)) throw ValidationError("motion file is empty");
  int version = -1, k = -1, t = -1;
  double fps = -1.0;
  {
    std::istringstream hs(header);
    std::string field;
    while (hs >> field) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw ValidationError("bad header field: " + field);
      const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
      try {
        if (key == "version") version = std::stoi(value);
        else if (key == "K") k = std::stoi(value);
        else if (key == "fps") fps = std::stod(value);
        else if (key == "T") t = std::stoi(value);
        else throw ValidationError("unknown header key: " + key);
      } catch (const std::logic_error&) {
        throw ValidationError("bad header value: " + field);
      }
    }
  }
  if (version != 1) throw ValidationError("unsupported motion file version");
  MotionSequence seq(t, k, fps);
  for (int i = 0; i < t * k; ++i) {
    int frame = -1, region = -1;
    double mx, my, l1, l2, l3;
    if (!(in >> frame >> region >> mx >> my >> l1 >> l2 >> l3)) {
      throw ValidationError(fmt::format("motion file truncated at record {}", i));
    }
    if (frame != i / k || region != i % k) {
      throw ValidationError(fmt::format("motion record {} out of order", i));
    }
    auto& f = seq.at(frame, region);
    f.mu = Vec2(mx, my);
    f.L = {l1, l2, l3};
  }
  return seq;
}

void WriteMotionFile(const std::string& path, const MotionSequence& seq) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path);
  out << FormatMotion(seq);
}

MotionSequence ReadMotionFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ParseMotion(ss.str());
}

}  // namespace angie::motion
