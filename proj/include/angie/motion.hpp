#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

// Region motion representation: each articulated region is a shift-translation
// mu plus a covariance C, stored canonically through its Cholesky factor L.
// C = L L^T and the affine A (A A^T = C) are derived on demand.
namespace angie::motion {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

// Positivity margin for the Cholesky diagonal.
inline constexpr double kDiagonalEpsilon = 1e-5;
// Ridge added to heatmap covariances so point masses stay factorizable.
inline constexpr double kCovarianceRidge = 1e-6;
// Allowed deviation of a heatmap's total mass from 1.
inline constexpr double kHeatmapSumTolerance = 1e-4;

// Lower-triangular factor [[l1, 0], [l2, l3]].
struct CholeskyFactor {
  double l1 = 1.0;
  double l2 = 0.0;
  double l3 = 1.0;

  Mat2 Matrix() const;
  Mat2 Covariance() const;
  bool operator==(const CholeskyFactor&) const = default;
};

struct RegionMotionFrame {
  Vec2 mu = Vec2::Zero();
  CholeskyFactor L;

  Mat2 Covariance() const { return L.Covariance(); }
  Mat2 Affine() const;
  // Throws ValidationError when l1/l3 are not strictly positive or values
  // are non-finite.
  void Validate() const;
};

// Softmax-normalized heatmap over an H x W grid. Pixel (row r, col c) sits at
// z = (c / (W - 1), r / (H - 1)).
struct Heatmap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // row-major

  Vec2 Coordinate(int row, int col) const;
};

struct Moments {
  Vec2 mu;
  Mat2 covariance;
};

Moments HeatmapMoments(const Heatmap& h);
// Adds kCovarianceRidge * I to the covariance before factorizing.
RegionMotionFrame FrameFromMoments(const Moments& m);

// A = U Sigma^{1/2} from the SVD of C. U columns follow descending singular
// values, each with its first nonzero entry positive.
Mat2 AffineFromCovariance(const Mat2& c);
CholeskyFactor CholeskyDecompose(const Mat2& c);
// l1, l3 <- max(l, 0) + eps.
CholeskyFactor ProjectPositiveDiagonal(const CholeskyFactor& l,
                                       double eps = kDiagonalEpsilon);
// l1, l3 <- max(l, eps); a no-op on factors that are already valid.
CholeskyFactor ClampPositiveDiagonal(const CholeskyFactor& l,
                                     double eps = kDiagonalEpsilon);
bool IsSymmetricPositiveDefinite(const Mat2& c, double sym_tol = 1e-9);

class MotionSequence {
 public:
  MotionSequence() = default;
  MotionSequence(int frames, int regions, double fps);

  int frames() const { return frames_; }
  int regions() const { return regions_; }
  double fps() const { return fps_; }

  RegionMotionFrame& at(int t, int k) { return data_[Index(t, k)]; }
  const RegionMotionFrame& at(int t, int k) const { return data_[Index(t, k)]; }
  std::span<const RegionMotionFrame> Frame(int t) const;

  void Validate() const;
  bool operator==(const MotionSequence&) const;

 private:
  std::size_t Index(int t, int k) const {
    return static_cast<std::size_t>(t) * regions_ + k;
  }
  int frames_ = 0;
  int regions_ = 0;
  double fps_ = 25.0;
  std::vector<RegionMotionFrame> data_;
};

// Adjacent-frame differences. d_mu: (T-1) x K x 2, d_l: (T-1) x K x 3, both
// flattened row-major.
struct RelativeMotionSequence {
  int steps = 0;  // T - 1
  int regions = 0;
  std::vector<double> d_mu;
  std::vector<double> d_l;

  double dmu(int t, int k, int c) const { return d_mu[(static_cast<std::size_t>(t) * regions + k) * 2 + c]; }
  double dl(int t, int k, int c) const { return d_l[(static_cast<std::size_t>(t) * regions + k) * 3 + c]; }
};

RelativeMotionSequence ToRelative(const MotionSequence& seq);
// mu_j = mu_1 + sum dmu, L_j = L_1 + sum dL, then ClampPositiveDiagonal.
MotionSequence Integrate(std::span<const RegionMotionFrame> init,
                         const RelativeMotionSequence& rel, double fps);

MotionSequence Translate(const MotionSequence& seq, const Vec2& offset);

// Text motion file: a header record "version=1 K=<K> fps=<fps> T=<T>"
// followed by T*K records "frame region mu_x mu_y l1 l2 l3".
void WriteMotionFile(const std::string& path, const MotionSequence& seq);
MotionSequence ReadMotionFile(const std::string& path);
std::string FormatMotion(const MotionSequence& seq);
MotionSequence ParseMotion(const std::string& text);

}  // namespace angie::motion
