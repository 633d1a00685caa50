#include "angie/render.hpp"

#include <cmath>
#include <filesystem>
#include <numbers>

#include <Eigen/Eigenvalues>
#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <opencv2/videoio.hpp>

#include "angie/errors.hpp"

namespace angie::render {

Ellipse CovarianceEllipse(const motion::RegionMotionFrame& frame, const RenderOptions& opt) {
  frame.Validate();
  Eigen::SelfAdjointEigenSolver<motion::Mat2> eig(frame.Covariance());
  // Eigenvalues ascend; the last vector is the major axis.
  const Eigen::Vector2d values = eig.eigenvalues().cwiseMax(0.0);
  const motion::Vec2 major = eig.eigenvectors().col(1);
  Ellipse e;
  e.center = frame.mu * opt.size;
  e.axes = {opt.sigmas * std::sqrt(values(1)) * opt.size,
            opt.sigmas * std::sqrt(values(0)) * opt.size};
  e.angle_deg = std::atan2(major.y(), major.x()) * 180.0 / std::numbers::pi;
  return e;
}

namespace {

cv::Scalar RegionColor(int k) {
  static const cv::Scalar palette[] = {{66, 133, 244}, {219, 68, 55},  {15, 157, 88},
                                       {244, 180, 0},  {171, 71, 188}, {0, 172, 193}};
  return palette[k % 6];
}

}  // namespace

std::string RenderSequence(const motion::MotionSequence& seq, const std::string& dir,
                           const RenderOptions& opt) {
  if (seq.frames() < 1) throw ValidationError("nothing to render: empty sequence");
  if (opt.size < 16) throw ValidationError("render size must be at least 16 pixels");
  std::filesystem::create_directories(dir);
  const std::string video = dir + "/animation.avi";
  cv::VideoWriter writer(video, cv::VideoWriter::fourcc('M', 'J', 'P', 'G'), seq.fps(),
                         cv::Size(opt.size, opt.size));
  if (!writer.isOpened()) throw ValidationError("cannot open video writer for " + video);
  for (int t = 0; t < seq.frames(); ++t) {
    cv::Mat image(opt.size, opt.size, CV_8UC3, cv::Scalar(255, 255, 255));
    for (int k = 0; k < seq.regions(); ++k) {
      const Ellipse e = CovarianceEllipse(seq.at(t, k), opt);
      const cv::Point center(static_cast<int>(std::lround(e.center.x())),
                             static_cast<int>(std::lround(e.center.y())));
      const cv::Size axes(std::max(1, static_cast<int>(std::lround(e.axes.x()))),
                          std::max(1, static_cast<int>(std::lround(e.axes.y()))));
      cv::ellipse(image, center, axes, e.angle_deg, 0, 360, RegionColor(k), opt.thickness,
                  cv::LINE_AA);
      cv::circle(image, center, 2, RegionColor(k), cv::FILLED);
    }
    const std::string png = fmt::format("{}/frame_{:05d}.png", dir, t);
    if (!cv::imwrite(png, image)) throw ValidationError("cannot write " + png);
    writer.write(image);
  }
  return video;
}

}  // namespace angie::render
