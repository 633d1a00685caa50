#pragma once

#include <span>
#include <string>

#include "angie/motion.hpp"

// Offline ellipse rendering: every region is drawn as the 2-sigma contour of
// its covariance, centred at mu. Motion coordinates in [0, 1] map onto the
// image square.
namespace angie::render {

struct Ellipse {
  motion::Vec2 center;  // pixels
  motion::Vec2 axes;    // semi-axes in pixels, major first
  double angle_deg = 0.0;  // rotation of the major axis from +x
};

struct RenderOptions {
  int size = 256;
  double sigmas = 2.0;
  int thickness = 2;
};

Ellipse CovarianceEllipse(const motion::RegionMotionFrame& frame, const RenderOptions& opt = {});

// Writes frame_00000.png ... and animation.avi (MJPG at the sequence fps)
// into `dir`; returns the animation path.
std::string RenderSequence(const motion::MotionSequence& seq, const std::string& dir,
                           const RenderOptions& opt = {});

}  // namespace angie::render
