#pragma once

#include <cmath>
#include <stdexcept>

#include "cotrack/matrix.hpp"
#include "cotrack/rotation.hpp"

namespace cotrack {

/// Oriented 3D box with planar velocity: center (x,y,z), size (w,l,h) with l
/// along the body x axis, yaw about z, velocity (vx,vy), class id and score.
struct Box3D {
  double x = 0, y = 0, z = 0;
  double w = 1, l = 1, h = 1;
  double theta = 0;
  double vx = 0, vy = 0;
  int class_label = 0;
  double score = 1.0;

  void validate() const {
    if (w <= 0 || l <= 0 || h <= 0)
      throw std::invalid_argument("Box3D: non-positive dimensions");
    if (score < 0 || score > 1)
      throw std::invalid_argument("Box3D: score outside [0,1]");
  }

  /// 10-component attribute vector used by L1 matching costs and losses:
  /// [x, y, z, w, l, h, sin(theta), cos(theta), vx, vy].
  Matrix attributes() const {
    Matrix a(1, 10);
    a.at(0, 0) = x;
    a.at(0, 1) = y;
    a.at(0, 2) = z;
    a.at(0, 3) = w;
    a.at(0, 4) = l;
    a.at(0, 5) = h;
    a.at(0, 6) = std::sin(theta);
    a.at(0, 7) = std::cos(theta);
    a.at(0, 8) = vx;
    a.at(0, 9) = vy;
    return a;
  }

  double center_dist_2d(const Box3D& o) const {
    return std::hypot(x - o.x, y - o.y);
  }
};

/// The 8 box corners relative to the center: (+-l/2, +-w/2, +-h/2) rotated by
/// yaw, in a fixed sign-enumeration order. Translation-invariant by
/// construction.
inline Matrix corners_from_box(const Box3D& b) {
  if (b.w <= 0 || b.l <= 0 || b.h <= 0)
    throw std::invalid_argument("corners_from_box: non-positive dimensions");
  Matrix c(8, 3);
  const double cs = std::cos(b.theta), sn = std::sin(b.theta);
  int row = 0;
  for (int sx : {1, -1})
    for (int sy : {1, -1})
      for (int sz : {1, -1}) {
        const double px = sx * b.l / 2.0;
        const double py = sy * b.w / 2.0;
        c.at(row, 0) = cs * px - sn * py;
        c.at(row, 1) = sn * px + cs * py;
        c.at(row, 2) = sz * b.h / 2.0;
        ++row;
      }
  return c;
}

/// Rigid transform of a box (center, yaw, velocity) into another frame.
inline Box3D transform_box(const Box3D& b, const Pose& pose) {
  Box3D out = b;
  Matrix p(1, 3);
  p.at(0, 0) = b.x;
  p.at(0, 1) = b.y;
  p.at(0, 2) = b.z;
  Matrix q = spatial_transform(p, pose);
  out.x = q.at(0, 0);
  out.y = q.at(0, 1);
  out.z = q.at(0, 2);
  const double yaw = pose.yaw();
  out.theta = wrap_angle(b.theta + yaw);
  const double c = std::cos(yaw), s = std::sin(yaw);
  out.vx = c * b.vx - s * b.vy;
  out.vy = s * b.vx + c * b.vy;
  return out;
}

}  // namespace cotrack
