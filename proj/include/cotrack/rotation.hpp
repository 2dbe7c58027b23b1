#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

#include "cotrack/matrix.hpp"
#include "cotrack/rng.hpp"

namespace cotrack {

using Vec3 = std::array<double, 3>;

inline double dot3(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

inline Vec3 cross3(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
          a[0] * b[1] - a[1] * b[0]};
}

inline double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }

/// Wrap an angle to (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * M_PI);
  if (a <= -M_PI) a += 2.0 * M_PI;
  if (a > M_PI) a -= 2.0 * M_PI;
  return a;
}

inline Matrix rotation_z(double yaw) {
  Matrix r = Matrix::identity(3);
  const double c = std::cos(yaw), s = std::sin(yaw);
  r.at(0, 0) = c;
  r.at(0, 1) = -s;
  r.at(1, 0) = s;
  r.at(1, 1) = c;
  return r;
}

inline Matrix rotation_axis_angle(const Vec3& axis_in, double angle) {
  const double n = norm3(axis_in);
  if (n < 1e-12) throw std::invalid_argument("rotation_axis_angle: zero axis");
  const Vec3 u{axis_in[0] / n, axis_in[1] / n, axis_in[2] / n};
  const double c = std::cos(angle), s = std::sin(angle);
  Matrix r(3, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.at(i, j) = (1.0 - c) * u[i] * u[j];
  r.at(0, 0) += c;
  r.at(1, 1) += c;
  r.at(2, 2) += c;
  r.at(0, 1) -= s * u[2];
  r.at(0, 2) += s * u[1];
  r.at(1, 0) += s * u[2];
  r.at(1, 2) -= s * u[0];
  r.at(2, 0) -= s * u[1];
  r.at(2, 1) += s * u[0];
  return r;
}

inline double max_orthonormality_error(const Matrix& r) {
  Matrix rtr = matmul_tn(r, r);
  return max_abs_diff(rtr, Matrix::identity(3));
}

inline double det3(const Matrix& r) {
  return r.at(0, 0) * (r.at(1, 1) * r.at(2, 2) - r.at(1, 2) * r.at(2, 1)) -
         r.at(0, 1) * (r.at(1, 0) * r.at(2, 2) - r.at(1, 2) * r.at(2, 0)) +
         r.at(0, 2) * (r.at(1, 0) * r.at(2, 1) - r.at(1, 1) * r.at(2, 0));
}

/// First two columns of R, flattened: [r00,r10,r20, r01,r11,r21].
inline Matrix rot6d_encode(const Matrix& r) {
  if (r.rows != 3 || r.cols != 3)
    throw std::invalid_argument("rot6d_encode: expected 3x3");
  if (max_orthonormality_error(r) > 1e-6)
    throw std::invalid_argument("rot6d_encode: input not orthonormal");
  Matrix v(1, 6);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 3; ++i) v.at(0, 3 * c + i) = r.at(i, c);
  return v;
}

/// Gram-Schmidt on the two encoded 3-vectors, third column from the cross
/// product. Output is orthonormal with det +1 for any non-degenerate input.
inline Matrix rot6d_decode(const Matrix& v) {
  if (v.size() != 6) throw std::invalid_argument("rot6d_decode: expected 6");
  Vec3 a1{v.data[0], v.data[1], v.data[2]};
  Vec3 a2{v.data[3], v.data[4], v.data[5]};
  const double n1 = norm3(a1);
  if (n1 < 1e-9) throw std::invalid_argument("rot6d_decode: zero first vector");
  Vec3 b1{a1[0] / n1, a1[1] / n1, a1[2] / n1};
  const double proj = dot3(b1, a2);
  Vec3 b2{a2[0] - proj * b1[0], a2[1] - proj * b1[1], a2[2] - proj * b1[2]};
  const double n2 = norm3(b2);
  if (n2 < 1e-9)
    throw std::invalid_argument("rot6d_decode: degenerate (parallel) input");
  b2 = {b2[0] / n2, b2[1] / n2, b2[2] / n2};
  const Vec3 b3 = cross3(b1, b2);
  Matrix r(3, 3);
  for (int i = 0; i < 3; ++i) {
    r.at(i, 0) = b1[i];
    r.at(i, 1) = b2[i];
    r.at(i, 2) = b3[i];
  }
  return r;
}

/// Rigid transform x' = x * R^T + t, mapping points from the "from" frame to
/// the "to" frame.
struct Pose {
  Matrix r = Matrix::identity(3);
  Matrix t = Matrix(1, 3);

  static Pose identity() { return Pose{}; }

  static Pose from_yaw_xyz(double yaw, double x, double y, double z) {
    Pose p;
    p.r = rotation_z(yaw);
    p.t.at(0, 0) = x;
    p.t.at(0, 1) = y;
    p.t.at(0, 2) = z;
    return p;
  }

  void validate() const {
    if (max_orthonormality_error(r) > 1e-6 || std::abs(det3(r) - 1.0) > 1e-6)
      throw std::invalid_argument("Pose: rotation not orthonormal/proper");
  }

  double yaw() const { return std::atan2(r.at(1, 0), r.at(0, 0)); }
};

/// Inverse pose: R' = R^T, t' = -t * R.
inline Pose pose_inverse(const Pose& p) {
  Pose inv;
  inv.r = transpose(p.r);
  inv.t = scale(matmul(p.t, p.r), -1.0);
  return inv;
}

/// a then b... composition such that apply(compose(b, a), x) = apply(b, apply(a, x)).
inline Pose pose_compose(const Pose& b, const Pose& a) {
  Pose out;
  out.r = matmul(b.r, a.r);
  out.t = add(matmul_nt(a.t, b.r), b.t);
  return out;
}

/// Rigid transform of N x 3 points.
inline Matrix spatial_transform(const Matrix& points, const Pose& pose) {
  if (points.empty()) return Matrix(points.rows, 3);
  if (points.cols != 3)
    throw std::invalid_argument("spatial_transform: expected Nx3 points");
  Matrix out = matmul_nt(points, pose.r);
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < 3; ++j) out.at(i, j) += pose.t.at(0, j);
  return out;
}

/// Uniformly random rotation from a random axis and angle.
inline Matrix random_rotation(Rng& rng) {
  Vec3 axis;
  double n;
  do {
    axis = {rng.normal(), rng.normal(), rng.normal()};
    n = norm3(axis);
  } while (n < 1e-6);
  return rotation_axis_angle(axis, rng.uniform(0.0, M_PI));
}

/// Small random perturbation: rotation by angle ~ N(0, sigma) about a random
/// axis, left-multiplied onto R.
inline Matrix perturb_rotation(const Matrix& r, double sigma, Rng& rng) {
  if (sigma <= 0.0) return r;
  Vec3 axis;
  double n;
  do {
    axis = {rng.normal(), rng.normal(), rng.normal()};
    n = norm3(axis);
  } while (n < 1e-6);
  const double angle = rng.normal(0.0, sigma);
  return matmul(rotation_axis_angle(axis, angle), r);
}

}  // namespace cotrack
