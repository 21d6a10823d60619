#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>

#include "hdril/errors.hpp"

namespace hdril::kin {

using Eigen::Matrix3d;
using Eigen::Vector3d;

/// Rotation quaternion stored (w, x, y, z).
struct Quat {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  Vector3d vec() const { return {x, y, z}; }
  std::array<double, 4> wxyz() const { return {w, x, y, z}; }

  friend bool operator==(const Quat&, const Quat&) = default;
};

inline double dot(const Quat& a, const Quat& b) { return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(const Quat& q) { return std::sqrt(dot(q, q)); }

inline Quat normalize(const Quat& q) {
  const double n = norm(q);
  if (!(n > 1e-12) || !std::isfinite(n)) throw NormalizationError("cannot normalize a zero-norm quaternion");
  return {q.w / n, q.x / n, q.y / n, q.z / n};
}

inline Quat conjugate(const Quat& q) { return {q.w, -q.x, -q.y, -q.z}; }

/// Hamilton product a * b (apply b first, then a).
inline Quat multiply(const Quat& a, const Quat& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z, a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x, a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

/// Product followed by re-normalisation, so long chains do not drift.
inline Quat compose(const Quat& a, const Quat& b) { return normalize(multiply(a, b)); }

inline Vector3d rotate(const Quat& q, const Vector3d& v) {
  const Vector3d u = q.vec();
  const Vector3d t = 2.0 * u.cross(v);
  return v + q.w * t + u.cross(t);
}

inline Matrix3d to_matrix(const Quat& q) {
  return Eigen::Quaterniond(q.w, q.x, q.y, q.z).toRotationMatrix();
}

inline Quat from_axis_angle(const Vector3d& axis, double angle) {
  const double n = axis.norm();
  if (n < 1e-12) throw NormalizationError("rotation axis has zero length");
  const Vector3d a = axis / n;
  const double s = std::sin(0.5 * angle);
  return {std::cos(0.5 * angle), a.x() * s, a.y() * s, a.z() * s};
}

/// Shortest rotation angle between two orientations, in [0, pi]. For unit
/// quaternions this equals 2 acos(min(1, |a.b|)); the half-angle form used
/// here keeps full precision near zero, so geodesic(q, q) is exactly 0.
inline double geodesic_distance(const Quat& a, const Quat& b) {
  const double s = dot(a, b) < 0 ? -1.0 : 1.0;
  const Quat d{a.w - s * b.w, a.x - s * b.x, a.y - s * b.y, a.z - s * b.z};
  const Quat p{a.w + s * b.w, a.x + s * b.x, a.y + s * b.y, a.z + s * b.z};
  return 4.0 * std::atan2(norm(d), norm(p));
}

/// Euclidean gap between the closer of q and -q and p. Unlike the geodesic
/// angle it stays well conditioned for nearly equal rotations.
inline double component_gap(const Quat& a, const Quat& b) {
  const double minus = dot({a.w - b.w, a.x - b.x, a.y - b.y, a.z - b.z}, {a.w - b.w, a.x - b.x, a.y - b.y, a.z - b.z});
  const double plus = dot({a.w + b.w, a.x + b.x, a.y + b.y, a.z + b.z}, {a.w + b.w, a.x + b.x, a.y + b.y, a.z + b.z});
  return std::sqrt(std::min(minus, plus));
}

/// Rotation vector (axis * angle, angle in [0, pi]) of a unit quaternion.
inline Vector3d rotation_vector(const Quat& q) {
  const Quat h = q.w < 0 ? Quat{-q.w, -q.x, -q.y, -q.z} : q;
  const double s = h.vec().norm();
  if (s < 1e-12) return 2.0 * h.vec();
  const double angle = 2.0 * std::atan2(s, h.w);
  return h.vec() * (angle / s);
}

/// Spherical interpolation along the short arc.
inline Quat slerp(const Quat& a, Quat b, double t) {
  double c = dot(a, b);
  if (c < 0) {
    b = {-b.w, -b.x, -b.y, -b.z};
    c = -c;
  }
  if (c > 1.0 - 1e-12) {
    return normalize({a.w + t * (b.w - a.w), a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), a.z + t * (b.z - a.z)});
  }
  const double theta = std::acos(c);
  const double wa = std::sin((1 - t) * theta) / std::sin(theta);
  const double wb = std::sin(t * theta) / std::sin(theta);
  return normalize({wa * a.w + wb * b.w, wa * a.x + wb * b.x, wa * a.y + wb * b.y, wa * a.z + wb * b.z});
}

/// Normalised linear interpolation along the short arc.
inline Quat nlerp(const Quat& a, const Quat& b, double t) {
  const double s = dot(a, b) < 0 ? -1.0 : 1.0;
  return normalize({(1 - t) * a.w + t * s * b.w, (1 - t) * a.x + t * s * b.x, (1 - t) * a.y + t * s * b.y,
                    (1 - t) * a.z + t * s * b.z});
}

struct Pose {
  Vector3d position = Vector3d::Zero();
  Quat orientation;

  friend bool operator==(const Pose& a, const Pose& b) {
    return a.position == b.position && a.orientation == b.orientation;
  }
};

/// a then b expressed in a's frame.
inline Pose compose(const Pose& a, const Pose& b) {
  return {a.position + rotate(a.orientation, b.position), compose(a.orientation, b.orientation)};
}

inline Pose inverse(const Pose& p) {
  const Quat qi = conjugate(p.orientation);
  return {-rotate(qi, p.position), qi};
}

/// Pose of `b` in the frame of `a`.
inline Pose relative(const Pose& a, const Pose& b) { return compose(inverse(a), b); }

inline Pose translate(const Pose& p, const Vector3d& d) { return {p.position + d, p.orientation}; }

}  // namespace hdril::kin
