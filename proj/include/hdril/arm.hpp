#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "hdril/errors.hpp"
#include "hdril/geometry.hpp"

namespace hdril::kin {

inline constexpr std::size_t kJoints = 7;
using Joints = std::array<double, kJoints>;
using Jacobian = Eigen::Matrix<double, 6, kJoints>;

struct JointSpec {
  Vector3d offset;  // translation from the previous frame to this joint, previous frame
  Vector3d axis;    // rotation axis, local frame
  double lower = -std::numbers::pi;
  double upper = std::numbers::pi;
};

struct ArmModel {
  std::string name;
  Pose base;
  std::array<JointSpec, kJoints> joints;
  Vector3d tool = Vector3d::Zero();  // joint 7 frame to the tool point

  /// Distance from shoulder() to the tool with the arm fully stretched.
  double reach() const {
    double r = tool.norm();
    for (std::size_t i = 2; i < kJoints; ++i) r += joints[i].offset.norm();
    return r;
  }
  Vector3d shoulder() const {
    return base.position + rotate(base.orientation, joints[0].offset + joints[1].offset);
  }
};

struct ArmGeometry {
  double shoulder_height = 0.10;  // joint 1 to joint 2
  double upper_arm = 0.37;
  double forearm = 0.37;
  double hand = 0.16;
  double twist_limit = 350.0;  // degrees, z joints (roll joints turn past a half circle)
  double bend_limit = 150.0;   // degrees, y joints
};

/// Alternating z/y chain with a spherical wrist. Joint 1 sits at the base
/// origin; with all joints at zero the arm points along the base z axis.
inline ArmModel make_arm(std::string name, const Pose& base, const ArmGeometry& g = {}) {
  const double tz = g.twist_limit * std::numbers::pi / 180.0;
  const double by = g.bend_limit * std::numbers::pi / 180.0;
  const Vector3d z = Vector3d::UnitZ(), y = Vector3d::UnitY();
  ArmModel arm;
  arm.name = std::move(name);
  arm.base = base;
  arm.joints = {{
      {Vector3d::Zero(), z, -tz, tz},
      {Vector3d(0, 0, g.shoulder_height), y, -by, by},
      {Vector3d::Zero(), z, -tz, tz},
      {Vector3d(0, 0, g.upper_arm), y, -by, by},
      {Vector3d(0, 0, g.forearm), z, -tz, tz},
      {Vector3d::Zero(), y, -by, by},
      {Vector3d::Zero(), z, -tz, tz},
  }};
  arm.tool = Vector3d(0, 0, g.hand);
  for (const auto& j : arm.joints)
    if (!(j.lower < j.upper)) throw ContractError("joint limits must satisfy lower < upper");
  return arm;
}

inline void check_limits(const ArmModel& arm, const Joints& q) {
  for (std::size_t i = 0; i < kJoints; ++i) {
    if (!std::isfinite(q[i]) || q[i] < arm.joints[i].lower - 1e-12 || q[i] > arm.joints[i].upper + 1e-12)
      throw JointLimitError(arm.name + " joint " + std::to_string(i + 1) + " = " + std::to_string(q[i]) +
                            " outside [" + std::to_string(arm.joints[i].lower) + ", " +
                            std::to_string(arm.joints[i].upper) + "]");
  }
}

inline Joints clamp_to_limits(const ArmModel& arm, Joints q) {
  for (std::size_t i = 0; i < kJoints; ++i) q[i] = std::clamp(q[i], arm.joints[i].lower, arm.joints[i].upper);
  return q;
}

struct ChainFrames {
  std::array<Vector3d, kJoints> origin;
  std::array<Vector3d, kJoints> axis;
  Pose tool;
};

/// World-frame joint origins and axes plus the tool pose. No limit check.
inline ChainFrames chain_frames(const ArmModel& arm, const Joints& q) {
  ChainFrames f;
  Pose t = arm.base;
  for (std::size_t i = 0; i < kJoints; ++i) {
    t = translate(t, rotate(t.orientation, arm.joints[i].offset));
    f.origin[i] = t.position;
    f.axis[i] = rotate(t.orientation, arm.joints[i].axis);
    t.orientation = compose(t.orientation, from_axis_angle(arm.joints[i].axis, q[i]));
  }
  f.tool = translate(t, rotate(t.orientation, arm.tool));
  return f;
}

inline Pose forward_kinematics(const ArmModel& arm, const Joints& q) {
  check_limits(arm, q);
  return chain_frames(arm, q).tool;
}

inline Jacobian jacobian(const ChainFrames& f) {
  Jacobian j;
  for (std::size_t i = 0; i < kJoints; ++i) {
    j.block<3, 1>(0, i) = f.axis[i].cross(f.tool.position - f.origin[i]);
    j.block<3, 1>(3, i) = f.axis[i];
  }
  return j;
}

inline Jacobian jacobian(const ArmModel& arm, const Joints& q) {
  check_limits(arm, q);
  return jacobian(chain_frames(arm, q));
}

struct IkOptions {
  double damping = 0.1;
  double position_tolerance = 1e-3;
  double orientation_tolerance = 1e-2;
  std::size_t max_iterations = 200;
  double max_step = 0.2;  // cap on the Cartesian error fed to one iteration, meters
};

struct IkResult {
  Joints joints{};
  double position_residual = 0.0;
  double orientation_residual = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

/// Damped least squares on the full 6D pose error.
inline IkResult ik_solve(const ArmModel& arm, const Pose& target, const Joints& seed, const IkOptions& opt = {}) {
  if (!target.position.allFinite() || !std::isfinite(norm(target.orientation)))
    throw ContractError("ik target must be finite");
  const Quat goal = normalize(target.orientation);

  IkResult r;
  r.joints = clamp_to_limits(arm, seed);
  const auto measure = [&](const Pose& p) {
    r.position_residual = (target.position - p.position).norm();
    r.orientation_residual = geodesic_distance(p.orientation, goal);
    return r.position_residual < opt.position_tolerance && r.orientation_residual < opt.orientation_tolerance;
  };

  Pose now = chain_frames(arm, r.joints).tool;
  r.converged = measure(now);
  const double lambda2 = opt.damping * opt.damping;
  while (!r.converged && r.iterations < opt.max_iterations) {
    Eigen::Matrix<double, 6, 1> e;
    Vector3d dp = target.position - now.position;
    if (dp.norm() > opt.max_step) dp *= opt.max_step / dp.norm();
    e.head<3>() = dp;
    e.tail<3>() = rotation_vector(compose(goal, conjugate(now.orientation)));

    const Jacobian j = jacobian(chain_frames(arm, r.joints));
    const Eigen::Matrix<double, 6, 6> jjt = j * j.transpose() + lambda2 * Eigen::Matrix<double, 6, 6>::Identity();
    const Eigen::Matrix<double, kJoints, 1> dq = j.transpose() * jjt.ldlt().solve(e);
    for (std::size_t i = 0; i < kJoints; ++i) r.joints[i] += dq[static_cast<Eigen::Index>(i)];
    r.joints = clamp_to_limits(arm, r.joints);
    ++r.iterations;
    now = chain_frames(arm, r.joints).tool;
    r.converged = measure(now);
  }
  return r;
}

}  // namespace hdril::kin
