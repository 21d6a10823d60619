#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "hdril/arm.hpp"
#include "hdril/errors.hpp"
#include "hdril/geometry.hpp"

namespace hdril::kin {

enum class Side { Left, Right, Both };

struct Entity {
  std::string name;
  Pose pose;
  std::vector<Vector3d> handles;  // grasp points, entity frame
};

enum class Parent { Left, Right, Both, Entity };

/// entity pose = frame(parent) composed with offset
struct Attachment {
  std::size_t entity = 0;
  Parent parent = Parent::Left;
  std::size_t parent_entity = 0;  // only for Parent::Entity
  Pose offset;
};

struct Robot {
  ArmModel left;
  ArmModel right;
  IkOptions ik;
  double grasp_tolerance = 0.03;
};

struct WorldState {
  Joints left_joints{};
  Joints right_joints{};
  Pose left_gripper;  // FK of left_joints
  Pose right_gripper;
  std::vector<Entity> entities;
  std::vector<Attachment> attachments;
};

struct Directive {
  enum class Kind { Grasp, Release, Join };
  Kind kind = Kind::Grasp;
  Side side = Side::Both;
  std::size_t entity = 0;  // Join: child
  std::size_t target = 0;  // Join: parent
  Pose nominal;            // Join: child pose in the parent frame
  double tolerance = 0.0;  // Join: position tolerance, meters

  static Directive grasp(Side s) { return {Kind::Grasp, s, 0, 0, {}, 0.0}; }
  static Directive release(Side s) { return {Kind::Release, s, 0, 0, {}, 0.0}; }
  static Directive join(std::size_t child, std::size_t parent, const Pose& nominal, double tolerance) {
    return {Kind::Join, Side::Both, child, parent, nominal, tolerance};
  }
  /// Releases act before the motion of their step, grasps and joins after it.
  bool before_motion() const { return kind == Kind::Release; }
};

struct GripperTargets {
  Pose left;
  Pose right;
};

struct StepResult {
  WorldState world;
  IkResult left;
  IkResult right;
};

inline Pose midpoint_frame(const Pose& a, const Pose& b) {
  return {0.5 * (a.position + b.position), nlerp(a.orientation, b.orientation, 0.5)};
}

namespace detail {

inline Pose parent_frame(const WorldState& w, const Attachment& a) {
  switch (a.parent) {
    case Parent::Left: return w.left_gripper;
    case Parent::Right: return w.right_gripper;
    case Parent::Both: return midpoint_frame(w.left_gripper, w.right_gripper);
    case Parent::Entity: return w.entities.at(a.parent_entity).pose;
  }
  throw ContractError("unknown attachment parent");
}

inline const Attachment* attachment_of(const WorldState& w, std::size_t entity) {
  for (const auto& a : w.attachments)
    if (a.entity == entity) return &a;
  return nullptr;
}

inline std::size_t root_of(const WorldState& w, std::size_t entity) {
  for (std::size_t guard = 0; guard <= w.entities.size(); ++guard) {
    const Attachment* a = attachment_of(w, entity);
    if (!a || a->parent != Parent::Entity) return entity;
    entity = a->parent_entity;
  }
  throw ContractError("attachment cycle");
}

inline void erase_attachment(WorldState& w, std::size_t entity) {
  std::erase_if(w.attachments, [&](const Attachment& a) { return a.entity == entity; });
}

}  // namespace detail

/// Recompute every attached entity pose from its parent, parents first.
inline void resolve_attachments(WorldState& w) {
  std::vector<int> state(w.entities.size(), 0);  // 0 pending, 1 visiting, 2 done
  std::function<void(std::size_t)> visit = [&](std::size_t e) {
    if (state[e] == 2) return;
    if (state[e] == 1) throw ContractError("attachment cycle");
    state[e] = 1;
    if (const Attachment* a = detail::attachment_of(w, e)) {
      if (a->parent == Parent::Entity) visit(a->parent_entity);
      w.entities[e].pose = compose(detail::parent_frame(w, *a), a->offset);
    }
    state[e] = 2;
  };
  for (std::size_t e = 0; e < w.entities.size(); ++e) visit(e);
}

/// Largest position or quaternion gap between an attached entity and its parent
/// frame composed with the stored offset.
inline double attachment_deviation(const WorldState& w) {
  double worst = 0.0;
  for (const auto& a : w.attachments) {
    const Pose expect = compose(detail::parent_frame(w, a), a.offset);
    const Pose& got = w.entities.at(a.entity).pose;
    worst = std::max({worst, (expect.position - got.position).norm(), component_gap(expect.orientation, got.orientation)});
  }
  return worst;
}

inline WorldState make_world(const Robot& robot, const Joints& left, const Joints& right, std::vector<Entity> entities) {
  WorldState w;
  w.left_joints = left;
  w.right_joints = right;
  w.left_gripper = forward_kinematics(robot.left, left);
  w.right_gripper = forward_kinematics(robot.right, right);
  w.entities = std::move(entities);
  return w;
}

namespace detail {

struct HandleHit {
  std::size_t entity;
  double distance;
};

inline std::optional<HandleHit> nearest_handle(const WorldState& w, const Vector3d& p, double tolerance) {
  std::optional<HandleHit> best;
  for (std::size_t e = 0; e < w.entities.size(); ++e) {
    for (const auto& h : w.entities[e].handles) {
      const double d = (compose(w.entities[e].pose, Pose{h, {}}).position - p).norm();
      if (d <= tolerance && (!best || d < best->distance)) best = HandleHit{e, d};
    }
  }
  return best;
}

inline void apply_release(WorldState& w, Side side) {
  std::vector<Attachment> kept;
  for (Attachment a : w.attachments) {
    if (a.parent == Parent::Entity) {
      kept.push_back(a);
    } else if (side == Side::Both) {
      continue;
    } else if (a.parent == Parent::Both) {
      const bool left_stays = side == Side::Right;
      a.parent = left_stays ? Parent::Left : Parent::Right;
      a.offset = relative(left_stays ? w.left_gripper : w.right_gripper, w.entities[a.entity].pose);
      kept.push_back(a);
    } else if ((a.parent == Parent::Left) != (side == Side::Left)) {
      kept.push_back(a);
    }
  }
  w.attachments = std::move(kept);
}

inline void apply_grasp(WorldState& w, Side side, double tolerance) {
  const auto miss = [&](const char* which, const Vector3d& p) {
    return GraspMissError(std::string(which) + " gripper at (" + std::to_string(p.x()) + ", " + std::to_string(p.y()) +
                          ", " + std::to_string(p.z()) + ") has no handle within " + std::to_string(tolerance) + " m");
  };
  if (side == Side::Both) {
    const auto l = nearest_handle(w, w.left_gripper.position, tolerance);
    if (!l) throw miss("left", w.left_gripper.position);
    const auto r = nearest_handle(w, w.right_gripper.position, tolerance);
    if (!r) throw miss("right", w.right_gripper.position);
    const std::size_t root = root_of(w, l->entity);
    if (root_of(w, r->entity) != root) throw GraspMissError("bimanual grasp on two unconnected entities");
    erase_attachment(w, root);
    w.attachments.push_back({root, Parent::Both, 0, relative(midpoint_frame(w.left_gripper, w.right_gripper), w.entities[root].pose)});
    return;
  }
  const Pose& g = side == Side::Left ? w.left_gripper : w.right_gripper;
  const auto hit = nearest_handle(w, g.position, tolerance);
  if (!hit) throw miss(side == Side::Left ? "left" : "right", g.position);
  const std::size_t root = root_of(w, hit->entity);
  erase_attachment(w, root);
  w.attachments.push_back({root, side == Side::Left ? Parent::Left : Parent::Right, 0, relative(g, w.entities[root].pose)});
}

inline void apply_join(WorldState& w, const Directive& d) {
  if (d.entity >= w.entities.size() || d.target >= w.entities.size() || d.entity == d.target)
    throw ContractError("join directive names an invalid entity pair");
  const Pose rel = relative(w.entities[d.target].pose, w.entities[d.entity].pose);
  const double gap = (rel.position - d.nominal.position).norm();
  if (gap > d.tolerance)
    throw GraspMissError("join of " + w.entities[d.entity].name + " to " + w.entities[d.target].name + " misaligned by " +
                         std::to_string(gap) + " m");
  erase_attachment(w, d.entity);
  w.attachments.push_back({d.entity, Parent::Entity, d.target, d.nominal});
}

}  // namespace detail

/// One control step: releases, IK toward both targets from the current
/// joints, attachment propagation, then grasps and joins.
inline StepResult step_world(const Robot& robot, const WorldState& world, const GripperTargets& targets,
                             std::span<const Directive> directives = {}) {
  StepResult out{world, {}, {}};
  WorldState& w = out.world;
  for (const auto& d : directives)
    if (d.before_motion()) detail::apply_release(w, d.side);

  out.left = ik_solve(robot.left, targets.left, w.left_joints, robot.ik);
  out.right = ik_solve(robot.right, targets.right, w.right_joints, robot.ik);
  w.left_joints = out.left.joints;
  w.right_joints = out.right.joints;
  w.left_gripper = forward_kinematics(robot.left, w.left_joints);
  w.right_gripper = forward_kinematics(robot.right, w.right_joints);
  resolve_attachments(w);

  for (const auto& d : directives) {
    if (d.before_motion()) continue;
    if (d.kind == Directive::Kind::Grasp) detail::apply_grasp(w, d.side, robot.grasp_tolerance);
    else detail::apply_join(w, d);
  }
  resolve_attachments(w);
  if (const double dev = attachment_deviation(w); dev > 1e-9)
    throw ContractError("attachment invariant violated by " + std::to_string(dev));
  return out;
}

/// Angle between an entity's up axis and world up.
inline double tilt(const Quat& q) {
  const double c = rotate(q, Vector3d::UnitZ()).z();
  return std::acos(std::clamp(c, -1.0, 1.0));
}

struct Platform {
  double center_x = 0.85;
  double center_y = 0.0;
  double size_x = 0.50;
  double size_y = 1.00;
  double height = 0.15;
};

struct TableLiftGoal {
  std::size_t table = 0;       // entity index
  double table_height = 0.30;  // ground to tabletop
  Platform platform;
  double height_tolerance = 0.03;
  double max_tilt = 10.0 * std::numbers::pi / 180.0;
};

struct PegInHoleGoal {
  std::size_t hole = 0;  // entity indices
  std::size_t peg = 1;
  Vector3d peg_offset = Vector3d::Zero();  // seated peg table in the hole table frame
  double alignment_tolerance = 0.015;
  double table_height = 0.30;
  double min_elevation = 0.05;  // table bottom above ground
  double evenness_tolerance = 0.02;
};

using SuccessGoal = std::variant<TableLiftGoal, PegInHoleGoal>;

inline bool success_check(const TableLiftGoal& g, const WorldState& w) {
  const Pose& t = w.entities.at(g.table).pose;
  const auto& p = g.platform;
  const bool inside = std::abs(t.position.x() - p.center_x) <= 0.5 * p.size_x &&
                      std::abs(t.position.y() - p.center_y) <= 0.5 * p.size_y;
  const bool height = std::abs(t.position.z() - (p.height + g.table_height)) <= g.height_tolerance;
  return inside && height && tilt(t.orientation) < g.max_tilt;
}

inline bool success_check(const PegInHoleGoal& g, const WorldState& w) {
  const Pose& hole = w.entities.at(g.hole).pose;
  const Pose& peg = w.entities.at(g.peg).pose;
  const Vector3d rel = relative(hole, peg).position - g.peg_offset;
  const bool aligned = std::hypot(rel.x(), rel.y()) <= g.alignment_tolerance;
  const bool raised = hole.position.z() - g.table_height > g.min_elevation && peg.position.z() - g.table_height > g.min_elevation;
  const bool even = std::abs(hole.position.z() - peg.position.z()) < g.evenness_tolerance;
  return aligned && raised && even;
}

inline bool success_check(const SuccessGoal& g, const WorldState& w) {
  return std::visit([&](const auto& goal) { return success_check(goal, w); }, g);
}

}  // namespace hdril::kin
