#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "hdril/errors.hpp"
#include "hdril/world.hpp"

namespace hdril::task {

using kin::Directive;
using kin::Pose;
using kin::Quat;
using kin::Side;
using kin::Vector3d;

enum class TaskKind { TableLift, PegInHole };

inline std::string to_string(TaskKind k) { return k == TaskKind::TableLift ? "table-lift" : "peg-in-hole"; }

inline TaskKind parse_task(std::string_view s) {
  if (s == "table-lift") return TaskKind::TableLift;
  if (s == "peg-in-hole") return TaskKind::PegInHole;
  throw LookupError("unknown task '" + std::string(s) + "'");
}

/// Where the grippers go in a primitive, described relative to the world at
/// its first step.
enum class Motion {
  ToHandles,      // both grippers onto the handles of `object`
  AboveHandle,    // `side` gripper hovers `offset.z` over its handle of `object`
  ToHandle,       // `side` gripper onto its handle of `object`
  MoveObject,     // carry `object` so its centre lands on `goal` (+ offset)
  Shift,          // grippers (and whatever they hold) move by `offset`
  Place,          // carry `object` down onto the platform at `goal` xy
  Retract,        // grippers move by `offset` and turn back to rest orientation
};

struct PrimitiveSpec {
  std::string name;
  std::size_t horizon = 10;
  Motion motion = Motion::Shift;
  Side side = Side::Both;
  std::size_t object = 0;
  Vector3d goal = Vector3d::Zero();
  Vector3d offset = Vector3d::Zero();
  std::vector<Directive> start;  // issued with the first step
  std::vector<Directive> end;    // issued with the last step
  std::size_t partner = 0;       // ToHandles: object under the right gripper
};

struct SpawnRect {
  double x_lo, x_hi, y_lo, y_hi;
};

struct ObjectSpec {
  std::string name;
  double size_x = 0.35;
  double size_y = 0.85;
  SpawnRect spawn{};
  std::vector<Vector3d> handles;  // [left, right] in the object frame
};

struct TaskSpec {
  TaskKind kind = TaskKind::TableLift;
  std::vector<ObjectSpec> objects;
  std::vector<PrimitiveSpec> primitives;
  double table_height = 0.30;  // ground to tabletop; object poses are tabletop centres
  kin::Platform platform;
  kin::SuccessGoal goal;
  double max_step_displacement = 0.10;  // meters per step for either gripper
  std::vector<std::size_t> residual_objects;  // object indices fed through the skip connection

  std::size_t entity_count() const { return 2 + objects.size(); }
  std::size_t state_width() const { return 7 * entity_count(); }
  std::size_t total_horizon() const {
    std::size_t t = 0;
    for (const auto& p : primitives) t += p.horizon;
    return t;
  }
  std::vector<std::string> entity_names() const {
    std::vector<std::string> n = {"left_gripper", "right_gripper"};
    for (const auto& o : objects) n.push_back(o.name);
    return n;
  }
  /// Primitive index (0-based) active at executed step t (0-based).
  std::size_t primitive_at(std::size_t t) const {
    for (std::size_t k = 0; k < primitives.size(); ++k) {
      if (t < primitives[k].horizon) return k;
      t -= primitives[k].horizon;
    }
    throw IndexError("step beyond the task horizon");
  }
};

struct TaskParams {
  double lift_height = 0.25;
  double extend_distance = 0.20;
  double hover_height = 0.10;
  double carry_clearance = 0.02;
  double retract_back = 0.10;
  double retract_up = 0.10;
  double stage_x = 0.65;
  double insert_gap = 0.06;
  double join_tolerance = 0.01;
  std::vector<std::size_t> lift_horizons = {12, 12, 12, 12, 12, 10};
  std::size_t peg_horizon = 10;
};

inline TaskSpec table_lift_task(const TaskParams& p = {}) {
  if (p.lift_horizons.size() != 6) throw ContractError("table-lift needs 6 primitive horizons");
  TaskSpec t;
  t.kind = TaskKind::TableLift;
  t.objects = {{"table", 0.35, 0.85, {0.55, 0.75, -0.30, 0.30}, {Vector3d(-0.175, 0.40, -0.05), Vector3d(-0.175, -0.40, -0.05)}}};
  const auto& h = p.lift_horizons;
  const Vector3d stage(p.stage_x, 0.0, 0.0);
  const Vector3d o = Vector3d::Zero();
  t.primitives = {
      {"front-grasp", h[0], Motion::ToHandles, Side::Both, 0, o, o, {}, {Directive::grasp(Side::Both)}},
      {"move", h[1], Motion::MoveObject, Side::Both, 0, stage, Vector3d(0, 0, p.carry_clearance), {}, {}},
      {"lift", h[2], Motion::Shift, Side::Both, 0, o, Vector3d(0, 0, p.lift_height), {}, {}},
      {"extend", h[3], Motion::Shift, Side::Both, 0, o, Vector3d(p.extend_distance, 0, 0), {}, {}},
      {"place", h[4], Motion::Place, Side::Both, 0, Vector3d(t.platform.center_x, t.platform.center_y, 0), o, {}, {}},
      {"retract", h[5], Motion::Retract, Side::Both, 0, o, Vector3d(-p.retract_back, 0, p.retract_up), {Directive::release(Side::Both)}, {}},
  };
  kin::TableLiftGoal g;
  g.table = 0;
  g.table_height = t.table_height;
  g.platform = t.platform;
  t.goal = g;
  t.residual_objects = {0};
  return t;
}

inline TaskSpec peg_in_hole_task(const TaskParams& p = {}) {
  TaskSpec t;
  t.kind = TaskKind::PegInHole;
  const double half = 0.425 / 2;
  t.objects = {
      {"left_table", 0.35, 0.425, {0.55, 0.75, 0.30, 0.50}, {Vector3d(-0.175, 0.1875, -0.05), Vector3d(-0.175, -0.1875, -0.05)}},
      {"right_table", 0.35, 0.425, {0.55, 0.75, -0.50, -0.30}, {Vector3d(-0.175, 0.1875, -0.05), Vector3d(-0.175, -0.1875, -0.05)}},
  };
  const Vector3d hole_at(p.stage_x, half, 0), peg_at(p.stage_x, -half, 0);
  const Pose seated{Vector3d(0, -2 * half, 0), {}};
  const std::size_t n = p.peg_horizon;
  const Vector3d up(0, 0, p.hover_height);
  const Vector3d o = Vector3d::Zero();
  t.primitives = {
      {"approach-left", n, Motion::AboveHandle, Side::Left, 0, o, up, {}, {}},
      {"grasp-left", n, Motion::ToHandle, Side::Left, 0, o, o, {}, {Directive::grasp(Side::Left)}},
      {"move-left", n, Motion::MoveObject, Side::Left, 0, hole_at, Vector3d(0, 0, p.carry_clearance), {}, {}},
      {"place-left", n, Motion::MoveObject, Side::Left, 0, hole_at, o, {}, {}},
      {"release-left", n, Motion::Shift, Side::Left, 0, o, up, {Directive::release(Side::Left)}, {}},
      {"approach-right", n, Motion::AboveHandle, Side::Right, 1, o, up, {}, {}},
      {"grasp-right", n, Motion::ToHandle, Side::Right, 1, o, o, {}, {Directive::grasp(Side::Right)}},
      {"move-right", n, Motion::MoveObject, Side::Right, 1, peg_at, Vector3d(0, -p.insert_gap, p.carry_clearance), {}, {}},
      {"insert-right", n, Motion::MoveObject, Side::Right, 1, peg_at, o, {}, {Directive::join(1, 0, seated, p.join_tolerance)}},
      {"regrasp-both", n, Motion::ToHandles, Side::Both, 0, o, o, {Directive::release(Side::Right)}, {Directive::grasp(Side::Both)}},
      {"lift", n, Motion::Shift, Side::Both, 0, o, Vector3d(0, 0, p.lift_height), {}, {}},
      {"extend", n, Motion::Shift, Side::Both, 0, o, Vector3d(p.extend_distance, 0, 0), {}, {}},
      {"place", n, Motion::Place, Side::Both, 0, Vector3d(t.platform.center_x, t.platform.center_y + half, 0), o, {}, {}},
  };
  t.primitives[9].partner = 1;
  kin::PegInHoleGoal g;
  g.hole = 0;
  g.peg = 1;
  g.peg_offset = seated.position;
  g.table_height = t.table_height;
  t.goal = g;
  t.residual_objects = {0, 1};
  return t;
}

inline TaskSpec make_task(TaskKind k, const TaskParams& p = {}) {
  return k == TaskKind::TableLift ? table_lift_task(p) : peg_in_hole_task(p);
}

/// Directives carried by step `step` of primitive `prim`.
inline std::vector<Directive> directives_at(const PrimitiveSpec& prim, std::size_t step) {
  std::vector<Directive> out;
  if (step == 0) out.insert(out.end(), prim.start.begin(), prim.start.end());
  if (step + 1 == prim.horizon) out.insert(out.end(), prim.end.begin(), prim.end.end());
  return out;
}

struct RobotConfig {
  kin::ArmGeometry geometry;
  double base_x = 0.0;
  double base_y = 0.25;  // mirrored for the right arm
  double base_z = 0.35;
  Vector3d rest{0.30, 0.45, 0.55};  // left gripper, mirrored for the right
  double rest_pitch = 135.0;        // degrees about world y; 90 points forward, 180 straight down
  kin::IkOptions ik;
  double grasp_tolerance = 0.03;
};

struct Scene {
  kin::Robot robot;
  kin::Joints rest_left{};
  kin::Joints rest_right{};
  Quat rest_orientation;
};

inline Quat pitch(double degrees) { return kin::from_axis_angle(Vector3d::UnitY(), degrees * std::numbers::pi / 180.0); }

/// Tool pointing straight down.
inline Quat grasp_orientation() { return pitch(180.0); }

inline Scene make_scene(const RobotConfig& c = {}) {
  Scene s;
  const Quat forward = pitch(90.0);
  s.robot.left = kin::make_arm("left", {Vector3d(c.base_x, c.base_y, c.base_z), forward}, c.geometry);
  s.robot.right = kin::make_arm("right", {Vector3d(c.base_x, -c.base_y, c.base_z), forward}, c.geometry);
  s.robot.ik = c.ik;
  s.robot.grasp_tolerance = c.grasp_tolerance;
  s.rest_orientation = pitch(c.rest_pitch);
  const kin::Joints seed = {0.0, 0.6, 0.0, 1.2, 0.0, 0.6, 0.0};
  kin::IkOptions settle = c.ik;
  settle.max_iterations = 1000;
  settle.position_tolerance = 1e-9;
  settle.orientation_tolerance = 1e-9;
  const auto l = kin::ik_solve(s.robot.left, {c.rest, s.rest_orientation}, seed, settle);
  const auto r = kin::ik_solve(s.robot.right, {Vector3d(c.rest.x(), -c.rest.y(), c.rest.z()), s.rest_orientation}, seed, settle);
  if (l.position_residual > 1e-6 || r.position_residual > 1e-6 || l.orientation_residual > 1e-6 || r.orientation_residual > 1e-6)
    throw WorkspaceError("rest pose is not reachable by both arms");
  s.rest_left = l.joints;
  s.rest_right = r.joints;
  return s;
}

inline kin::WorldState initial_world(const TaskSpec& task, const Scene& scene, const std::vector<std::array<double, 2>>& spawn) {
  if (spawn.size() != task.objects.size()) throw DimensionError("one spawn position per object expected");
  std::vector<kin::Entity> entities;
  for (std::size_t i = 0; i < task.objects.size(); ++i) {
    entities.push_back({task.objects[i].name, {Vector3d(spawn[i][0], spawn[i][1], task.table_height), {}}, task.objects[i].handles});
  }
  return kin::make_world(scene.robot, scene.rest_left, scene.rest_right, std::move(entities));
}

struct Waypoint {
  kin::GripperTargets targets;
  std::vector<Directive> directives;
};

namespace detail {

inline Vector3d handle_world(const kin::WorldState& w, std::size_t object, std::size_t which) {
  const auto& e = w.entities.at(object);
  return kin::compose(e.pose, Pose{e.handles.at(which), {}}).position;
}

inline void check_workspace(const kin::ArmModel& arm, const Pose& goal, const std::string& primitive) {
  const double d = (goal.position - arm.shoulder()).norm();
  if (d > arm.reach() || goal.position.z() < 0.0)
    throw WorkspaceError(primitive + ": " + arm.name + " goal (" + std::to_string(goal.position.x()) + ", " + std::to_string(goal.position.y()) +
                         ", " + std::to_string(goal.position.z()) + ") lies outside the workspace");
}

/// Cubic ease-in-out on [0, 1].
inline double ease(double s) { return s * s * (3.0 - 2.0 * s); }

}  // namespace detail

/// Gripper goals at the end of primitive `index`, given the world at its start.
inline kin::GripperTargets primitive_goal(const TaskSpec& task, const Scene& scene, std::size_t index, const kin::WorldState& w) {
  const PrimitiveSpec& p = task.primitives.at(index);
  kin::GripperTargets g{w.left_gripper, w.right_gripper};
  const Quat down = grasp_orientation();
  const auto carry = [&](const Vector3d& delta) {
    g.left = kin::translate(g.left, delta);
    g.right = kin::translate(g.right, delta);
  };
  const auto carry_one = [&](const Vector3d& delta) {
    Pose& moving = p.side == Side::Left ? g.left : g.right;
    moving = kin::translate(moving, delta);
  };
  const Vector3d object_at = p.object < task.objects.size() ? w.entities.at(p.object).pose.position : Vector3d::Zero();

  switch (p.motion) {
    case Motion::ToHandles:
      g.left = {detail::handle_world(w, p.object, 0), down};
      g.right = {detail::handle_world(w, p.partner, 1), down};
      break;
    case Motion::AboveHandle:
    case Motion::ToHandle: {
      const Vector3d lift = p.motion == Motion::AboveHandle ? p.offset : Vector3d::Zero();
      Pose& moving = p.side == Side::Left ? g.left : g.right;
      moving = {detail::handle_world(w, p.object, p.side == Side::Left ? 0 : 1) + lift, down};
      break;
    }
    case Motion::MoveObject: {
      const Vector3d target(p.goal.x(), p.goal.y(), task.table_height);
      const Vector3d delta = target + p.offset - object_at;
      if (p.side == Side::Both) carry(delta);
      else carry_one(delta);
      break;
    }
    case Motion::Shift:
      if (p.side == Side::Both) carry(p.offset);
      else carry_one(p.offset);
      break;
    case Motion::Place: {
      const Vector3d target(p.goal.x(), p.goal.y(), task.platform.height + task.table_height);
      carry(target - object_at);
      break;
    }
    case Motion::Retract:
      carry(p.offset);
      g.left.orientation = scene.rest_orientation;
      g.right.orientation = scene.rest_orientation;
      break;
  }
  detail::check_workspace(scene.robot.left, g.left, p.name);
  detail::check_workspace(scene.robot.right, g.right, p.name);
  return g;
}

/// Eased gripper targets for every step of primitive `index`, starting from
/// the grippers in `w`, plus the directives of each step.
inline std::vector<Waypoint> script_primitive(const TaskSpec& task, const Scene& scene, std::size_t index, const kin::WorldState& w) {
  const PrimitiveSpec& p = task.primitives.at(index);
  const kin::GripperTargets goal = primitive_goal(task, scene, index, w);
  std::vector<Waypoint> out;
  out.reserve(p.horizon);
  for (std::size_t k = 1; k <= p.horizon; ++k) {
    const double s = detail::ease(static_cast<double>(k) / static_cast<double>(p.horizon));
    const auto blend = [&](const Pose& a, const Pose& b) {
      return Pose{a.position + s * (b.position - a.position), kin::slerp(a.orientation, b.orientation, s)};
    };
    out.push_back({{blend(w.left_gripper, goal.left), blend(w.right_gripper, goal.right)}, directives_at(p, k - 1)});
  }
  return out;
}

}  // namespace hdril::task
