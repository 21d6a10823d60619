#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "hdril/demos.hpp"

using namespace hdril;
using namespace hdril::task;

namespace {

const Scene& scene() {
  static const Scene s = make_scene();
  return s;
}

kin::WorldState world_at_primitive(const TaskSpec& t, std::size_t k, const std::vector<std::array<double, 2>>& spawn) {
  kin::WorldState w = initial_world(t, scene(), spawn);
  for (std::size_t i = 0; i < k; ++i)
    for (const auto& wp : script_primitive(t, scene(), i, w)) w = kin::step_world(scene().robot, w, wp.targets, wp.directives).world;
  return w;
}

}  // namespace

TEST(Tasks, ShapesMatchDescriptions) {
  const TaskSpec lift = table_lift_task();
  EXPECT_EQ(lift.primitives.size(), 6u);
  EXPECT_EQ(lift.total_horizon(), 70u);
  EXPECT_EQ(lift.state_width(), 21u);
  const auto& s = lift.objects[0].spawn;
  EXPECT_NEAR(s.x_hi - s.x_lo, 0.20, 1e-12);
  EXPECT_NEAR(s.y_hi - s.y_lo, 0.60, 1e-12);
  EXPECT_EQ(lift.objects[0].size_x, 0.35);
  EXPECT_EQ(lift.objects[0].size_y, 0.85);

  const TaskSpec peg = peg_in_hole_task();
  EXPECT_EQ(peg.primitives.size(), 13u);
  EXPECT_EQ(peg.total_horizon(), 130u);
  for (const auto& o : peg.objects) {
    EXPECT_EQ(o.size_y, 0.425);
    EXPECT_NEAR(o.spawn.x_hi - o.spawn.x_lo, 0.20, 1e-12);
    EXPECT_NEAR(o.spawn.y_hi - o.spawn.y_lo, 0.20, 1e-12);
  }
  for (const auto& p : lift.primitives) {
    EXPECT_GE(p.horizon, 10u);
    EXPECT_LE(p.horizon, 12u);
  }
}

TEST(Tasks, EachPrimitiveEmitsItsHorizon) {
  for (auto kind : {TaskKind::TableLift, TaskKind::PegInHole}) {
    const TaskSpec t = make_task(kind);
    Rng rng(3);
    const auto spawn = sample_spawn(t, rng);
    kin::WorldState w = initial_world(t, scene(), spawn);
    for (std::size_t k = 0; k < t.primitives.size(); ++k) {
      const auto wps = script_primitive(t, scene(), k, w);
      EXPECT_EQ(wps.size(), t.primitives[k].horizon);
      for (const auto& wp : wps) w = kin::step_world(scene().robot, w, wp.targets, wp.directives).world;
    }
  }
}

TEST(Tasks, LiftRaisesGrippersWithoutLateralMotion) {
  const TaskSpec t = table_lift_task();
  const kin::WorldState w = world_at_primitive(t, 2, {{0.62, 0.1}});
  const auto wps = script_primitive(t, scene(), 2, w);
  const auto& last = wps.back().targets;
  const Vector3d dl = last.left.position - w.left_gripper.position;
  const Vector3d dr = last.right.position - w.right_gripper.position;
  EXPECT_NEAR(dl.z(), 0.25, 1e-12);
  EXPECT_NEAR(dr.z(), 0.25, 1e-12);
  EXPECT_EQ(dl.x(), 0.0);
  EXPECT_EQ(dl.y(), 0.0);
  EXPECT_EQ(dr.x(), 0.0);
  EXPECT_EQ(dr.y(), 0.0);
  for (const auto& wp : wps) {
    EXPECT_EQ(wp.targets.left.position.x(), w.left_gripper.position.x());
    EXPECT_EQ(wp.targets.right.position.y(), w.right_gripper.position.y());
  }
}

TEST(Tasks, FrontGraspEndsOnHandles) {
  const TaskSpec t = table_lift_task();
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto spawn = sample_spawn(t, rng);
    kin::WorldState w = initial_world(t, scene(), spawn);
    const Vector3d c(spawn[0][0], spawn[0][1], t.table_height);
    const Vector3d hl = c + t.objects[0].handles[0], hr = c + t.objects[0].handles[1];
    const auto wps = script_primitive(t, scene(), 0, w);
    EXPECT_LT((wps.back().targets.left.position - hl).norm(), 1e-12);
    EXPECT_LT((wps.back().targets.right.position - hr).norm(), 1e-12);
    for (const auto& wp : wps) w = kin::step_world(scene().robot, w, wp.targets, wp.directives).world;
    EXPECT_LT((w.left_gripper.position - hl).norm(), scene().robot.grasp_tolerance);
    EXPECT_LT((w.right_gripper.position - hr).norm(), scene().robot.grasp_tolerance);
    ASSERT_EQ(w.attachments.size(), 1u);
    EXPECT_EQ(w.attachments[0].parent, kin::Parent::Both);
  }
}

TEST(Tasks, GoalOutsideWorkspaceThrows) {
  const TaskSpec t = table_lift_task();
  const kin::WorldState w = initial_world(t, scene(), {{1.6, 0.0}});
  EXPECT_THROW(script_primitive(t, scene(), 0, w), WorkspaceError);
}

TEST(Demos, LengthsLabelsAndSuccess) {
  for (auto kind : {TaskKind::TableLift, TaskKind::PegInHole}) {
    const TaskSpec t = make_task(kind);
    GenerationStats stats;
    const Dataset ds = generate_dataset(t, scene(), 40, 17, &stats);
    ASSERT_EQ(ds.demos.size(), 40u);
    for (std::size_t i = 0; i < ds.demos.size(); ++i) {
      const auto& d = ds.demos[i];
      EXPECT_EQ(d.id, i);
      EXPECT_TRUE(d.success);
      ASSERT_EQ(d.states.size(), t.total_horizon());
      std::size_t step = 0;
      for (std::size_t k = 0; k < t.primitives.size(); ++k)
        for (std::size_t s = 0; s < t.primitives[k].horizon; ++s) EXPECT_EQ(d.labels[step++], static_cast<int>(k + 1));
      for (const auto& s : d.states) EXPECT_EQ(s.size(), t.state_width());
    }
    EXPECT_EQ(stats.rejected, 0u);
  }
}

TEST(Demos, SameSeedSameDataset) {
  const TaskSpec t = peg_in_hole_task();
  const Dataset a = generate_dataset(t, scene(), 5, 99);
  const Dataset b = generate_dataset(t, scene(), 5, 99);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a.demos[i].initial, b.demos[i].initial);
    EXPECT_EQ(a.demos[i].states, b.demos[i].states);
  }
  const Dataset c = generate_dataset(t, scene(), 5, 100);
  EXPECT_NE(a.demos[0].initial, c.demos[0].initial);
}

TEST(Demos, GripperDisplacementBoundedPerStep) {
  for (auto kind : {TaskKind::TableLift, TaskKind::PegInHole}) {
    const TaskSpec t = make_task(kind);
    const Dataset ds = generate_dataset(t, scene(), 30, 5);
    for (const auto& d : ds.demos) {
      const StateVector* prev = &d.initial;
      for (const auto& s : d.states) {
        for (std::size_t g = 0; g < 2; ++g) EXPECT_LE((pose_at(s, g).position - pose_at(*prev, g).position).norm(), t.max_step_displacement);
        prev = &s;
      }
    }
  }
}

TEST(Demos, RepeatedFailureRaisesGenerationError) {
  TaskSpec t = table_lift_task();
  t.objects[0].spawn = {1.5, 1.6, 0.0, 0.1};  // out of reach
  EXPECT_THROW(generate_dataset(t, scene(), 1, 1), GenerationError);
}

TEST(Demos, SpawnsAreUniformOverTheRectangle) {
  const TaskSpec t = table_lift_task();
  const std::size_t n = 2000;
  const Dataset ds = generate_dataset(t, scene(), n, 2024);
  const auto& r = t.objects[0].spawn;
  std::array<double, 16> counts{};
  for (const auto& d : ds.demos) {
    const auto ix = static_cast<std::size_t>(4 * (d.spawn[0][0] - r.x_lo) / (r.x_hi - r.x_lo));
    const auto iy = static_cast<std::size_t>(4 * (d.spawn[0][1] - r.y_lo) / (r.y_hi - r.y_lo));
    ++counts[std::min<std::size_t>(ix, 3) * 4 + std::min<std::size_t>(iy, 3)];
  }
  const double expect = static_cast<double>(n) / 16.0;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expect) * (c - expect) / expect;
  EXPECT_LT(chi2, 30.578);  // chi-square, 15 degrees of freedom, alpha = 0.01
}

TEST(DatasetIO, RoundTripAndLayout) {
  const TaskSpec t = table_lift_task();
  const Dataset ds = generate_dataset(t, scene(), 3, 8);
  std::stringstream ss;
  save_dataset(ss, ds);
  const std::string text = ss.str();
  std::string header = text.substr(0, text.find('\n'));
  EXPECT_EQ(std::count(header.begin(), header.end(), ',') + 1, 24);
  EXPECT_EQ(header.substr(0, 45), "demo_id,t,primitive_id,left_gripper_x,left_gr");
  const Dataset back = load_dataset(ss, t);
  ASSERT_EQ(back.demos.size(), ds.demos.size());
  for (std::size_t i = 0; i < ds.demos.size(); ++i) {
    EXPECT_EQ(back.demos[i].labels, ds.demos[i].labels);
    for (std::size_t k = 0; k < ds.demos[i].initial.size(); ++k) EXPECT_NEAR(back.demos[i].initial[k], ds.demos[i].initial[k], 1e-9);
    for (std::size_t s = 0; s < ds.demos[i].states.size(); ++s)
      for (std::size_t k = 0; k < ds.demos[i].states[s].size(); ++k) EXPECT_NEAR(back.demos[i].states[s][k], ds.demos[i].states[s][k], 1e-9);
  }
  std::stringstream again;
  save_dataset(again, back);
  EXPECT_EQ(again.str(), text);
}

TEST(DatasetIO, HeaderMismatchAndBadRows) {
  const TaskSpec lift = table_lift_task();
  const Dataset ds = generate_dataset(lift, scene(), 1, 8);
  std::stringstream ss;
  save_dataset(ss, ds);
  std::stringstream wrong_task(ss.str());
  EXPECT_THROW(load_dataset(wrong_task, peg_in_hole_task()), ParseError);

  std::string text = ss.str();
  const auto third = text.find('\n', text.find('\n', text.find('\n') + 1) + 1);
  std::string broken = text.substr(0, third + 1) + "0,2,1,abc" + text.substr(text.find('\n', third + 1));
  std::stringstream bad(broken);
  try {
    load_dataset(bad, lift);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 4u);
  }
}

TEST(Relational, GrippersAntisymmetricAndRoundTrip) {
  const TaskSpec t = peg_in_hole_task();
  const Dataset ds = generate_dataset(t, scene(), 3, 12);
  const Dataset rel = to_relational_coordinates(ds);
  EXPECT_EQ(rel.entities.front(), "anchor");
  for (const auto& d : rel.demos) {
    for (const auto& s : d.states) {
      ASSERT_EQ(s.size(), t.state_width() + 7);
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(s[7 + k], -s[14 + k], 1e-15);
    }
  }
  const Dataset back = from_relational_coordinates(rel);
  double worst = 0.0;
  for (std::size_t i = 0; i < ds.demos.size(); ++i)
    for (std::size_t s = 0; s < ds.demos[i].states.size(); ++s)
      for (std::size_t k = 0; k < t.state_width(); ++k)
        worst = std::max(worst, std::abs(back.demos[i].states[s][k] - ds.demos[i].states[s][k]));
  // a - m + m is exact up to one rounding of the addition.
  EXPECT_LE(worst, 4.5e-16);
}

TEST(Relational, InvariantUnderGlobalTranslation) {
  const TaskSpec t = table_lift_task();
  const Dataset ds = generate_dataset(t, scene(), 2, 3);
  const Vector3d shift(0.3, -0.7, 0.2);
  for (const auto& d : ds.demos) {
    for (const auto& s : d.states) {
      StateVector moved = s;
      for (std::size_t e = 0; e < s.size() / 7; ++e)
        for (int k = 0; k < 3; ++k) moved[7 * e + static_cast<std::size_t>(k)] += shift[k];
      const StateVector a = to_relational(s), b = to_relational(moved);
      for (std::size_t k = 7; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
    }
  }
}
