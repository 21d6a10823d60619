#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hdril/errors.hpp"
#include "hdril/rng.hpp"
#include "hdril/task.hpp"

namespace hdril::task {

/// [left gripper, right gripper, objects...] x (x, y, z, qw, qx, qy, qz)
using StateVector = std::vector<double>;

inline constexpr std::array<const char*, 7> kPoseFields = {"x", "y", "z", "qw", "qx", "qy", "qz"};

inline void put_pose(StateVector& s, std::size_t slot, const Pose& p, const StateVector* previous) {
  Quat q = p.orientation;
  // Keep quaternion signs continuous in time so sequences stay smooth.
  if (previous) {
    const double* r = previous->data() + 7 * slot + 3;
    if (q.w * r[0] + q.x * r[1] + q.y * r[2] + q.z * r[3] < 0) q = {-q.w, -q.x, -q.y, -q.z};
  } else if (q.w < 0) {
    q = {-q.w, -q.x, -q.y, -q.z};
  }
  double* d = s.data() + 7 * slot;
  d[0] = p.position.x(), d[1] = p.position.y(), d[2] = p.position.z();
  d[3] = q.w, d[4] = q.x, d[5] = q.y, d[6] = q.z;
}

inline Pose pose_at(const StateVector& s, std::size_t slot) {
  if (7 * slot + 7 > s.size()) throw IndexError("state has no entity slot " + std::to_string(slot));
  const double* d = s.data() + 7 * slot;
  return {Vector3d(d[0], d[1], d[2]), {d[3], d[4], d[5], d[6]}};
}

inline StateVector state_vector(const kin::WorldState& w, const StateVector* previous = nullptr) {
  StateVector s(7 * (2 + w.entities.size()));
  put_pose(s, 0, w.left_gripper, previous);
  put_pose(s, 1, w.right_gripper, previous);
  for (std::size_t i = 0; i < w.entities.size(); ++i) put_pose(s, 2 + i, w.entities[i].pose, previous);
  return s;
}

struct Demonstration {
  std::size_t id = 0;
  StateVector initial;
  std::vector<StateVector> states;  // executed states, one per step
  std::vector<int> labels;          // 1-based primitive id per step
  std::vector<std::array<double, 2>> spawn;
  bool success = false;
  std::string failure;  // why it failed, if it did
};

struct Dataset {
  TaskKind task = TaskKind::TableLift;
  std::vector<std::string> entities;
  std::vector<Demonstration> demos;
};

/// Execute every scripted primitive through the kinematic world.
inline Demonstration run_demonstration(const TaskSpec& task, const Scene& scene, const std::vector<std::array<double, 2>>& spawn) {
  Demonstration d;
  d.spawn = spawn;
  kin::WorldState w = initial_world(task, scene, spawn);
  d.initial = state_vector(w);
  const StateVector* prev = &d.initial;
  try {
    for (std::size_t k = 0; k < task.primitives.size(); ++k) {
      for (const Waypoint& wp : script_primitive(task, scene, k, w)) {
        w = kin::step_world(scene.robot, w, wp.targets, wp.directives).world;
        d.states.push_back(state_vector(w, prev));
        d.labels.push_back(static_cast<int>(k + 1));
        prev = &d.states.back();
      }
    }
    d.success = kin::success_check(task.goal, w);
    if (!d.success) d.failure = "terminal state fails the success check";
  } catch (const GraspMissError& e) {
    d.failure = e.what();
  } catch (const WorkspaceError& e) {
    d.failure = e.what();
  }
  return d;
}

inline std::vector<std::array<double, 2>> sample_spawn(const TaskSpec& task, Rng& rng) {
  std::vector<std::array<double, 2>> out;
  for (const auto& o : task.objects) out.push_back({uniform(rng, o.spawn.x_lo, o.spawn.x_hi), uniform(rng, o.spawn.y_lo, o.spawn.y_hi)});
  return out;
}

struct GenerationStats {
  std::size_t attempts = 0;
  std::size_t rejected = 0;
};

/// n successful demonstrations. Slot i draws its spawn from a seed derived
/// from (seed, i, attempt); failed attempts are discarded and redrawn.
inline Dataset generate_dataset(const TaskSpec& task, const Scene& scene, std::size_t n, std::uint64_t seed,
                                GenerationStats* stats = nullptr, std::size_t max_retries = 10) {
  if (n == 0) throw ContractError("generate_dataset needs n >= 1");
  Dataset ds{task.kind, task.entity_names(), {}};
  ds.demos.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt > max_retries)
        throw GenerationError("demonstration slot " + std::to_string(i) + " failed " + std::to_string(attempt) + " times");
      Rng rng(derive_seed(seed, {i, attempt}));
      Demonstration d = run_demonstration(task, scene, sample_spawn(task, rng));
      if (stats) ++stats->attempts;
      if (d.success) {
        d.id = i;
        ds.demos.push_back(std::move(d));
        break;
      }
      if (stats) ++stats->rejected;
    }
  }
  return ds;
}

// ---- CSV ----

inline std::vector<std::string> csv_header(const std::vector<std::string>& entities) {
  std::vector<std::string> h = {"demo_id", "t", "primitive_id"};
  for (const auto& e : entities)
    for (const char* f : kPoseFields) h.push_back(e + "_" + f);
  return h;
}

inline std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void write_csv_row(std::ostream& os, std::size_t demo, std::size_t t, int label, const StateVector& s) {
  os << demo << ',' << t << ',' << label;
  for (double v : s) os << ',' << format_value(v);
  os << '\n';
}

/// One row per state; t = 0 holds the initial state with primitive_id 0.
inline void save_dataset(std::ostream& os, const Dataset& ds) {
  const auto h = csv_header(ds.entities);
  for (std::size_t i = 0; i < h.size(); ++i) os << (i ? "," : "") << h[i];
  os << '\n';
  for (const auto& d : ds.demos) {
    write_csv_row(os, d.id, 0, 0, d.initial);
    for (std::size_t t = 0; t < d.states.size(); ++t) write_csv_row(os, d.id, t + 1, d.labels[t], d.states[t]);
  }
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  save_dataset(f, ds);
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) throw ParseError("bad number '" + s + "'", line);
  return v;
}

inline long long parse_int(const std::string& s, std::size_t line) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) throw ParseError("bad integer '" + s + "'", line);
  return v;
}

}  // namespace detail

/// Reads a dataset written by save_dataset. The header must match `task`.
inline Dataset load_dataset(std::istream& is, const TaskSpec& task) {
  Dataset ds{task.kind, task.entity_names(), {}};
  const auto expect = csv_header(ds.entities);
  std::string line;
  std::size_t no = 1;
  if (!std::getline(is, line)) throw ParseError("empty file", no);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (detail::split_csv(line) != expect) throw ParseError("header does not match the " + to_string(task.kind) + " layout", no);

  const std::size_t width = task.state_width();
  while (std::getline(is, line)) {
    ++no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != 3 + width)
      throw ParseError("expected " + std::to_string(3 + width) + " columns, found " + std::to_string(cells.size()), no);
    const long long id = detail::parse_int(cells[0], no);
    const long long t = detail::parse_int(cells[1], no);
    const long long label = detail::parse_int(cells[2], no);
    if (id < 0 || t < 0 || label < 0 || label > static_cast<long long>(task.primitives.size()))
      throw ParseError("demo_id, t or primitive_id out of range", no);
    StateVector s(width);
    for (std::size_t k = 0; k < width; ++k) s[k] = detail::parse_double(cells[3 + k], no);

    if (t == 0) {
      if (label != 0) throw ParseError("initial row must carry primitive_id 0", no);
      Demonstration d;
      d.id = static_cast<std::size_t>(id);
      d.initial = std::move(s);
      d.success = true;
      for (std::size_t o = 0; o < task.objects.size(); ++o) d.spawn.push_back({d.initial[7 * (2 + o)], d.initial[7 * (2 + o) + 1]});
      ds.demos.push_back(std::move(d));
      continue;
    }
    if (ds.demos.empty() || ds.demos.back().id != static_cast<std::size_t>(id) ||
        static_cast<std::size_t>(t) != ds.demos.back().states.size() + 1)
      throw ParseError("rows out of order for demo " + std::to_string(id), no);
    if (label == 0) throw ParseError("executed rows need a primitive_id >= 1", no);
    ds.demos.back().states.push_back(std::move(s));
    ds.demos.back().labels.push_back(static_cast<int>(label));
  }
  for (const auto& d : ds.demos)
    if (d.states.size() != task.total_horizon())
      throw ParseError("demo " + std::to_string(d.id) + " has " + std::to_string(d.states.size()) + " steps, expected " +
                           std::to_string(task.total_horizon()),
                       no);
  return ds;
}

inline Dataset load_dataset(const std::string& path, const TaskSpec& task) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingFileError("cannot read " + path);
  return load_dataset(f, task);
}

// ---- relational coordinates ----

/// Absolute state -> [anchor, entities...] where the anchor slot carries the
/// mean gripper position (identity orientation) and every entity position is
/// taken relative to it. Quaternions are untouched.
inline StateVector to_relational(const StateVector& s) {
  if (s.size() < 14 || s.size() % 7 != 0) throw DimensionError("state width must be a multiple of 7 with two grippers");
  StateVector out(s.size() + 7);
  const double m[3] = {0.5 * (s[0] + s[7]), 0.5 * (s[1] + s[8]), 0.5 * (s[2] + s[9])};
  out[0] = m[0], out[1] = m[1], out[2] = m[2], out[3] = 1.0;
  for (std::size_t e = 0; e < s.size() / 7; ++e) {
    const double* src = s.data() + 7 * e;
    double* dst = out.data() + 7 * (e + 1);
    for (int k = 0; k < 3; ++k) dst[k] = src[k] - m[k];
    for (int k = 3; k < 7; ++k) dst[k] = src[k];
  }
  return out;
}

inline StateVector from_relational(const StateVector& r) {
  if (r.size() < 21 || r.size() % 7 != 0) throw DimensionError("relational width must be a multiple of 7 with an anchor");
  StateVector out(r.size() - 7);
  for (std::size_t e = 0; e < out.size() / 7; ++e) {
    const double* src = r.data() + 7 * (e + 1);
    double* dst = out.data() + 7 * e;
    for (int k = 0; k < 3; ++k) dst[k] = src[k] + r[static_cast<std::size_t>(k)];
    for (int k = 3; k < 7; ++k) dst[k] = src[k];
  }
  return out;
}

inline Dataset to_relational_coordinates(const Dataset& ds) {
  Dataset out = ds;
  out.entities.insert(out.entities.begin(), "anchor");
  for (auto& d : out.demos) {
    d.initial = to_relational(d.initial);
    for (auto& s : d.states) s = to_relational(s);
  }
  return out;
}

inline Dataset from_relational_coordinates(const Dataset& ds) {
  if (ds.entities.empty() || ds.entities.front() != "anchor") throw ContractError("dataset is not in relational coordinates");
  Dataset out = ds;
  out.entities.erase(out.entities.begin());
  for (auto& d : out.demos) {
    d.initial = from_relational(d.initial);
    for (auto& s : d.states) s = from_relational(s);
  }
  return out;
}

}  // namespace hdril::task
