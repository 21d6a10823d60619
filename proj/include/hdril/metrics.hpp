#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hdril/demos.hpp"
#include "hdril/errors.hpp"
#include "hdril/geometry.hpp"

namespace hdril::metrics {

using task::StateVector;
using Trajectory = std::vector<StateVector>;

inline constexpr double kCentimeters = 100.0;

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

inline MeanStd mean_std(std::span<const double> xs) {
  if (xs.empty()) throw ContractError("statistics of an empty sample");
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

namespace detail {

inline void check_pair(const Trajectory& a, const Trajectory& b) {
  if (a.size() != b.size()) throw ContractError("trajectory lengths differ: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  if (a.empty()) throw ContractError("empty trajectory");
  for (std::size_t t = 0; t < a.size(); ++t)
    if (a[t].size() != b[t].size() || a[t].size() < 14) throw ContractError("state widths differ or lack two grippers");
}

inline double gripper_distance(const StateVector& a, const StateVector& b, std::size_t g) {
  const double dx = a[7 * g] - b[7 * g], dy = a[7 * g + 1] - b[7 * g + 1], dz = a[7 * g + 2] - b[7 * g + 2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

inline kin::Quat quat_of(const StateVector& s, std::size_t g) {
  const kin::Quat q{s[7 * g + 3], s[7 * g + 4], s[7 * g + 5], s[7 * g + 6]};
  if (std::abs(kin::norm(q) - 1.0) > 1e-3) throw ContractError("non-unit quaternion in slot " + std::to_string(g));
  return q;
}

}  // namespace detail

/// Per-step position error in cm, averaged over the two grippers.
inline std::vector<double> euclidean_per_step(const Trajectory& pred, const Trajectory& truth) {
  detail::check_pair(pred, truth);
  std::vector<double> out(pred.size());
  for (std::size_t t = 0; t < pred.size(); ++t)
    out[t] = kCentimeters * 0.5 * (detail::gripper_distance(pred[t], truth[t], 0) + detail::gripper_distance(pred[t], truth[t], 1));
  return out;
}

inline MeanStd euclidean_error(const Trajectory& pred, const Trajectory& truth) { return mean_std(euclidean_per_step(pred, truth)); }

/// Per-step geodesic angle in rad, averaged over the two grippers.
inline std::vector<double> angular_per_step(const Trajectory& pred, const Trajectory& truth) {
  detail::check_pair(pred, truth);
  std::vector<double> out(pred.size());
  for (std::size_t t = 0; t < pred.size(); ++t) {
    double s = 0.0;
    for (std::size_t g = 0; g < 2; ++g) s += kin::geodesic_distance(detail::quat_of(pred[t], g), detail::quat_of(truth[t], g));
    out[t] = 0.5 * s;
  }
  return out;
}

inline MeanStd angular_error(const Trajectory& pred, const Trajectory& truth) { return mean_std(angular_per_step(pred, truth)); }

struct DtwResult {
  double cost = 0.0;         // summed step cost along the best alignment
  std::size_t length = 0;    // number of aligned pairs on that path
  double normalized() const { return cost / static_cast<double>(length); }
};

inline double state_distance(const StateVector& a, const StateVector& b) {
  if (a.size() != b.size()) throw ContractError("state widths differ");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

/// Classic DTW with Euclidean step cost. Among equal-cost alignments the
/// shortest path wins.
inline DtwResult dtw(const Trajectory& a, const Trajectory& b) {
  if (a.empty() || b.empty()) throw ContractError("dtw of an empty sequence");
  const std::size_t n = a.size(), m = b.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<DtwResult> d((n + 1) * (m + 1), {inf, 0});
  const auto at = [&](std::size_t i, std::size_t j) -> DtwResult& { return d[i * (m + 1) + j]; };
  at(0, 0) = {0.0, 0};
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      DtwResult best = at(i - 1, j - 1);
      for (const DtwResult& c : {at(i - 1, j), at(i, j - 1)})
        if (c.cost < best.cost || (c.cost == best.cost && c.length < best.length)) best = c;
      at(i, j) = {best.cost + state_distance(a[i - 1], b[j - 1]), best.length + 1};
    }
  }
  return at(n, m);
}

inline double dtw_distance(const Trajectory& a, const Trajectory& b, bool normalize = true) {
  const DtwResult r = dtw(a, b);
  return normalize ? r.normalized() : r.cost;
}

inline double success_rate(std::span<const bool> outcomes) {
  if (outcomes.empty()) throw ContractError("success rate of no rollouts");
  std::size_t ok = 0;
  for (bool b : outcomes) ok += b;
  return static_cast<double>(ok) / static_cast<double>(outcomes.size());
}

struct RolloutSample {
  Trajectory predicted;
  Trajectory truth;
  std::vector<int> labels;  // 1-based primitive id per step of `truth`
  bool success = false;
};

struct PrimitiveError {
  std::string name;
  std::size_t steps = 0;
  double euclidean_mean = 0.0;  // cm
};

struct EvalReport {
  std::string name;
  std::size_t rollouts = 0;
  MeanStd euclidean;  // cm
  MeanStd angular;    // rad
  double dtw = 0.0;   // mean over rollouts
  double success = 0.0;
  std::vector<PrimitiveError> per_primitive;
};

inline EvalReport evaluate(const std::string& name, std::span<const RolloutSample> samples, const std::vector<std::string>& primitive_names,
                           bool normalize_dtw = true) {
  if (samples.empty()) throw ContractError("evaluate needs at least one rollout");
  EvalReport r;
  r.name = name;
  r.rollouts = samples.size();
  std::vector<double> euc, ang;
  std::vector<double> sums(primitive_names.size(), 0.0);
  std::vector<std::size_t> counts(primitive_names.size(), 0);
  std::unique_ptr<bool[]> ok(new bool[samples.size()]);
  std::size_t done = 0;
  double dtw_sum = 0.0;
  for (const auto& s : samples) {
    const auto e = euclidean_per_step(s.predicted, s.truth);
    const auto a = angular_per_step(s.predicted, s.truth);
    if (s.labels.size() != e.size()) throw ContractError("one label per step expected");
    for (std::size_t t = 0; t < e.size(); ++t) {
      const auto k = static_cast<std::size_t>(s.labels[t] - 1);
      if (s.labels[t] < 1 || k >= primitive_names.size()) throw ContractError("label out of range");
      sums[k] += e[t];
      ++counts[k];
    }
    euc.insert(euc.end(), e.begin(), e.end());
    ang.insert(ang.end(), a.begin(), a.end());
    dtw_sum += dtw_distance(s.predicted, s.truth, normalize_dtw);
    ok[done++] = s.success;
  }
  r.euclidean = mean_std(euc);
  r.angular = mean_std(ang);
  r.dtw = dtw_sum / static_cast<double>(samples.size());
  r.success = success_rate(std::span<const bool>(ok.get(), samples.size()));
  for (std::size_t k = 0; k < primitive_names.size(); ++k)
    r.per_primitive.push_back({primitive_names[k], counts[k], counts[k] ? sums[k] / static_cast<double>(counts[k]) : 0.0});
  return r;
}

inline std::string fmt(double v, int digits = 6) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

inline void write_report_csv(std::ostream& os, std::span<const EvalReport> reports) {
  os << "model,rollouts,euclidean_mean_cm,euclidean_std_cm,angular_mean_rad,angular_std_rad,dtw,success\n";
  for (const auto& r : reports)
    os << r.name << ',' << r.rollouts << ',' << fmt(r.euclidean.mean, 9) << ',' << fmt(r.euclidean.std, 9) << ','
       << fmt(r.angular.mean, 9) << ',' << fmt(r.angular.std, 9) << ',' << fmt(r.dtw, 9) << ',' << fmt(r.success, 9) << '\n';
}

inline void write_breakdown_csv(std::ostream& os, std::span<const EvalReport> reports) {
  os << "model,primitive_id,primitive,steps,euclidean_mean_cm\n";
  for (const auto& r : reports)
    for (std::size_t k = 0; k < r.per_primitive.size(); ++k)
      os << r.name << ',' << k + 1 << ',' << r.per_primitive[k].name << ',' << r.per_primitive[k].steps << ','
         << fmt(r.per_primitive[k].euclidean_mean, 9) << '\n';
}

/// Aligned plain-text table: model, Euclidean (cm), angular (rad), DTW, % success.
inline void write_report_table(std::ostream& os, std::span<const EvalReport> reports) {
  std::size_t w = 5;
  for (const auto& r : reports) w = std::max(w, r.name.size());
  char line[256];
  std::snprintf(line, sizeof line, "%-*s  %-17s  %-15s  %-7s  %s\n", static_cast<int>(w), "Model", "Euclidean (cm)", "Angular (rad)", "DTW",
                "% Success");
  os << line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-*s  %6.2f +/- %-6.2f  %5.3f +/- %-5.3f  %-7.4f  %5.1f%%\n", static_cast<int>(w), r.name.c_str(),
                  r.euclidean.mean, r.euclidean.std, r.angular.mean, r.angular.std, r.dtw, 100.0 * r.success);
    os << line;
  }
}

}  // namespace hdril::metrics
