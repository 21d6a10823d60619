#pragma once

#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hdril/dynamics.hpp"
#include "hdril/errors.hpp"
#include "hdril/planner.hpp"
#include "hdril/task.hpp"

namespace hdril::pipe {

/// Architecture switches of one dynamics configuration.
struct Variant {
  bool graph = true;
  bool residual = true;
  bool multi = true;
  bool relational = false;

  friend bool operator==(const Variant&, const Variant&) = default;
};

inline std::string variant_name(const Variant& v) {
  if (v.graph && v.residual && v.multi && !v.relational) return "HDR-IL";
  std::string base = v.graph ? (v.residual ? "ResInt" : "Int") : (v.residual ? "Res" : "GRU-GRU");
  if (v.multi) base += " Multi";
  if (v.relational) base += " Relational";
  return base;
}

inline std::string variant_slug(const Variant& v) {
  std::string s = variant_name(v);
  for (char& c : s) c = c == ' ' ? '_' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

/// Parses "graph,res,multi[,relational]" style lists; "none" or "" is all off.
inline Variant parse_variant(const std::string& s) {
  Variant v{false, false, false, false};
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty() || tok == "none") continue;
    if (tok == "graph" || tok == "int") v.graph = true;
    else if (tok == "res" || tok == "residual") v.residual = true;
    else if (tok == "multi") v.multi = true;
    else if (tok == "relational" || tok == "rel") v.relational = true;
    else throw ParseError("unknown variant flag '" + tok + "'", 0);
  }
  return v;
}

/// Dynamics hyperparameters that differ between single and multi designs.
struct DynamicsSize {
  std::size_t hidden = 64;
  std::size_t encoder_fc = 3;
  std::size_t decoder_fc = 4;
  double encoder_lr = 1e-3;
  double decoder_lr = 1e-3;
};

struct RunConfig {
  task::TaskKind task = task::TaskKind::TableLift;
  std::string profile = "desk";
  std::uint64_t seed = 1;
  Variant variant;

  std::size_t demos = 200;
  std::size_t eval_spawns = 50;

  DynamicsSize single;
  DynamicsSize multi;
  std::size_t gat_width = 4;
  std::size_t gat_heads = 1;
  std::size_t epochs = 500;
  std::size_t batch_size = 20;
  double beta = 0.0;
  bool teacher_forcing = true;
  dyn::LatentMode train_latent = dyn::LatentMode::Sample;

  std::size_t planner_hidden = 64;
  std::size_t planner_encoder_fc = 3;
  std::size_t planner_decoder_fc = 4;
  double planner_encoder_lr = 1e-3;
  double planner_decoder_lr = 1e-3;
  std::size_t planner_epochs = 200;
  std::size_t planner_batch_size = 20;
  plan::PlannerInput planner_input = plan::PlannerInput::Boundary;

  dyn::LatentMode latent_mode = dyn::LatentMode::Mean;
  bool seed_from_executed = true;
  double attention_threshold = 0.08;

  task::TaskParams task_params;
  task::RobotConfig robot;

  const DynamicsSize& size_for(const Variant& v) const { return v.multi ? multi : single; }
};

/// Defaults of a named profile. "paper" carries the full-scale hyperparameters
/// and data sizes; "desk" is small enough for one CPU core.
inline RunConfig profile_defaults(const std::string& profile, task::TaskKind kind) {
  RunConfig c;
  c.task = kind;
  c.profile = profile;
  if (profile == "desk") return c;
  if (profile != "paper") throw ParseError("unknown profile '" + profile + "'", 0);
  if (kind == task::TaskKind::TableLift) {
    c.demos = 2500, c.eval_spawns = 127, c.epochs = 12500, c.batch_size = 70;
    c.single = {512, 18, 19, 2e-4, 4e-5};
    c.multi = {512, 3, 5, 1e-5, 4e-5};
    c.planner_hidden = 512, c.planner_encoder_fc = 3, c.planner_decoder_fc = 4;
    c.planner_encoder_lr = 5e-5, c.planner_decoder_lr = 5e-5;
  } else {
    c.demos = 4700, c.eval_spawns = 281, c.epochs = 18800, c.batch_size = 130;
    c.single = {1024, 20, 21, 5e-5, 5e-5};
    c.multi = {512, 3, 5, 5e-5, 5e-5};
    c.planner_hidden = 512, c.planner_encoder_fc = 9, c.planner_decoder_fc = 8;
    c.planner_encoder_lr = 1e-5, c.planner_decoder_lr = 8e-7;
  }
  c.planner_epochs = c.epochs;
  c.planner_batch_size = c.batch_size;
  return c;
}

namespace detail {

struct Entry {
  std::string key;  // "section.key", or "key" at top level
  std::string value;
  std::size_t line = 0;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<Entry> read_entries(std::istream& is) {
  std::vector<Entry> out;
  std::string line, section;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("unterminated section header", no);
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ParseError("empty section name", no);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", no);
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError("missing key", no);
    out.push_back({section.empty() ? key : section + "." + key, trim(line.substr(eq + 1)), no});
  }
  return out;
}

template <class T>
T number(const Entry& e) {
  T v{};
  const auto [p, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
  if (ec != std::errc() || p != e.value.data() + e.value.size() || e.value.empty())
    throw ParseError("'" + e.key + "' expects a number, got '" + e.value + "'", e.line);
  return v;
}

inline bool boolean(const Entry& e) {
  if (e.value == "true" || e.value == "on" || e.value == "1" || e.value == "yes") return true;
  if (e.value == "false" || e.value == "off" || e.value == "0" || e.value == "no") return false;
  throw ParseError("'" + e.key + "' expects true or false, got '" + e.value + "'", e.line);
}

inline std::size_t positive(const Entry& e) {
  const auto v = number<std::size_t>(e);
  if (v == 0) throw ParseError("'" + e.key + "' must be positive", e.line);
  return v;
}

inline dyn::LatentMode latent(const Entry& e) {
  if (e.value == "mean") return dyn::LatentMode::Mean;
  if (e.value == "sample") return dyn::LatentMode::Sample;
  throw ParseError("'" + e.key + "' expects mean or sample", e.line);
}

inline void apply(RunConfig& c, const Entry& e) {
  using Setter = std::function<void(RunConfig&, const Entry&)>;
  static const std::map<std::string, Setter> setters = [] {
    std::map<std::string, Setter> m;
    m["seed"] = [](RunConfig& c, const Entry& e) { c.seed = number<std::uint64_t>(e); };
    m["variant.graph"] = [](RunConfig& c, const Entry& e) { c.variant.graph = boolean(e); };
    m["variant.residual"] = [](RunConfig& c, const Entry& e) { c.variant.residual = boolean(e); };
    m["variant.multi"] = [](RunConfig& c, const Entry& e) { c.variant.multi = boolean(e); };
    m["variant.relational"] = [](RunConfig& c, const Entry& e) { c.variant.relational = boolean(e); };
    m["data.demos"] = [](RunConfig& c, const Entry& e) { c.demos = positive(e); };
    m["data.eval_spawns"] = [](RunConfig& c, const Entry& e) { c.eval_spawns = positive(e); };
    for (const char* which : {"single", "multi"}) {
      const std::string s = std::string("dynamics.") + which + ".";
      const bool multi = std::string(which) == "multi";
      const auto size = [multi](RunConfig& c) -> DynamicsSize& { return multi ? c.multi : c.single; };
      m[s + "hidden"] = [size](RunConfig& c, const Entry& e) { size(c).hidden = positive(e); };
      m[s + "encoder_fc"] = [size](RunConfig& c, const Entry& e) { size(c).encoder_fc = positive(e); };
      m[s + "decoder_fc"] = [size](RunConfig& c, const Entry& e) { size(c).decoder_fc = positive(e); };
      m[s + "encoder_lr"] = [size](RunConfig& c, const Entry& e) { size(c).encoder_lr = number<double>(e); };
      m[s + "decoder_lr"] = [size](RunConfig& c, const Entry& e) { size(c).decoder_lr = number<double>(e); };
    }
    m["dynamics.gat_width"] = [](RunConfig& c, const Entry& e) { c.gat_width = positive(e); };
    m["dynamics.gat_heads"] = [](RunConfig& c, const Entry& e) { c.gat_heads = positive(e); };
    m["dynamics.epochs"] = [](RunConfig& c, const Entry& e) { c.epochs = number<std::size_t>(e); };
    m["dynamics.batch_size"] = [](RunConfig& c, const Entry& e) { c.batch_size = positive(e); };
    m["dynamics.beta"] = [](RunConfig& c, const Entry& e) { c.beta = number<double>(e); };
    m["dynamics.teacher_forcing"] = [](RunConfig& c, const Entry& e) { c.teacher_forcing = boolean(e); };
    m["dynamics.train_latent"] = [](RunConfig& c, const Entry& e) { c.train_latent = latent(e); };
    m["planner.hidden"] = [](RunConfig& c, const Entry& e) { c.planner_hidden = positive(e); };
    m["planner.encoder_fc"] = [](RunConfig& c, const Entry& e) { c.planner_encoder_fc = positive(e); };
    m["planner.decoder_fc"] = [](RunConfig& c, const Entry& e) { c.planner_decoder_fc = positive(e); };
    m["planner.encoder_lr"] = [](RunConfig& c, const Entry& e) { c.planner_encoder_lr = number<double>(e); };
    m["planner.decoder_lr"] = [](RunConfig& c, const Entry& e) { c.planner_decoder_lr = number<double>(e); };
    m["planner.epochs"] = [](RunConfig& c, const Entry& e) { c.planner_epochs = number<std::size_t>(e); };
    m["planner.batch_size"] = [](RunConfig& c, const Entry& e) { c.planner_batch_size = positive(e); };
    m["planner.input"] = [](RunConfig& c, const Entry& e) {
      if (e.value == "boundary") c.planner_input = plan::PlannerInput::Boundary;
      else if (e.value == "every-step") c.planner_input = plan::PlannerInput::EveryStep;
      else throw ParseError("'planner.input' expects boundary or every-step", e.line);
    };
    m["rollout.latent_mode"] = [](RunConfig& c, const Entry& e) { c.latent_mode = latent(e); };
    m["rollout.seed_from"] = [](RunConfig& c, const Entry& e) {
      if (e.value == "executed") c.seed_from_executed = true;
      else if (e.value == "predicted") c.seed_from_executed = false;
      else throw ParseError("'rollout.seed_from' expects executed or predicted", e.line);
    };
    m["task.lift_height"] = [](RunConfig& c, const Entry& e) { c.task_params.lift_height = number<double>(e); };
    m["task.extend_distance"] = [](RunConfig& c, const Entry& e) { c.task_params.extend_distance = number<double>(e); };
    m["task.hover_height"] = [](RunConfig& c, const Entry& e) { c.task_params.hover_height = number<double>(e); };
    m["task.join_tolerance"] = [](RunConfig& c, const Entry& e) { c.task_params.join_tolerance = number<double>(e); };
    m["robot.shoulder_height"] = [](RunConfig& c, const Entry& e) { c.robot.geometry.shoulder_height = number<double>(e); };
    m["robot.upper_arm"] = [](RunConfig& c, const Entry& e) { c.robot.geometry.upper_arm = number<double>(e); };
    m["robot.forearm"] = [](RunConfig& c, const Entry& e) { c.robot.geometry.forearm = number<double>(e); };
    m["robot.hand"] = [](RunConfig& c, const Entry& e) { c.robot.geometry.hand = number<double>(e); };
    m["robot.base_y"] = [](RunConfig& c, const Entry& e) { c.robot.base_y = number<double>(e); };
    m["robot.base_z"] = [](RunConfig& c, const Entry& e) { c.robot.base_z = number<double>(e); };
    m["robot.grasp_tolerance"] = [](RunConfig& c, const Entry& e) { c.robot.grasp_tolerance = number<double>(e); };
    m["robot.ik_damping"] = [](RunConfig& c, const Entry& e) { c.robot.ik.damping = number<double>(e); };
    m["robot.ik_iterations"] = [](RunConfig& c, const Entry& e) { c.robot.ik.max_iterations = positive(e); };
    m["robot.ik_tolerance"] = [](RunConfig& c, const Entry& e) { c.robot.ik.position_tolerance = number<double>(e); };
    m["rollout.attention_threshold"] = [](RunConfig& c, const Entry& e) { c.attention_threshold = number<double>(e); };
    return m;
  }();
  const auto it = setters.find(e.key);
  if (it == setters.end()) throw ParseError("unknown key '" + e.key + "'", e.line);
  it->second(c, e);
}

}  // namespace detail

/// Command-line values that take precedence over the file.
struct Overrides {
  std::optional<task::TaskKind> task;
  std::optional<std::string> profile;
  std::optional<std::uint64_t> seed;
  std::optional<Variant> variant;
  std::optional<dyn::LatentMode> latent_mode;
};

/// Profile defaults, then file entries, then overrides. `task` and `profile`
/// are resolved first because they choose the defaults.
inline RunConfig load_config(std::istream& is, const Overrides& o = {}) {
  const auto entries = detail::read_entries(is);
  task::TaskKind kind = task::TaskKind::TableLift;
  std::string profile = "desk";
  for (const auto& e : entries) {
    if (e.key == "task") {
      try {
        kind = task::parse_task(e.value);
      } catch (const LookupError&) {
        throw ParseError("unknown task '" + e.value + "'", e.line);
      }
    } else if (e.key == "profile") {
      profile = e.value;
    }
  }
  if (o.task) kind = *o.task;
  if (o.profile) profile = *o.profile;
  RunConfig c = profile_defaults(profile, kind);
  for (const auto& e : entries)
    if (e.key != "task" && e.key != "profile") detail::apply(c, e);
  if (o.seed) c.seed = *o.seed;
  if (o.variant) c.variant = *o.variant;
  if (o.latent_mode) c.latent_mode = *o.latent_mode;
  return c;
}

inline RunConfig load_config(const std::string& path, const Overrides& o = {}) {
  std::ifstream f(path);
  if (!f) throw MissingFileError("cannot open config " + path);
  return load_config(f, o);
}

}  // namespace hdril::pipe
