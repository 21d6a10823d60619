#pragma once

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "hdril/config.hpp"
#include "hdril/demos.hpp"
#include "hdril/dynamics.hpp"
#include "hdril/metrics.hpp"
#include "hdril/planner.hpp"

namespace hdril::pipe {

using task::StateVector;

// ---- data -----------------------------------------------------------------------

inline task::TaskSpec make_task(const RunConfig& c) { return task::make_task(c.task, c.task_params); }
inline task::Scene make_scene(const RunConfig& c) { return task::make_scene(c.robot); }

inline std::uint64_t heldout_seed(std::uint64_t seed) { return derive_seed(seed, {0x68656c64}); }

inline task::Dataset training_demos(const task::TaskSpec& t, const task::Scene& s, const RunConfig& c) {
  return task::generate_dataset(t, s, c.demos, c.seed);
}

/// Demonstrations from spawns drawn on a stream disjoint from training.
inline task::Dataset heldout_demos(const task::TaskSpec& t, const task::Scene& s, const RunConfig& c) {
  return task::generate_dataset(t, s, c.eval_spawns, heldout_seed(c.seed));
}

inline std::vector<std::string> primitive_names(const task::TaskSpec& t) {
  std::vector<std::string> out;
  for (const auto& p : t.primitives) out.push_back(p.name);
  return out;
}

inline std::vector<std::size_t> horizons(const task::TaskSpec& t) {
  std::vector<std::size_t> out;
  for (const auto& p : t.primitives) out.push_back(p.horizon);
  return out;
}

// ---- model construction ---------------------------------------------------------

inline dyn::ModelConfig model_config(const task::TaskSpec& t, const RunConfig& c, const Variant& v) {
  const DynamicsSize& size = c.size_for(v);
  dyn::ModelConfig m;
  const std::size_t anchor = v.relational ? 1 : 0;
  m.state_width = t.state_width() + 7 * anchor;
  m.hidden = size.hidden;
  m.graph = v.graph;
  m.residual = v.residual;
  m.gat_width = c.gat_width;
  m.gat_heads = c.gat_heads;
  m.encoder_fc = size.encoder_fc;
  m.decoder_fc = size.decoder_fc;
  m.targets.clear();
  for (std::size_t o : t.residual_objects) m.targets.push_back(2 + o + anchor);
  return m;
}

inline dyn::ModelBank make_bank(const task::TaskSpec& t, const RunConfig& c, const Variant& v) {
  return dyn::make_bank(model_config(t, c, v), v.multi, horizons(t), derive_seed(c.seed, {0x62616e6b}));
}

inline dyn::TrainConfig train_config(const RunConfig& c, const Variant& v) {
  dyn::TrainConfig tc;
  tc.epochs = c.epochs;
  tc.batch_size = c.batch_size;
  tc.encoder_lr = c.size_for(v).encoder_lr;
  tc.decoder_lr = c.size_for(v).decoder_lr;
  tc.beta = c.beta;
  tc.teacher_forcing = c.teacher_forcing;
  tc.train_latent = c.train_latent;
  tc.seed = derive_seed(c.seed, {0x64796e});
  return tc;
}

/// Builds and trains the bank of variant `v` on `demos` (absolute coordinates).
inline dyn::ModelBank train_bank(const task::TaskSpec& t, const RunConfig& c, const Variant& v, const task::Dataset& demos,
                                 std::vector<double>* history = nullptr, std::function<void(std::size_t, double)> on_epoch = {}) {
  dyn::ModelBank bank = make_bank(t, c, v);
  dyn::TrainConfig tc = train_config(c, v);
  tc.on_epoch = std::move(on_epoch);
  const auto h = dyn::train_dynamics(bank, v.relational ? task::to_relational_coordinates(demos) : demos, primitive_names(t), tc);
  if (history) *history = h;
  return bank;
}

inline plan::PlannerModel make_planner(const task::TaskSpec& t, const RunConfig& c) {
  plan::PlannerConfig pc;
  pc.state_width = t.state_width();
  pc.classes = t.primitives.size();
  pc.hidden = c.planner_hidden;
  pc.gat_width = c.gat_width;
  pc.gat_heads = c.gat_heads;
  pc.encoder_fc = c.planner_encoder_fc;
  pc.decoder_fc = c.planner_decoder_fc;
  pc.input = c.planner_input;
  return plan::make_planner(pc, c.seed);
}

inline plan::PlannerTrainConfig planner_train_config(const RunConfig& c) {
  plan::PlannerTrainConfig pc;
  pc.epochs = c.planner_epochs;
  pc.batch_size = c.planner_batch_size;
  pc.encoder_lr = c.planner_encoder_lr;
  pc.decoder_lr = c.planner_decoder_lr;
  pc.seed = derive_seed(c.seed, {0x706c6e});
  return pc;
}

// ---- closed loop ----------------------------------------------------------------

struct TraceStep {
  std::size_t t = 0;  // 1-based executed step
  int primitive_id = 0;
  std::size_t model_index = 0;
  StateVector predicted;
  StateVector executed;
  double left_residual = 0.0;  // IK position residual, m
  double right_residual = 0.0;
};

struct PlannerCall {
  std::size_t step = 0;  // executed steps before the call
  int primitive_id = 0;
  std::vector<double> probabilities;
};

struct RolloutTrace {
  StateVector initial;
  std::vector<TraceStep> steps;
  std::vector<PlannerCall> decisions;
  bool grasp_failed = false;
  std::string failure;
  bool success = false;

  std::vector<StateVector> predicted() const {
    std::vector<StateVector> out;
    for (const auto& s : steps) out.push_back(s.predicted);
    return out;
  }
  std::vector<int> labels() const {
    std::vector<int> out;
    for (const auto& s : steps) out.push_back(s.primitive_id);
    return out;
  }
};

/// Chooses the next primitive from the observed states.
using PlannerFn = std::function<plan::Decision(const std::vector<StateVector>& observed)>;

/// Predicted absolute states for primitive `id` from `seed`; sets the index of
/// the model that produced them.
using PredictorFn = std::function<std::vector<StateVector>(int id, const StateVector& seed, const kin::WorldState& world, std::size_t& model)>;

inline PlannerFn model_planner(const plan::PlannerModel& m) {
  return [&m](const std::vector<StateVector>& observed) { return plan::plan_next(m, observed); };
}

/// Replays the task's primitive order; used as an oracle.
inline PlannerFn oracle_planner(const task::TaskSpec& t) {
  return [&t, k = std::size_t{0}](const std::vector<StateVector>&) mutable {
    plan::Decision d;
    d.probabilities.assign(t.primitives.size(), 0.0);
    d.probabilities[k % t.primitives.size()] = 1.0;
    d.primitive_id = static_cast<int>(k++ % t.primitives.size()) + 1;
    return d;
  };
}

inline PredictorFn bank_predictor(const dyn::ModelBank& bank, bool relational, dyn::LatentMode mode, std::uint64_t seed) {
  return [&bank, relational, mode, rng = std::make_shared<Rng>(derive_seed(seed, {0x726f6c6c}))](
             int id, const StateVector& s, const kin::WorldState&, std::size_t& model) {
    model = bank.model_index(id);
    auto out = dyn::rollout_primitive(bank, id, relational ? task::to_relational(s) : s, *rng, mode);
    if (relational)
      for (auto& x : out) x = task::from_relational(x);
    return out;
  };
}

/// Ground-truth scripted waypoints presented as predictions.
inline PredictorFn script_predictor(const task::TaskSpec& t, const task::Scene& scene) {
  return [&t, &scene](int id, const StateVector& s, const kin::WorldState& w, std::size_t& model) {
    model = static_cast<std::size_t>(id - 1);
    std::vector<StateVector> out;
    for (const auto& wp : task::script_primitive(t, scene, static_cast<std::size_t>(id - 1), w)) {
      StateVector x = s;
      task::put_pose(x, 0, wp.targets.left, nullptr);
      task::put_pose(x, 1, wp.targets.right, nullptr);
      out.push_back(std::move(x));
    }
    return out;
  };
}

namespace detail {

inline kin::Pose target_pose(const StateVector& s, std::size_t slot, const kin::Pose& fallback) {
  for (std::size_t k = 0; k < 7; ++k)
    if (!std::isfinite(s[7 * slot + k])) return fallback;
  try {
    const kin::Pose p = task::pose_at(s, slot);
    return {p.position, kin::normalize(p.orientation)};
  } catch (const NormalizationError&) {
    return fallback;
  }
}

}  // namespace detail

struct RolloutOptions {
  bool seed_from_executed = true;
  bool every_step_planner = false;
};

/// Plans one primitive per boundary, predicts its states, and drives both
/// grippers through IK toward the predicted poses. Attachments come from the
/// chosen primitive's directives. A missed grasp marks the trace failed but
/// execution continues.
inline RolloutTrace closed_loop_rollout(const task::TaskSpec& t, const task::Scene& scene, const kin::WorldState& start,
                                        const PlannerFn& planner, const PredictorFn& predictor, const RolloutOptions& opt = {}) {
  RolloutTrace tr;
  kin::WorldState w = start;
  tr.initial = task::state_vector(w);
  StateVector executed = tr.initial;
  StateVector seed = tr.initial;
  std::vector<StateVector> observed = {tr.initial};
  for (std::size_t k = 0; k < t.primitives.size(); ++k) {
    plan::Decision d = planner(observed);
    tr.decisions.push_back({tr.steps.size(), d.primitive_id, d.probabilities});
    if (d.primitive_id < 1 || static_cast<std::size_t>(d.primitive_id) > t.primitives.size())
      throw LookupError("planner chose unknown primitive " + std::to_string(d.primitive_id));
    const task::PrimitiveSpec& prim = t.primitives[static_cast<std::size_t>(d.primitive_id - 1)];
    std::size_t model = 0;
    const auto predicted = predictor(d.primitive_id, opt.seed_from_executed ? executed : seed, w, model);
    for (std::size_t j = 0; j < predicted.size(); ++j) {
      const kin::GripperTargets targets{detail::target_pose(predicted[j], 0, w.left_gripper), detail::target_pose(predicted[j], 1, w.right_gripper)};
      const auto directives = task::directives_at(prim, j);
      kin::StepResult r;
      try {
        r = kin::step_world(scene.robot, w, targets, directives);
      } catch (const GraspMissError& e) {
        if (!tr.grasp_failed) tr.failure = prim.name + ": " + e.what();
        tr.grasp_failed = true;
        std::vector<kin::Directive> releases;
        for (const auto& dv : directives)
          if (dv.before_motion()) releases.push_back(dv);
        r = kin::step_world(scene.robot, w, targets, releases);
      }
      w = r.world;
      executed = task::state_vector(w, &executed);
      tr.steps.push_back({tr.steps.size() + 1, d.primitive_id, model, predicted[j], executed, r.left.position_residual, r.right.position_residual});
      if (opt.every_step_planner) observed.push_back(executed);
    }
    if (!predicted.empty()) seed = predicted.back();
    if (!opt.every_step_planner) observed.push_back(executed);
  }
  tr.success = !tr.grasp_failed && kin::success_check(t.goal, w);
  if (!tr.success && tr.failure.empty()) tr.failure = "terminal state fails the success check";
  return tr;
}

inline void write_trace_csv(std::ostream& os, const RolloutTrace& tr, const std::vector<std::string>& entities) {
  os << "t,primitive_id,model_index,planner_call,left_ik_residual,right_ik_residual";
  for (const char* kind : {"predicted", "executed"})
    for (const auto& e : entities)
      for (const char* f : task::kPoseFields) os << ',' << kind << '_' << e << '_' << f;
  os << '\n';
  std::size_t call = 0;
  for (const auto& s : tr.steps) {
    const bool boundary = call < tr.decisions.size() && tr.decisions[call].step + 1 == s.t;
    if (boundary) ++call;
    os << s.t << ',' << s.primitive_id << ',' << s.model_index << ',' << (boundary ? 1 : 0) << ',' << task::format_value(s.left_residual) << ','
       << task::format_value(s.right_residual);
    for (const auto* v : {&s.predicted, &s.executed})
      for (double x : *v) os << ',' << task::format_value(x);
    os << '\n';
  }
}

// ---- evaluation -----------------------------------------------------------------

/// Predicted trajectory stretched or cut to the ground-truth length, so a
/// planner that picks a shorter or longer primitive can still be scored.
inline metrics::Trajectory align_length(metrics::Trajectory pred, std::size_t n, const StateVector& initial) {
  if (pred.empty()) pred.push_back(initial);
  while (pred.size() < n) pred.push_back(pred.back());
  pred.resize(n);
  return pred;
}

struct EvalRun {
  metrics::EvalReport report;
  std::vector<RolloutTrace> traces;
};

inline EvalRun evaluate_models(const std::string& name, const task::TaskSpec& t, const task::Scene& scene, const task::Dataset& heldout,
                               const PlannerFn& planner, const std::function<PredictorFn(std::size_t)>& predictor_for,
                               const RolloutOptions& opt = {}) {
  EvalRun run;
  std::vector<metrics::RolloutSample> samples;
  for (std::size_t i = 0; i < heldout.demos.size(); ++i) {
    const auto& d = heldout.demos[i];
    const kin::WorldState w = task::initial_world(t, scene, d.spawn);
    RolloutTrace tr = closed_loop_rollout(t, scene, w, planner, predictor_for(i), opt);
    samples.push_back({align_length(tr.predicted(), d.states.size(), d.initial), d.states, d.labels, tr.success});
    run.traces.push_back(std::move(tr));
  }
  run.report = metrics::evaluate(name, samples, primitive_names(t));
  return run;
}

/// Evaluates a trained bank with a planner on every held-out spawn.
inline EvalRun evaluate_bank(const std::string& name, const task::TaskSpec& t, const task::Scene& scene, const task::Dataset& heldout,
                             const plan::PlannerModel& planner, const dyn::ModelBank& bank, const RunConfig& c, bool relational) {
  RolloutOptions opt{c.seed_from_executed, planner.config.input == plan::PlannerInput::EveryStep};
  // Each spawn draws latent noise from its own stream.
  return evaluate_models(
      name, t, scene, heldout, model_planner(planner),
      [&](std::size_t i) { return bank_predictor(bank, relational, c.latent_mode, derive_seed(c.seed, {0x6576616c, i})); }, opt);
}

// ---- ablation grid --------------------------------------------------------------

/// The eight (graph, skip, multi) rows in table order.
inline std::vector<Variant> ablation_grid() {
  return {{false, false, false, false}, {false, true, false, false}, {true, false, false, false}, {true, true, false, false},
          {false, false, true, false},  {false, true, true, false},  {true, false, true, false},  {true, true, true, false}};
}

/// Absolute versus relational coordinates.
inline std::vector<Variant> relational_grid() {
  return {{false, false, false, false}, {false, true, false, true}, {true, true, false, false}};
}

struct AblationRow {
  Variant variant;
  std::size_t parameters = 0;
  double final_loss = 0.0;
  metrics::EvalReport report;
};

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "model,graph,skip,multi,relational,parameters,final_loss,euclidean_mean_cm,euclidean_std_cm,angular_mean_rad,angular_std_rad,dtw,success\n";
  for (const auto& r : rows) {
    const auto& e = r.report;
    os << e.name << ',' << r.variant.graph << ',' << r.variant.residual << ',' << r.variant.multi << ',' << r.variant.relational << ','
       << r.parameters << ',' << metrics::fmt(r.final_loss, 9) << ',' << metrics::fmt(e.euclidean.mean, 9) << ','
       << metrics::fmt(e.euclidean.std, 9) << ',' << metrics::fmt(e.angular.mean, 9) << ',' << metrics::fmt(e.angular.std, 9) << ','
       << metrics::fmt(e.dtw, 9) << ',' << metrics::fmt(e.success, 9) << '\n';
  }
}

inline void write_loss_csv(std::ostream& os, const std::vector<double>& history) {
  os << "epoch,loss\n";
  for (std::size_t e = 0; e < history.size(); ++e) os << e + 1 << ',' << task::format_value(history[e]) << '\n';
}

// ---- attention export -----------------------------------------------------------

inline std::vector<std::string> feature_names(const std::vector<std::string>& entities) {
  std::vector<std::string> out;
  for (const auto& e : entities)
    for (const char* f : task::kPoseFields) out.push_back(e + "_" + f);
  return out;
}

/// Per-edge attention of every graph model, evaluated on the state that
/// starts its primitive in `demo`.
inline void write_attention_csv(std::ostream& os, const dyn::ModelBank& bank, const task::Demonstration& demo, const std::vector<std::string>& entities,
                                double threshold, bool relational) {
  if (!bank.config.graph) throw ContractError("attention export needs a model with the graph layer");
  const auto names = feature_names(relational ? [&] {
    auto e = entities;
    e.insert(e.begin(), "anchor");
    return e;
  }() : entities);
  os << "model_index,primitive_id,head,source,target,weight,visible\n";
  for (std::size_t id = 1; id <= bank.primitive_count(); ++id) {
    std::size_t start = 0;
    while (start < demo.labels.size() && demo.labels[start] != static_cast<int>(id)) ++start;
    StateVector s = start == 0 ? demo.initial : demo.states[start - 1];
    if (relational) s = task::to_relational(s);
    const std::size_t m = bank.model_index(static_cast<int>(id));
    if (bank.multi || id == 1) {
      const StateVector x = bank.scaler.normalize(s);
      for (std::size_t h = 0; h < bank.models[m].gat.heads.size(); ++h) {
        const ad::Tensor a = nn::attention_weights(bank.models[m].gat, x, h);
        for (std::size_t u = 0; u < a.rows(); ++u)
          for (std::size_t v = 0; v < a.cols(); ++v)
            os << m << ',' << id << ',' << h << ',' << names[u] << ',' << names[v] << ',' << task::format_value(a(u, v)) << ','
               << (a(u, v) > threshold ? 1 : 0) << '\n';
      }
    }
  }
}

}  // namespace hdril::pipe
