#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hdril/adam.hpp"
#include "hdril/autodiff.hpp"
#include "hdril/checkpoint.hpp"
#include "hdril/demos.hpp"
#include "hdril/dynamics.hpp"
#include "hdril/layers.hpp"

namespace hdril::plan {

using ad::Parameter;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using task::StateVector;

/// Which observed states the planner consumes: one per completed primitive
/// plus the initial state, or every executed state.
enum class PlannerInput { Boundary, EveryStep };

struct PlannerConfig {
  std::size_t state_width = 21;
  std::size_t classes = 6;
  std::size_t hidden = 64;
  bool graph = true;
  std::size_t gat_width = 4;
  std::size_t gat_heads = 1;
  std::size_t encoder_fc = 3;  // last one maps to the latent
  std::size_t decoder_fc = 4;  // last one maps to the class logits
  PlannerInput input = PlannerInput::Boundary;

  std::size_t encoder_input_width() const { return graph ? state_width * gat_width * gat_heads : state_width; }
};

struct PlannerModel {
  PlannerConfig config;
  nn::GATLayer gat;
  nn::GRUCell encoder;
  std::vector<nn::Linear> encoder_fc;
  nn::GRUCell decoder;
  std::vector<nn::Linear> decoder_fc;
  dyn::FeatureScaler scaler;

  template <class Self, class F>
  static void visit(Self& m, F&& f) {
    if (m.config.graph) m.gat.for_each_parameter(f);
    m.encoder.for_each_parameter(f);
    for (auto& l : m.encoder_fc) l.for_each_parameter(f);
    m.decoder.for_each_parameter(f);
    for (auto& l : m.decoder_fc) l.for_each_parameter(f);
  }
  template <class F>
  void for_each_parameter(F&& f) { visit(*this, f); }
  template <class F>
  void for_each_parameter(F&& f) const { visit(*this, f); }
};

inline PlannerModel make_planner(const PlannerConfig& c, std::uint64_t seed) {
  if (c.state_width == 0 || c.classes == 0 || c.hidden == 0 || c.encoder_fc == 0 || c.decoder_fc == 0)
    throw DimensionError("planner needs positive widths and layer counts");
  Rng rng(derive_seed(seed, {0x706c616e}));
  PlannerModel m;
  m.config = c;
  m.scaler = dyn::identity_scaler(c.state_width);
  if (c.graph) m.gat = nn::make_gat("planner.gat", c.state_width, 1, c.gat_width, c.gat_heads, rng);
  m.encoder = nn::make_gru("planner.encoder", c.encoder_input_width(), c.hidden, rng);
  for (std::size_t k = 0; k < c.encoder_fc; ++k) m.encoder_fc.push_back(nn::make_linear("planner.encoder_fc" + std::to_string(k), c.hidden, c.hidden, rng));
  m.decoder = nn::make_gru("planner.decoder", c.hidden, c.hidden, rng);
  for (std::size_t k = 0; k + 1 < c.decoder_fc; ++k)
    m.decoder_fc.push_back(nn::make_linear("planner.decoder_fc" + std::to_string(k), c.hidden, c.hidden, rng));
  m.decoder_fc.push_back(nn::make_linear("planner.head", c.hidden, c.classes, rng));
  return m;
}

inline std::size_t parameter_count(const PlannerModel& m) {
  std::size_t n = 0;
  m.for_each_parameter([&](const Parameter& p) { n += p.value.size(); });
  return n;
}

/// steps: one [B x width] normalized block per observed state. Returns the
/// [B x K] class probabilities.
inline Var planner_forward(Tape& tape, const PlannerModel& m, const std::vector<Var>& steps, bool track) {
  const PlannerConfig& c = m.config;
  if (steps.empty()) throw ContractError("planner needs at least one observed state");
  const std::size_t batch = steps.front().value().rows();
  nn::GATVars gat;
  if (c.graph) gat = nn::bind(tape, m.gat, track);
  const nn::GRUVars enc = nn::bind(tape, m.encoder, track);
  Var h = tape.constant(Tensor(Shape{batch, c.hidden}, 0.0));
  for (const Var& x : steps) {
    if (x.value().rank() != 2 || x.value().cols() != c.state_width || x.value().rows() != batch)
      throw DimensionError("planner input " + ad::shape_string(x.value().shape) + " does not match width " + std::to_string(c.state_width));
    h = nn::gru_cell_step(enc, c.graph ? nn::gat_forward(m.gat, gat, x) : x, h);
  }
  // The latent is a fixed vector, not a distribution.
  Var latent = h;
  for (std::size_t k = 0; k < m.encoder_fc.size(); ++k) {
    latent = nn::linear_forward(tape, m.encoder_fc[k], latent, track);
    if (k + 1 < m.encoder_fc.size()) latent = ad::tanh(latent);
  }
  Var y = nn::gru_cell_step(nn::bind(tape, m.decoder, track), tape.constant(Tensor(Shape{batch, c.hidden}, 0.0)), latent);
  for (std::size_t k = 0; k < m.decoder_fc.size(); ++k) {
    y = nn::linear_forward(tape, m.decoder_fc[k], y, track);
    if (k + 1 < m.decoder_fc.size()) y = ad::tanh(y);
  }
  return ad::softmax(y, 1);
}

struct Decision {
  int primitive_id = 0;  // 1-based
  std::vector<double> probabilities;
};

/// Lowest index wins ties.
inline std::size_t argmax(const std::vector<double>& p) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < p.size(); ++k)
    if (p[k] > p[best]) best = k;
  return best;
}

inline Decision plan_next(const PlannerModel& m, const std::vector<StateVector>& observed) {
  if (observed.empty()) throw ContractError("plan_next needs at least one observed state");
  Tape tape;
  std::vector<Var> steps;
  for (const auto& s : observed) {
    const StateVector x = m.scaler.normalize(s);
    steps.push_back(tape.constant(Tensor(Shape{1, x.size()}, x)));
  }
  Decision d;
  d.probabilities = planner_forward(tape, m, steps, false).value().data;
  d.primitive_id = static_cast<int>(argmax(d.probabilities)) + 1;
  return d;
}

// ---- training -------------------------------------------------------------------

struct Example {
  std::vector<StateVector> prefix;  // observed states, raw
  int label = 0;                    // next primitive id
};

/// (prefix, next primitive) pairs. Boundary mode emits one pair per primitive
/// start; every-step mode emits one per executed step.
inline std::vector<Example> planner_examples(const task::Dataset& ds, std::size_t classes, PlannerInput input) {
  std::vector<Example> out;
  for (const auto& d : ds.demos) {
    std::vector<StateVector> seen = {d.initial};
    for (std::size_t t = 0; t < d.labels.size(); ++t) {
      const int label = d.labels[t];
      if (label < 1 || static_cast<std::size_t>(label) > classes)
        throw DataError("label " + std::to_string(label) + " outside 1.." + std::to_string(classes) + " in demo " + std::to_string(d.id));
      const bool boundary = t == 0 || d.labels[t - 1] != label;
      if (input == PlannerInput::EveryStep || boundary) out.push_back({seen, label});
      if (input == PlannerInput::EveryStep || t + 1 == d.labels.size() || d.labels[t + 1] != label) seen.push_back(d.states[t]);
    }
  }
  return out;
}

inline Var planner_loss(Tape& tape, const PlannerModel& m, const std::vector<const Example*>& batch, bool track = true) {
  if (batch.empty()) throw ContractError("empty batch");
  const std::size_t len = batch.front()->prefix.size(), w = m.config.state_width;
  std::vector<Var> steps;
  for (std::size_t k = 0; k < len; ++k) {
    Tensor x(Shape{batch.size(), w});
    for (std::size_t b = 0; b < batch.size(); ++b) {
      if (batch[b]->prefix.size() != len) throw ContractError("batch mixes prefix lengths");
      const StateVector s = m.scaler.normalize(batch[b]->prefix[k]);
      std::copy(s.begin(), s.end(), x.data.begin() + static_cast<std::ptrdiff_t>(b * w));
    }
    steps.push_back(tape.constant(std::move(x)));
  }
  std::vector<std::size_t> targets;
  for (const auto* e : batch) {
    if (e->label < 1 || static_cast<std::size_t>(e->label) > m.config.classes) throw DataError("label " + std::to_string(e->label) + " out of range");
    targets.push_back(static_cast<std::size_t>(e->label - 1));
  }
  return ad::cross_entropy(planner_forward(tape, m, steps, track), targets);
}

struct PlannerTrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 20;
  double encoder_lr = 1e-3;
  double decoder_lr = 1e-3;
  std::uint64_t seed = 0;
  std::function<void(std::size_t, double)> on_epoch;
};

/// Fits the scaler and minimizes cross-entropy. Returns per-epoch mean loss.
inline std::vector<double> train_planner(PlannerModel& m, const task::Dataset& ds, const PlannerTrainConfig& cfg) {
  if (cfg.batch_size == 0) throw ContractError("batch size must be positive");
  const auto examples = planner_examples(ds, m.config.classes, m.config.input);
  if (examples.empty()) throw DataError("no planner examples in the dataset");
  m.scaler = dyn::fit_scaler(ds);
  std::map<std::size_t, std::vector<const Example*>> by_length;
  for (const auto& e : examples) by_length[e.prefix.size()].push_back(&e);

  std::vector<Parameter*> enc, dec;
  if (m.config.graph) m.gat.for_each_parameter([&](Parameter& p) { enc.push_back(&p); });
  m.encoder.for_each_parameter([&](Parameter& p) { enc.push_back(&p); });
  for (auto& l : m.encoder_fc) l.for_each_parameter([&](Parameter& p) { enc.push_back(&p); });
  m.decoder.for_each_parameter([&](Parameter& p) { dec.push_back(&p); });
  for (auto& l : m.decoder_fc) l.for_each_parameter([&](Parameter& p) { dec.push_back(&p); });
  ad::AdamState es({cfg.encoder_lr}), ds_({cfg.decoder_lr});

  Rng rng(derive_seed(cfg.seed, {0x706c616e, 1}));
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::vector<const Example*>> batches;
    for (auto& [len, group] : by_length) {
      std::vector<const Example*> order = group;
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t i = 0; i < order.size(); i += cfg.batch_size)
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + cfg.batch_size)));
    }
    std::shuffle(batches.begin(), batches.end(), rng);
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& batch : batches) {
      Tape tape;
      Var loss = planner_loss(tape, m, batch);
      tape.backward(loss);
      ad::adam_step(enc, es);
      ad::adam_step(dec, ds_);
      total += loss.value().item() * static_cast<double>(batch.size());
      count += batch.size();
    }
    history.push_back(total / static_cast<double>(count));
    if (cfg.on_epoch) cfg.on_epoch(epoch, history.back());
  }
  return history;
}

/// Fraction of examples whose argmax matches the label.
inline double planner_accuracy(const PlannerModel& m, const task::Dataset& ds) {
  const auto examples = planner_examples(ds, m.config.classes, m.config.input);
  if (examples.empty()) throw DataError("no planner examples in the dataset");
  std::size_t ok = 0;
  for (const auto& e : examples) ok += plan_next(m, e.prefix).primitive_id == e.label;
  return static_cast<double>(ok) / static_cast<double>(examples.size());
}

// ---- checkpoint -----------------------------------------------------------------

inline std::vector<ckpt::Record> to_records(const PlannerModel& m) {
  using ckpt::scalar_record;
  const PlannerConfig& c = m.config;
  std::vector<ckpt::Record> r = {
      scalar_record("meta/kind", 2),
      scalar_record("meta/state_width", static_cast<double>(c.state_width)),
      scalar_record("meta/classes", static_cast<double>(c.classes)),
      scalar_record("meta/hidden", static_cast<double>(c.hidden)),
      scalar_record("meta/graph", c.graph),
      scalar_record("meta/gat_width", static_cast<double>(c.gat_width)),
      scalar_record("meta/gat_heads", static_cast<double>(c.gat_heads)),
      scalar_record("meta/encoder_fc", static_cast<double>(c.encoder_fc)),
      scalar_record("meta/decoder_fc", static_cast<double>(c.decoder_fc)),
      scalar_record("meta/every_step", c.input == PlannerInput::EveryStep),
      {"scaler/mean", Tensor::vector(m.scaler.mean)},
      {"scaler/std", Tensor::vector(m.scaler.std)},
  };
  m.for_each_parameter([&](const Parameter& p) { r.push_back({p.name, p.value}); });
  return r;
}

inline PlannerModel planner_from_records(const std::vector<ckpt::Record>& records) {
  const ckpt::Index ix(records);
  if (ix.scalar("meta/kind") != 2) throw CheckpointError("checkpoint does not hold a planner");
  PlannerConfig c;
  c.state_width = ix.count("meta/state_width");
  c.classes = ix.count("meta/classes");
  c.hidden = ix.count("meta/hidden");
  c.graph = ix.flag("meta/graph");
  c.gat_width = ix.count("meta/gat_width");
  c.gat_heads = ix.count("meta/gat_heads");
  c.encoder_fc = ix.count("meta/encoder_fc");
  c.decoder_fc = ix.count("meta/decoder_fc");
  c.input = ix.flag("meta/every_step") ? PlannerInput::EveryStep : PlannerInput::Boundary;
  PlannerModel m;
  try {
    m = make_planner(c, 0);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("inconsistent planner metadata: ") + e.what());
  }
  m.scaler.mean = ix.at("scaler/mean").data;
  m.scaler.std = ix.at("scaler/std").data;
  if (m.scaler.mean.size() != c.state_width || m.scaler.std.size() != c.state_width) throw CheckpointError("scaler width mismatch");
  m.for_each_parameter([&](Parameter& p) { ix.fill(p.name, p.value); });
  return m;
}

inline void save_planner(const std::string& path, const PlannerModel& m) { ckpt::save(path, to_records(m)); }
inline PlannerModel load_planner(const std::string& path) { return planner_from_records(ckpt::load(path)); }

}  // namespace hdril::plan
