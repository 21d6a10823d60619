#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "hdril/adam.hpp"
#include "hdril/autodiff.hpp"
#include "hdril/checkpoint.hpp"
#include "hdril/demos.hpp"
#include "hdril/errors.hpp"
#include "hdril/layers.hpp"
#include "hdril/rng.hpp"

namespace hdril::dyn {

using ad::Parameter;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using task::StateVector;

enum class LatentMode { Mean, Sample };

inline constexpr double kLogVarMin = -20.0;
inline constexpr double kLogVarMax = 5.0;

// ---- feature scaling ----------------------------------------------------------

struct FeatureScaler {
  std::vector<double> mean;
  std::vector<double> std;

  std::size_t width() const { return mean.size(); }

  StateVector normalize(const StateVector& s) const {
    check(s);
    StateVector out(s.size());
    for (std::size_t k = 0; k < s.size(); ++k) out[k] = (s[k] - mean[k]) / std[k];
    return out;
  }
  StateVector denormalize(const StateVector& s) const {
    check(s);
    StateVector out(s.size());
    for (std::size_t k = 0; k < s.size(); ++k) out[k] = s[k] * std[k] + mean[k];
    return out;
  }

 private:
  void check(const StateVector& s) const {
    if (s.size() != mean.size())
      throw DimensionError("scaler expects width " + std::to_string(mean.size()) + ", got " + std::to_string(s.size()));
  }
};

/// Per-feature mean and population std over every state in the dataset. The
/// std is floored so near-constant features (quaternion parts) do not blow up.
inline FeatureScaler fit_scaler(const task::Dataset& ds, double floor = 0.05) {
  if (ds.demos.empty()) throw DataError("cannot fit a scaler on an empty dataset");
  const std::size_t w = ds.demos.front().initial.size();
  std::vector<double> sum(w, 0.0), sq(w, 0.0);
  double n = 0.0;
  const auto add = [&](const StateVector& s) {
    if (s.size() != w) throw DimensionError("dataset mixes state widths");
    for (std::size_t k = 0; k < w; ++k) sum[k] += s[k];
    n += 1.0;
  };
  for (const auto& d : ds.demos) {
    add(d.initial);
    for (const auto& s : d.states) add(s);
  }
  FeatureScaler sc;
  sc.mean.resize(w);
  sc.std.resize(w);
  for (std::size_t k = 0; k < w; ++k) sc.mean[k] = sum[k] / n;
  const auto acc = [&](const StateVector& s) {
    for (std::size_t k = 0; k < w; ++k) sq[k] += (s[k] - sc.mean[k]) * (s[k] - sc.mean[k]);
  };
  for (const auto& d : ds.demos) {
    acc(d.initial);
    for (const auto& s : d.states) acc(s);
  }
  for (std::size_t k = 0; k < w; ++k) sc.std[k] = std::max(floor, std::sqrt(sq[k] / n));
  return sc;
}

inline FeatureScaler identity_scaler(std::size_t width) { return {std::vector<double>(width, 0.0), std::vector<double>(width, 1.0)}; }

// ---- model --------------------------------------------------------------------

struct ModelConfig {
  std::size_t state_width = 21;
  std::size_t hidden = 64;  // encoder, decoder and latent width
  bool graph = true;
  bool residual = true;
  std::size_t gat_width = 4;
  std::size_t gat_heads = 1;
  std::size_t encoder_fc = 3;  // including the final mean/log-variance layer
  std::size_t decoder_fc = 4;  // including the output layer
  std::vector<std::size_t> targets = {2};  // entity slots copied through the skip

  std::size_t fc_input_width() const { return hidden + (residual ? 7 * targets.size() : 0); }
  std::size_t encoder_input_width() const { return graph ? state_width * gat_width * gat_heads : state_width; }
};

struct PrimitiveDynamicsModel {
  ModelConfig config;
  std::size_t horizon = 0;
  nn::GATLayer gat;  // unused when the graph flag is off
  nn::GRUCell encoder;
  std::vector<nn::Linear> encoder_fc;
  nn::Linear mean_head, logvar_head;
  nn::GRUCell decoder;
  std::vector<nn::Linear> decoder_fc;

  template <class Self, class F>
  static void visit_encoder(Self& m, F&& f) {
    if (m.config.graph) m.gat.for_each_parameter(f);
    m.encoder.for_each_parameter(f);
    for (auto& l : m.encoder_fc) l.for_each_parameter(f);
    m.mean_head.for_each_parameter(f);
    m.logvar_head.for_each_parameter(f);
  }
  template <class Self, class F>
  static void visit_decoder(Self& m, F&& f) {
    m.decoder.for_each_parameter(f);
    for (auto& l : m.decoder_fc) l.for_each_parameter(f);
  }
  template <class F>
  void for_each_parameter(F&& f) {
    visit_encoder(*this, f);
    visit_decoder(*this, f);
  }
  template <class F>
  void for_each_parameter(F&& f) const {
    visit_encoder(*this, f);
    visit_decoder(*this, f);
  }

  std::vector<Parameter*> encoder_parameters() {
    std::vector<Parameter*> out;
    visit_encoder(*this, [&](Parameter& p) { out.push_back(&p); });
    return out;
  }
  std::vector<Parameter*> decoder_parameters() {
    std::vector<Parameter*> out;
    visit_decoder(*this, [&](Parameter& p) { out.push_back(&p); });
    return out;
  }
};

inline std::size_t parameter_count(const PrimitiveDynamicsModel& m) {
  std::size_t n = 0;
  m.for_each_parameter([&](const Parameter& p) { n += p.value.size(); });
  return n;
}

inline PrimitiveDynamicsModel make_dynamics_model(const ModelConfig& c, std::size_t horizon, Rng& rng,
                                                  const std::string& name = "model") {
  if (c.state_width == 0 || c.state_width % 7 != 0) throw DimensionError("state width must be a positive multiple of 7");
  if (c.hidden == 0 || c.encoder_fc == 0 || c.decoder_fc == 0) throw DimensionError("dynamics model needs positive widths and layer counts");
  if (horizon == 0) throw ContractError("dynamics model needs a horizon of at least one step");
  for (std::size_t t : c.targets)
    if (7 * t + 7 > c.state_width) throw IndexError("skip target slot " + std::to_string(t) + " outside the state");
  PrimitiveDynamicsModel m;
  m.config = c;
  m.horizon = horizon;
  if (c.graph) m.gat = nn::make_gat(name + ".gat", c.state_width, 1, c.gat_width, c.gat_heads, rng);
  m.encoder = nn::make_gru(name + ".encoder", c.encoder_input_width(), c.hidden, rng);
  std::size_t in = c.fc_input_width();
  for (std::size_t k = 0; k + 1 < c.encoder_fc; ++k) {
    m.encoder_fc.push_back(nn::make_linear(name + ".encoder_fc" + std::to_string(k), in, c.hidden, rng));
    in = c.hidden;
  }
  m.mean_head = nn::make_linear(name + ".mean", in, c.hidden, rng);
  m.logvar_head = nn::make_linear(name + ".logvar", in, c.hidden, rng);
  m.decoder = nn::make_gru(name + ".decoder", c.state_width, c.hidden, rng);
  in = c.hidden;
  for (std::size_t k = 0; k + 1 < c.decoder_fc; ++k) {
    m.decoder_fc.push_back(nn::make_linear(name + ".decoder_fc" + std::to_string(k), in, c.hidden, rng));
    in = c.hidden;
  }
  m.decoder_fc.push_back(nn::make_linear(name + ".decoder_out", in, c.state_width, rng));
  return m;
}

// ---- tape-level forward -------------------------------------------------------

struct BoundModel {
  nn::GATVars gat;
  nn::GRUVars encoder;
  std::vector<nn::LinearVars> encoder_fc;
  nn::LinearVars mean_head, logvar_head;
  nn::GRUVars decoder;
  std::vector<nn::LinearVars> decoder_fc;
};

inline BoundModel bind(Tape& tape, const PrimitiveDynamicsModel& m, bool track) {
  BoundModel b;
  if (m.config.graph) b.gat = nn::bind(tape, m.gat, track);
  b.encoder = nn::bind(tape, m.encoder, track);
  for (const auto& l : m.encoder_fc) b.encoder_fc.push_back(nn::bind(tape, l, track));
  b.mean_head = nn::bind(tape, m.mean_head, track);
  b.logvar_head = nn::bind(tape, m.logvar_head, track);
  b.decoder = nn::bind(tape, m.decoder, track);
  for (const auto& l : m.decoder_fc) b.decoder_fc.push_back(nn::bind(tape, l, track));
  return b;
}

struct LatentVars {
  Var mean;
  Var log_variance;
};

/// inputs: one [B x width] block per encoder step; initial: [B x width] state
/// whose target slots feed the skip connection.
inline LatentVars encode_vars(const PrimitiveDynamicsModel& m, const BoundModel& b, const std::vector<Var>& inputs, Var initial) {
  const ModelConfig& c = m.config;
  if (inputs.empty()) throw ContractError("encoder needs at least one input step");
  Tape& tape = *initial.tape();
  const std::size_t batch = initial.value().rows();
  for (const Var& x : inputs)
    if (x.value().rank() != 2 || x.value().cols() != c.state_width || x.value().rows() != batch)
      throw DimensionError("encoder input " + ad::shape_string(x.value().shape) + " does not match width " + std::to_string(c.state_width));
  Var h = tape.constant(Tensor(Shape{batch, c.hidden}, 0.0));
  for (const Var& x : inputs) h = nn::gru_cell_step(b.encoder, c.graph ? nn::gat_forward(m.gat, b.gat, x) : x, h);
  Var feat = h;
  if (c.residual) {
    std::vector<Var> parts = {h};
    for (std::size_t t : c.targets) parts.push_back(ad::slice_cols(initial, 7 * t, 7));
    feat = ad::concat(parts, 1);
  }
  for (const auto& l : b.encoder_fc) feat = ad::tanh(nn::linear_forward(l, feat));
  return {nn::linear_forward(b.mean_head, feat), ad::clamp(nn::linear_forward(b.logvar_head, feat), kLogVarMin, kLogVarMax)};
}

/// mu + exp(0.5 logvar) * eps, differentiable in mu and logvar.
inline Var reparameterize(const LatentVars& d, const Tensor& eps) {
  Tape& tape = *d.mean.tape();
  return ad::add(d.mean, ad::mul(ad::exp(ad::scale(d.log_variance, 0.5)), tape.constant(eps)));
}

/// Autoregressive decode: the first input is zeros, later inputs are the
/// previous prediction. Returns one [B x width] block per step.
inline std::vector<Var> decode_vars(const PrimitiveDynamicsModel& m, const BoundModel& b, Var z, std::size_t steps) {
  const ModelConfig& c = m.config;
  if (z.value().rank() != 2 || z.value().cols() != c.hidden)
    throw DimensionError("latent " + ad::shape_string(z.value().shape) + " does not match decoder width " + std::to_string(c.hidden));
  Tape& tape = *z.tape();
  Var x = tape.constant(Tensor(Shape{z.value().rows(), c.state_width}, 0.0));
  Var h = z;
  std::vector<Var> out;
  for (std::size_t k = 0; k < steps; ++k) {
    h = nn::gru_cell_step(b.decoder, x, h);
    Var y = h;
    for (std::size_t l = 0; l < b.decoder_fc.size(); ++l) {
      y = nn::linear_forward(b.decoder_fc[l], y);
      if (l + 1 < b.decoder_fc.size()) y = ad::tanh(y);
    }
    out.push_back(y);
    x = y;
  }
  return out;
}

// ---- plain-value API ------------------------------------------------------------

struct LatentDistribution {
  Tensor mean;          // [z]
  Tensor log_variance;  // [z]
};

inline Tensor row_block(const Tensor& seq, std::size_t r) {
  const std::size_t w = seq.cols();
  return Tensor(Shape{1, w}, std::vector<double>(seq.data.begin() + static_cast<std::ptrdiff_t>(r * w),
                                                 seq.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * w)));
}

/// seq: [T x width] normalized states. Teacher forcing consumes the rows as
/// given; otherwise seq holds only the initial state, which is fed for every
/// one of `unroll` steps (default: the model horizon).
inline LatentDistribution encode(const PrimitiveDynamicsModel& m, const Tensor& seq, bool teacher_forcing, std::size_t unroll = 0) {
  if (seq.rank() != 2 || seq.cols() != m.config.state_width || seq.rows() == 0)
    throw DimensionError("encode: sequence " + ad::shape_string(seq.shape) + " does not match width " + std::to_string(m.config.state_width));
  if (!teacher_forcing && seq.rows() != 1) throw ContractError("encode without teacher forcing takes the initial state only");
  Tape tape;
  const BoundModel b = bind(tape, m, false);
  std::vector<Var> inputs;
  Var initial = tape.constant(row_block(seq, 0));
  if (teacher_forcing) {
    for (std::size_t r = 0; r < seq.rows(); ++r) inputs.push_back(r == 0 ? initial : tape.constant(row_block(seq, r)));
  } else {
    inputs.assign(unroll ? unroll : m.horizon, initial);
  }
  const LatentVars d = encode_vars(m, b, inputs, initial);
  const std::size_t z = m.config.hidden;
  return {Tensor(Shape{z}, d.mean.value().data), Tensor(Shape{z}, d.log_variance.value().data)};
}

inline Tensor sample_latent(const LatentDistribution& d, Rng& rng, LatentMode mode) {
  if (d.mean.shape != d.log_variance.shape) throw DimensionError("latent mean and log-variance shapes differ");
  if (mode == LatentMode::Mean) return d.mean;
  Tensor z = d.mean;
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double lv = std::clamp(d.log_variance.data[k], kLogVarMin, kLogVarMax);
    z.data[k] += std::exp(0.5 * lv) * standard_normal(rng);
  }
  return z;
}

/// [steps x width] normalized predictions for latent z.
inline Tensor decode(const PrimitiveDynamicsModel& m, const Tensor& z, std::size_t steps = 0) {
  if (z.size() != m.config.hidden) throw DimensionError("decode: latent width " + std::to_string(z.size()) + ", expected " + std::to_string(m.config.hidden));
  Tape tape;
  const BoundModel b = bind(tape, m, false);
  const auto ys = decode_vars(m, b, tape.constant(Tensor(Shape{1, z.size()}, z.data)), steps ? steps : m.horizon);
  Tensor out(Shape{ys.size(), m.config.state_width});
  for (std::size_t k = 0; k < ys.size(); ++k)
    std::copy(ys[k].value().data.begin(), ys[k].value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(k * m.config.state_width));
  return out;
}

inline void normalize_quaternions(StateVector& s) {
  for (std::size_t e = 0; e + 7 <= s.size(); e += 7) {
    double n = 0.0;
    for (std::size_t k = 3; k < 7; ++k) n += s[e + k] * s[e + k];
    n = std::sqrt(n);
    if (!(n > 1e-12) || !std::isfinite(n)) {
      s[e + 3] = 1.0, s[e + 4] = s[e + 5] = s[e + 6] = 0.0;
      continue;
    }
    for (std::size_t k = 3; k < 7; ++k) s[e + k] /= n;
  }
}

// ---- bank -----------------------------------------------------------------------

struct ModelBank {
  ModelConfig config;
  bool multi = true;
  std::vector<std::size_t> horizons;  // indexed by primitive id - 1
  std::vector<PrimitiveDynamicsModel> models;
  FeatureScaler scaler;

  std::size_t primitive_count() const { return horizons.size(); }

  std::size_t model_index(int primitive_id) const {
    if (primitive_id < 1 || static_cast<std::size_t>(primitive_id) > horizons.size())
      throw LookupError("no dynamics model for primitive id " + std::to_string(primitive_id));
    return multi ? static_cast<std::size_t>(primitive_id - 1) : 0;
  }
  const PrimitiveDynamicsModel& model_for(int id) const { return models.at(model_index(id)); }
  PrimitiveDynamicsModel& model_for(int id) { return models.at(model_index(id)); }
  std::size_t horizon(int id) const {
    model_index(id);
    return horizons[static_cast<std::size_t>(id - 1)];
  }
};

inline ModelBank make_bank(const ModelConfig& c, bool multi, std::vector<std::size_t> horizons, std::uint64_t seed) {
  if (horizons.empty()) throw ContractError("a model bank needs at least one primitive");
  ModelBank bank;
  bank.config = c;
  bank.multi = multi;
  bank.horizons = std::move(horizons);
  bank.scaler = identity_scaler(c.state_width);
  const std::size_t n = multi ? bank.horizons.size() : 1;
  for (std::size_t k = 0; k < n; ++k) {
    Rng rng(derive_seed(seed, {0x64796e, k}));
    const std::size_t h = multi ? bank.horizons[k] : *std::max_element(bank.horizons.begin(), bank.horizons.end());
    bank.models.push_back(make_dynamics_model(c, h, rng, "model" + std::to_string(k)));
  }
  return bank;
}

inline std::size_t parameter_count(const ModelBank& b) {
  std::size_t n = 0;
  for (const auto& m : b.models) n += parameter_count(m);
  return n;
}

/// Predicts the primitive's states from a raw initial state: encode with
/// constant input, draw a latent, decode, undo scaling, renormalize quaternions.
inline std::vector<StateVector> rollout_primitive(const ModelBank& bank, int primitive_id, const StateVector& initial, Rng& rng,
                                                  LatentMode mode = LatentMode::Mean) {
  const PrimitiveDynamicsModel& m = bank.model_for(primitive_id);
  const std::size_t steps = bank.horizon(primitive_id);
  const StateVector x = bank.scaler.normalize(initial);
  const LatentDistribution d = encode(m, Tensor(Shape{1, x.size()}, x), false, steps);
  const Tensor y = decode(m, sample_latent(d, rng, mode), steps);
  std::vector<StateVector> out;
  const std::size_t w = m.config.state_width;
  for (std::size_t k = 0; k < steps; ++k) {
    StateVector s = bank.scaler.denormalize(StateVector(y.data.begin() + static_cast<std::ptrdiff_t>(k * w),
                                                        y.data.begin() + static_cast<std::ptrdiff_t>((k + 1) * w)));
    normalize_quaternions(s);
    out.push_back(std::move(s));
  }
  return out;
}

// ---- training -------------------------------------------------------------------

/// States that bracket one primitive: the state before its first step and the
/// states it produced.
struct Segment {
  int primitive = 0;
  StateVector initial;
  std::vector<StateVector> targets;
};

/// Segments grouped by primitive id - 1. Every primitive must occur.
inline std::vector<std::vector<Segment>> segment_dataset(const task::Dataset& ds, const std::vector<std::string>& primitive_names) {
  const std::size_t k = primitive_names.size();
  std::vector<std::vector<Segment>> out(k);
  for (const auto& d : ds.demos) {
    if (d.labels.size() != d.states.size()) throw DataError("demo " + std::to_string(d.id) + " has mismatched labels");
    for (std::size_t t = 0; t < d.states.size(); ++t) {
      const int label = d.labels[t];
      if (label < 1 || static_cast<std::size_t>(label) > k) throw DataError("label " + std::to_string(label) + " outside 1.." + std::to_string(k));
      if (t == 0 || d.labels[t - 1] != label) out[static_cast<std::size_t>(label - 1)].push_back({label, t == 0 ? d.initial : d.states[t - 1], {}});
      out[static_cast<std::size_t>(label - 1)].back().targets.push_back(d.states[t]);
    }
  }
  for (std::size_t p = 0; p < k; ++p)
    if (out[p].empty()) throw DataError("no training segments for primitive '" + primitive_names[p] + "'");
  return out;
}

struct TrainConfig {
  std::size_t epochs = 500;
  std::size_t batch_size = 20;
  double encoder_lr = 1e-3;
  double decoder_lr = 1e-3;
  double beta = 0.0;  // KL weight
  bool teacher_forcing = true;
  LatentMode train_latent = LatentMode::Sample;
  std::uint64_t seed = 0;
  std::function<void(std::size_t, double)> on_epoch;  // (epoch, mean loss)
};

/// MSE of the decoded segment batch in normalized space, plus beta * KL.
/// `eps` is the reparameterization noise, or nullptr for the mean latent.
inline Var batch_loss(Tape& tape, const PrimitiveDynamicsModel& m, const std::vector<const Segment*>& batch, bool teacher_forcing,
                      double beta, const Tensor* eps, bool track = true) {
  if (batch.empty()) throw ContractError("empty batch");
  const std::size_t w = m.config.state_width, steps = batch.front()->targets.size(), n = batch.size();
  Tensor init(Shape{n, w}), target(Shape{n, steps * w});
  std::vector<Tensor> tf(teacher_forcing ? steps - 1 : 0, Tensor(Shape{n, w}));
  for (std::size_t b = 0; b < n; ++b) {
    const Segment& s = *batch[b];
    if (s.targets.size() != steps) throw ContractError("batch mixes segment lengths");
    if (s.initial.size() != w) throw DimensionError("segment width does not match the model");
    std::copy(s.initial.begin(), s.initial.end(), init.data.begin() + static_cast<std::ptrdiff_t>(b * w));
    for (std::size_t k = 0; k < steps; ++k) {
      std::copy(s.targets[k].begin(), s.targets[k].end(), target.data.begin() + static_cast<std::ptrdiff_t>(b * steps * w + k * w));
      if (teacher_forcing && k + 1 < steps)
        std::copy(s.targets[k].begin(), s.targets[k].end(), tf[k].data.begin() + static_cast<std::ptrdiff_t>(b * w));
    }
  }
  const BoundModel p = bind(tape, m, track);
  Var x0 = tape.constant(std::move(init));
  std::vector<Var> inputs = {x0};
  if (teacher_forcing)
    for (auto& t : tf) inputs.push_back(tape.constant(std::move(t)));
  else
    inputs.assign(steps, x0);
  const LatentVars d = encode_vars(m, p, inputs, x0);
  const Var z = eps ? reparameterize(d, *eps) : d.mean;
  Var loss = ad::mse(ad::concat(decode_vars(m, p, z, steps), 1), tape.constant(std::move(target)));
  if (beta > 0.0) {
    using namespace ad;
    Var kl = sum(add(sub(exp(d.log_variance), d.log_variance), add(mul(d.mean, d.mean), -1.0)));
    loss = add(loss, scale(kl, 0.5 * beta / static_cast<double>(n)));
  }
  return loss;
}

namespace detail {

struct Trainee {
  PrimitiveDynamicsModel* model;
  std::vector<Parameter*> enc, dec;
  ad::AdamState enc_state, dec_state;
};

inline Tensor noise(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t(Shape{rows, cols});
  for (double& v : t.data) v = standard_normal(rng);
  return t;
}

}  // namespace detail

/// Fits the scaler, then trains every model of the bank on its primitive's
/// segments. Returns the per-epoch mean batch loss.
inline std::vector<double> train_dynamics(ModelBank& bank, const task::Dataset& ds, const std::vector<std::string>& primitive_names,
                                          const TrainConfig& cfg) {
  if (primitive_names.size() != bank.primitive_count()) throw ContractError("primitive names do not match the bank");
  if (cfg.batch_size == 0) throw ContractError("batch size must be positive");
  auto raw = segment_dataset(ds, primitive_names);
  bank.scaler = fit_scaler(ds);
  std::vector<std::vector<Segment>> segs(raw.size());
  for (std::size_t p = 0; p < raw.size(); ++p)
    for (const auto& s : raw[p]) {
      if (s.targets.size() != bank.horizons[p])
        throw DataError("primitive '" + primitive_names[p] + "' segment has " + std::to_string(s.targets.size()) + " steps, expected " +
                        std::to_string(bank.horizons[p]));
      Segment n{s.primitive, bank.scaler.normalize(s.initial), {}};
      for (const auto& t : s.targets) n.targets.push_back(bank.scaler.normalize(t));
      segs[p].push_back(std::move(n));
    }

  std::vector<detail::Trainee> trainees;
  for (auto& m : bank.models)
    trainees.push_back({&m, m.encoder_parameters(), m.decoder_parameters(), ad::AdamState({cfg.encoder_lr}), ad::AdamState({cfg.decoder_lr})});

  Rng rng(derive_seed(cfg.seed, {0x747261696e}));
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Batches never mix primitives, so every batch has one horizon.
    std::vector<std::pair<std::size_t, std::vector<const Segment*>>> batches;
    for (std::size_t p = 0; p < segs.size(); ++p) {
      std::vector<const Segment*> order;
      for (const auto& s : segs[p]) order.push_back(&s);
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t i = 0; i < order.size(); i += cfg.batch_size)
        batches.push_back({p, std::vector<const Segment*>(order.begin() + static_cast<std::ptrdiff_t>(i),
                                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + cfg.batch_size)))});
    }
    std::shuffle(batches.begin(), batches.end(), rng);
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& [p, batch] : batches) {
      detail::Trainee& tr = trainees[bank.model_index(static_cast<int>(p + 1))];
      Tensor eps;
      if (cfg.train_latent == LatentMode::Sample) eps = detail::noise(batch.size(), bank.config.hidden, rng);
      Tape tape;
      Var loss = batch_loss(tape, *tr.model, batch, cfg.teacher_forcing, cfg.beta, cfg.train_latent == LatentMode::Sample ? &eps : nullptr);
      tape.backward(loss);
      ad::adam_step(tr.enc, tr.enc_state);
      ad::adam_step(tr.dec, tr.dec_state);
      total += loss.value().item() * static_cast<double>(batch.size());
      count += batch.size();
    }
    history.push_back(total / static_cast<double>(count));
    if (cfg.on_epoch) cfg.on_epoch(epoch, history.back());
  }
  return history;
}

// ---- checkpoint -----------------------------------------------------------------

inline std::vector<ckpt::Record> to_records(const ModelBank& b) {
  using ckpt::scalar_record;
  const ModelConfig& c = b.config;
  std::vector<ckpt::Record> r = {
      scalar_record("meta/kind", 1),
      scalar_record("meta/state_width", static_cast<double>(c.state_width)),
      scalar_record("meta/hidden", static_cast<double>(c.hidden)),
      scalar_record("meta/graph", c.graph),
      scalar_record("meta/residual", c.residual),
      scalar_record("meta/multi", b.multi),
      scalar_record("meta/gat_width", static_cast<double>(c.gat_width)),
      scalar_record("meta/gat_heads", static_cast<double>(c.gat_heads)),
      scalar_record("meta/encoder_fc", static_cast<double>(c.encoder_fc)),
      scalar_record("meta/decoder_fc", static_cast<double>(c.decoder_fc)),
  };
  std::vector<double> targets(c.targets.begin(), c.targets.end()), horizons(b.horizons.begin(), b.horizons.end());
  r.push_back({"meta/targets", Tensor(Shape{targets.size()}, targets)});
  r.push_back({"meta/horizons", Tensor(Shape{horizons.size()}, horizons)});
  r.push_back({"scaler/mean", Tensor::vector(b.scaler.mean)});
  r.push_back({"scaler/std", Tensor::vector(b.scaler.std)});
  for (const auto& m : b.models) m.for_each_parameter([&](const Parameter& p) { r.push_back({p.name, p.value}); });
  return r;
}

inline ModelBank from_records(const std::vector<ckpt::Record>& records) {
  const ckpt::Index ix(records);
  if (ix.scalar("meta/kind") != 1) throw CheckpointError("checkpoint does not hold a dynamics bank");
  ModelConfig c;
  c.state_width = ix.count("meta/state_width");
  c.hidden = ix.count("meta/hidden");
  c.graph = ix.flag("meta/graph");
  c.residual = ix.flag("meta/residual");
  c.gat_width = ix.count("meta/gat_width");
  c.gat_heads = ix.count("meta/gat_heads");
  c.encoder_fc = ix.count("meta/encoder_fc");
  c.decoder_fc = ix.count("meta/decoder_fc");
  c.targets.clear();
  for (double t : ix.at("meta/targets").data) c.targets.push_back(static_cast<std::size_t>(t));
  std::vector<std::size_t> horizons;
  for (double h : ix.at("meta/horizons").data) horizons.push_back(static_cast<std::size_t>(h));
  ModelBank b;
  try {
    b = make_bank(c, ix.flag("meta/multi"), horizons, 0);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("inconsistent checkpoint metadata: ") + e.what());
  }
  b.scaler.mean = ix.at("scaler/mean").data;
  b.scaler.std = ix.at("scaler/std").data;
  if (b.scaler.mean.size() != c.state_width || b.scaler.std.size() != c.state_width) throw CheckpointError("scaler width mismatch");
  for (auto& m : b.models) m.for_each_parameter([&](Parameter& p) { ix.fill(p.name, p.value); });
  return b;
}

inline void save_bank(const std::string& path, const ModelBank& b) { ckpt::save(path, to_records(b)); }
inline ModelBank load_bank(const std::string& path) { return from_records(ckpt::load(path)); }

}  // namespace hdril::dyn
