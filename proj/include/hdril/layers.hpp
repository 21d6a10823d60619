#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "hdril/autodiff.hpp"
#include "hdril/rng.hpp"

namespace hdril::nn {

using ad::Parameter;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

// Glorot-uniform weights, zero biases.
inline Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (double& v : t.data) v = uniform(rng, -bound, bound);
  return t;
}

// ---- linear -----------------------------------------------------------------

struct Linear {
  Parameter weight;  // [out x in]
  Parameter bias;    // [out]

  std::size_t in() const { return weight.value.shape[1]; }
  std::size_t out() const { return weight.value.shape[0]; }

  template <class F>
  void for_each_parameter(F&& f) {
    f(weight);
    f(bias);
  }
  template <class F>
  void for_each_parameter(F&& f) const {
    f(weight);
    f(bias);
  }
};

inline Linear make_linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  if (in == 0 || out == 0) throw DimensionError("linear layer '" + name + "' needs positive widths");
  return Linear{Parameter(name + ".weight", glorot(Shape{out, in}, in, out, rng)),
                Parameter(name + ".bias", Tensor(Shape{out}, 0.0))};
}

struct LinearVars {
  Var weight;
  Var bias;
};

inline LinearVars bind(Tape& tape, const Linear& l, bool track) {
  return {tape.leaf(l.weight, track), tape.leaf(l.bias, track)};
}

/// W x + b for x of shape [in] or [batch x in].
inline Var linear_forward(const LinearVars& p, Var x) {
  const std::size_t in = p.weight.value().shape[1];
  if (x.value().cols() != in || x.value().rank() == 0 || x.value().rank() > 2) {
    throw DimensionError("linear: input " + ad::shape_string(x.value().shape) + " does not match width " +
                         std::to_string(in));
  }
  if (x.value().rank() == 1) {
    Var row = ad::reshape(x, Shape{1, in});
    Var y = ad::add_rowwise(ad::matmul_nt(row, p.weight), p.bias);
    return ad::reshape(y, Shape{p.weight.value().shape[0]});
  }
  return ad::add_rowwise(ad::matmul_nt(x, p.weight), p.bias);
}

inline Var linear_forward(Tape& tape, const Linear& l, Var x, bool track = true) {
  return linear_forward(bind(tape, l, track), x);
}

// ---- GRU cell ---------------------------------------------------------------

struct GRUCell {
  Parameter w_update, u_update, b_update;
  Parameter w_reset, u_reset, b_reset;
  Parameter w_candidate, u_candidate, b_candidate;

  std::size_t input_width() const { return w_update.value.shape[1]; }
  std::size_t hidden_width() const { return w_update.value.shape[0]; }

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f(self.w_update), f(self.u_update), f(self.b_update);
    f(self.w_reset), f(self.u_reset), f(self.b_reset);
    f(self.w_candidate), f(self.u_candidate), f(self.b_candidate);
  }
  template <class F>
  void for_each_parameter(F&& f) { visit(*this, f); }
  template <class F>
  void for_each_parameter(F&& f) const { visit(*this, f); }
};

inline GRUCell make_gru(const std::string& name, std::size_t input, std::size_t hidden, Rng& rng) {
  if (input == 0 || hidden == 0) throw DimensionError("GRU '" + name + "' needs positive widths");
  const auto w = [&](const char* tag) { return Parameter(name + "." + tag, glorot(Shape{hidden, input}, input, hidden, rng)); };
  const auto u = [&](const char* tag) { return Parameter(name + "." + tag, glorot(Shape{hidden, hidden}, hidden, hidden, rng)); };
  const auto b = [&](const char* tag) { return Parameter(name + "." + tag, Tensor(Shape{hidden}, 0.0)); };
  GRUCell g;
  g.w_update = w("w_update");
  g.u_update = u("u_update");
  g.b_update = b("b_update");
  g.w_reset = w("w_reset");
  g.u_reset = u("u_reset");
  g.b_reset = b("b_reset");
  g.w_candidate = w("w_candidate");
  g.u_candidate = u("u_candidate");
  g.b_candidate = b("b_candidate");
  return g;
}

struct GRUVars {
  Var w_update, u_update, b_update;
  Var w_reset, u_reset, b_reset;
  Var w_candidate, u_candidate, b_candidate;
};

inline GRUVars bind(Tape& tape, const GRUCell& g, bool track) {
  return {tape.leaf(g.w_update, track),    tape.leaf(g.u_update, track),    tape.leaf(g.b_update, track),
          tape.leaf(g.w_reset, track),     tape.leaf(g.u_reset, track),     tape.leaf(g.b_reset, track),
          tape.leaf(g.w_candidate, track), tape.leaf(g.u_candidate, track), tape.leaf(g.b_candidate, track)};
}

/// One gated step on [batch x input] / [batch x hidden]:
///   z = sig(Wz x + Uz h + bz), r = sig(Wr x + Ur h + br)
///   c = tanh(Wc x + Uc (r*h) + bc), h' = (1 - z) * h + z * c
inline Var gru_cell_step(const GRUVars& p, Var x, Var h) {
  const std::size_t in = p.w_update.value().shape[1];
  const std::size_t hid = p.w_update.value().shape[0];
  if (x.value().rank() != 2 || x.value().cols() != in) {
    throw DimensionError("gru: input " + ad::shape_string(x.value().shape) + " does not match width " + std::to_string(in));
  }
  if (h.value().rank() != 2 || h.value().cols() != hid || h.value().rows() != x.value().rows()) {
    throw DimensionError("gru: hidden " + ad::shape_string(h.value().shape) + " does not match width " +
                         std::to_string(hid));
  }
  using namespace ad;
  const auto gate = [&](Var w, Var u, Var b, Var hh) { return add_rowwise(add(matmul_nt(x, w), matmul_nt(hh, u)), b); };
  Var z = sigmoid(gate(p.w_update, p.u_update, p.b_update, h));
  Var r = sigmoid(gate(p.w_reset, p.u_reset, p.b_reset, h));
  Var c = ad::tanh(gate(p.w_candidate, p.u_candidate, p.b_candidate, mul(r, h)));
  // h' = h + z * (c - h)
  return add(h, mul(z, sub(c, h)));
}

// ---- graph attention ----------------------------------------------------------

enum class Activation { Identity, Elu };

struct GATHead {
  Parameter weight;     // [width x node_dim], shared by every node
  Parameter attention;  // [2 * width]
};

/// Attention over a fully connected graph with self-loops. Node u of an
/// input row holds features x[u * node_dim .. (u + 1) * node_dim).
struct GATLayer {
  std::size_t nodes = 0;
  std::size_t node_dim = 1;
  std::size_t width = 1;
  Activation activation = Activation::Elu;
  double slope = 0.2;
  std::vector<GATHead> heads;

  std::size_t output_width() const { return nodes * width * heads.size(); }

  template <class F>
  void for_each_parameter(F&& f) {
    for (auto& h : heads) f(h.weight), f(h.attention);
  }
  template <class F>
  void for_each_parameter(F&& f) const {
    for (const auto& h : heads) f(h.weight), f(h.attention);
  }
};

inline GATLayer make_gat(const std::string& name, std::size_t nodes, std::size_t node_dim, std::size_t width,
                         std::size_t heads, Rng& rng, Activation activation = Activation::Elu) {
  if (node_dim == 0 || width == 0 || heads == 0) throw DimensionError("GAT '" + name + "' needs positive widths");
  GATLayer g;
  g.nodes = nodes;
  g.node_dim = node_dim;
  g.width = width;
  g.activation = activation;
  for (std::size_t k = 0; k < heads; ++k) {
    const std::string h = name + ".head" + std::to_string(k);
    g.heads.push_back(GATHead{Parameter(h + ".weight", glorot(Shape{width, node_dim}, node_dim, width, rng)),
                              Parameter(h + ".attention", glorot(Shape{2 * width}, 2 * width, 1, rng))});
  }
  return g;
}

struct GATVars {
  std::vector<std::pair<Var, Var>> heads;
};

inline GATVars bind(Tape& tape, const GATLayer& g, bool track) {
  GATVars v;
  for (const auto& h : g.heads) v.heads.emplace_back(tape.leaf(h.weight, track), tape.leaf(h.attention, track));
  return v;
}

namespace detail {

// Per-row forward pieces shared by the tape op and the attention export.
struct GatRow {
  std::vector<double> proj;    // [N x P]   W h_u
  std::vector<double> pre;     // [N x N]   s_u + t_v before LeakyReLU
  std::vector<double> alpha;   // [N x N]   row softmax
  std::vector<double> mixed;   // [N x P]   sum_v alpha_uv W h_v
};

inline GatRow gat_row(const double* h, std::size_t n, std::size_t d, std::size_t width, const std::vector<double>& w,
                      const std::vector<double>& a, double slope) {
  GatRow r;
  r.proj.assign(n * width, 0.0);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t p = 0; p < width; ++p) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += w[p * d + k] * h[u * d + k];
      r.proj[u * width + p] = s;
    }
  std::vector<double> src(n, 0.0), dst(n, 0.0);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t p = 0; p < width; ++p) {
      src[u] += a[p] * r.proj[u * width + p];
      dst[u] += a[width + p] * r.proj[u * width + p];
    }
  r.pre.assign(n * n, 0.0);
  r.alpha.assign(n * n, 0.0);
  for (std::size_t u = 0; u < n; ++u) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < n; ++v) {
      const double pre = src[u] + dst[v];
      r.pre[u * n + v] = pre;
      mx = std::max(mx, pre > 0 ? pre : slope * pre);
    }
    double z = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
      const double pre = r.pre[u * n + v];
      const double e = std::exp((pre > 0 ? pre : slope * pre) - mx);
      r.alpha[u * n + v] = e;
      z += e;
    }
    for (std::size_t v = 0; v < n; ++v) r.alpha[u * n + v] /= z;
  }
  r.mixed.assign(n * width, 0.0);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v) {
      const double al = r.alpha[u * n + v];
      for (std::size_t p = 0; p < width; ++p) r.mixed[u * width + p] += al * r.proj[v * width + p];
    }
  return r;
}

inline Var gat_head(Var x, Var weight, Var attention, std::size_t n, std::size_t d, Activation act, double slope) {
  Tape& tape = *x.tape();
  const Tensor& xv = x.value();
  const std::size_t width = weight.value().shape[0];
  const std::size_t batch = xv.rows();
  Tensor out(Shape{batch, n * width});
  std::vector<GatRow> rows;
  rows.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    rows.push_back(gat_row(xv.data.data() + b * n * d, n, d, width, weight.value().data, attention.value().data, slope));
    const GatRow& r = rows.back();
    for (std::size_t i = 0; i < n * width; ++i) {
      const double o = r.mixed[i];
      out.data[b * n * width + i] = act == Activation::Elu ? (o > 0 ? o : std::expm1(o)) : o;
    }
  }
  const std::uint32_t xi = x.id(), wi = weight.id(), ai = attention.id();
  return tape.record(std::move(out), {x, weight, attention},
                     [xi, wi, ai, n, d, width, batch, act, slope, rows = std::move(rows)](Tape& t, std::uint32_t self) {
                       const std::vector<double>& gy = t.grad(self).data;
                       const std::vector<double>& xv = t.value(xi).data;
                       const std::vector<double>& w = t.value(wi).data;
                       const std::vector<double>& a = t.value(ai).data;
                       std::vector<double> gw(width * d, 0.0), ga(2 * width, 0.0);
                       std::vector<double> go(n * width), galpha(n * n), gproj(n * width), gsrc(n), gdst(n);
                       Tensor* gx = t.requires_grad(xi) ? &t.grad(xi) : nullptr;
                       for (std::size_t b = 0; b < batch; ++b) {
                         const GatRow& r = rows[b];
                         const double* h = xv.data() + b * n * d;
                         for (std::size_t i = 0; i < n * width; ++i) {
                           const double o = r.mixed[i];
                           const double dact = act == Activation::Elu ? (o > 0 ? 1.0 : std::exp(o)) : 1.0;
                           go[i] = gy[b * n * width + i] * dact;
                         }
                         std::fill(gproj.begin(), gproj.end(), 0.0);
                         for (std::size_t u = 0; u < n; ++u)
                           for (std::size_t v = 0; v < n; ++v) {
                             double s = 0.0;
                             const double al = r.alpha[u * n + v];
                             for (std::size_t p = 0; p < width; ++p) {
                               s += go[u * width + p] * r.proj[v * width + p];
                               gproj[v * width + p] += al * go[u * width + p];
                             }
                             galpha[u * n + v] = s;
                           }
                         std::fill(gsrc.begin(), gsrc.end(), 0.0);
                         std::fill(gdst.begin(), gdst.end(), 0.0);
                         for (std::size_t u = 0; u < n; ++u) {
                           double dot = 0.0;
                           for (std::size_t v = 0; v < n; ++v) dot += r.alpha[u * n + v] * galpha[u * n + v];
                           for (std::size_t v = 0; v < n; ++v) {
                             const double ge = r.alpha[u * n + v] * (galpha[u * n + v] - dot);
                             const double gpre = ge * (r.pre[u * n + v] > 0 ? 1.0 : slope);
                             gsrc[u] += gpre;
                             gdst[v] += gpre;
                           }
                         }
                         for (std::size_t u = 0; u < n; ++u)
                           for (std::size_t p = 0; p < width; ++p) {
                             gproj[u * width + p] += gsrc[u] * a[p] + gdst[u] * a[width + p];
                             ga[p] += gsrc[u] * r.proj[u * width + p];
                             ga[width + p] += gdst[u] * r.proj[u * width + p];
                           }
                         for (std::size_t u = 0; u < n; ++u)
                           for (std::size_t p = 0; p < width; ++p) {
                             const double g = gproj[u * width + p];
                             for (std::size_t k = 0; k < d; ++k) {
                               gw[p * d + k] += g * h[u * d + k];
                               if (gx) gx->data[b * n * d + u * d + k] += g * w[p * d + k];
                             }
                           }
                       }
                       if (t.requires_grad(wi)) {
                         Tensor& g = t.grad(wi);
                         for (std::size_t i = 0; i < gw.size(); ++i) g.data[i] += gw[i];
                       }
                       if (t.requires_grad(ai)) {
                         Tensor& g = t.grad(ai);
                         for (std::size_t i = 0; i < ga.size(); ++i) g.data[i] += ga[i];
                       }
                     });
}

}  // namespace detail

/// x: [batch x nodes * node_dim] -> [batch x heads * nodes * width]; heads
/// are laid out as consecutive column blocks.
inline Var gat_forward(const GATLayer& g, const GATVars& p, Var x) {
  if (g.nodes == 0) throw ContractError("gat: graph has no nodes");
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.cols() != g.nodes * g.node_dim) {
    throw DimensionError("gat: input " + ad::shape_string(xv.shape) + " does not match " + std::to_string(g.nodes) +
                         " nodes of dim " + std::to_string(g.node_dim));
  }
  std::vector<Var> outs;
  for (const auto& [w, a] : p.heads) outs.push_back(detail::gat_head(x, w, a, g.nodes, g.node_dim, g.activation, g.slope));
  return outs.size() == 1 ? outs.front() : ad::concat(outs, 1);
}

/// Row-stochastic attention matrix [nodes x nodes] of one head for one input.
inline Tensor attention_weights(const GATLayer& g, std::span<const double> features, std::size_t head = 0) {
  if (g.nodes == 0) throw ContractError("gat: graph has no nodes");
  if (features.size() != g.nodes * g.node_dim) throw DimensionError("attention_weights: feature width mismatch");
  const GATHead& h = g.heads.at(head);
  auto r = detail::gat_row(features.data(), g.nodes, g.node_dim, g.width, h.weight.value.data, h.attention.value.data,
                           g.slope);
  return Tensor(Shape{g.nodes, g.nodes}, std::move(r.alpha));
}

}  // namespace hdril::nn
