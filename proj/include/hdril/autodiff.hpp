#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hdril/errors.hpp"
#include "hdril/tensor.hpp"

namespace hdril::ad {

/// Trainable leaf. `grad` is an accumulator owned by the parameter, so
/// forward passes can bind a const parameter and still receive gradients.
struct Parameter {
  std::string name;
  Tensor value;
  mutable Tensor grad;
  mutable bool grad_ready = false;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape, 0.0) {}

  void zero_grad() const {
    if (grad.shape != value.shape) grad = Tensor(value.shape, 0.0);
    grad.fill(0.0);
    grad_ready = false;
  }
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape; }

 private:
  friend class Tape;
  Var(Tape* t, std::uint32_t i) : tape_(t), id_(i) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Linear record of executed operations. Every operand of record i has an
/// index below i, so a reverse sweep is a valid topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    Record r;
    r.owned = std::move(value);
    return push(std::move(r));
  }

  Var leaf(const Parameter& p, bool track = true) {
    Record r;
    r.external = &p.value;
    r.param = track ? &p : nullptr;
    r.requires_grad = track;
    return push(std::move(r));
  }

  Var record(Tensor value, std::initializer_list<Var> operands, BackwardFn fn) {
    return record(std::move(value), std::vector<Var>(operands), std::move(fn));
  }

  Var record(Tensor value, const std::vector<Var>& operands, BackwardFn fn) {
    Record r;
    r.owned = std::move(value);
    for (const Var& v : operands) {
      check(v);
      r.operands.push_back(v.id());
      r.requires_grad = r.requires_grad || records_[v.id()].requires_grad;
    }
    if (r.requires_grad) r.backward = std::move(fn);
    return push(std::move(r));
  }

  const Tensor& value(std::uint32_t id) const {
    const Record& r = records_.at(id);
    return r.external ? *r.external : r.owned;
  }
  const Tensor& value(Var v) const { return value(v.id()); }

  bool requires_grad(std::uint32_t id) const { return records_.at(id).requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id()); }

  const std::vector<std::uint32_t>& operands(std::uint32_t id) const { return records_.at(id).operands; }

  // Gradient buffer of a record, allocated as zeros on first use.
  Tensor& grad(std::uint32_t id) {
    Record& r = records_[id];
    if (r.grad.shape != value(id).shape || r.grad.data.size() != value(id).data.size()) {
      r.grad = Tensor(value(id).shape, 0.0);
    }
    return r.grad;
  }

  bool has_grad(std::uint32_t id) const { return !records_[id].grad.data.empty(); }

  /// Reverse sweep from a scalar loss. Parameter leaves accumulate into
  /// Parameter::grad; repeated calls keep accumulating there.
  void backward(Var loss) {
    check(loss);
    if (value(loss).size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + shape_string(value(loss).shape));
    }
    for (Record& r : records_) r.grad = Tensor{};
    grad(loss.id()).data[0] = 1.0;
    for (std::uint32_t i = loss.id() + 1; i-- > 0;) {
      Record& r = records_[i];
      if (!r.requires_grad || !r.backward || !has_grad(i)) continue;
      r.backward(*this, i);
    }
    for (std::uint32_t i = 0; i < records_.size(); ++i) {
      const Record& r = records_[i];
      if (r.param == nullptr) continue;
      const Parameter& p = *r.param;
      if (p.grad.shape != p.value.shape) p.grad = Tensor(p.value.shape, 0.0);
      if (has_grad(i)) {
        for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad.data[k] += r.grad.data[k];
      }
      p.grad_ready = true;
    }
  }

  std::size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  void check(Var v) const {
    if (v.tape() != this || v.id() >= records_.size()) {
      throw ContractError("variable does not belong to this tape");
    }
  }

 private:
  struct Record {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    const Parameter* param = nullptr;
    std::vector<std::uint32_t> operands;
    BackwardFn backward;
  };

  Var push(Record r) {
    records_.push_back(std::move(r));
    return Var(this, static_cast<std::uint32_t>(records_.size() - 1));
  }

  std::vector<Record> records_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MutMap as_matrix(Tensor& t) {
  return MutMap(t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

inline Tape& same_tape(Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) throw ContractError("operands live on different tapes");
  return *a.tape();
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(t.shape));
}

inline bool is_scalar_like(const Tensor& t) { return t.size() == 1; }

// y = f(x) elementwise; dfdx receives (x, y).
template <class F, class D>
Var unary(Var x, F f, D dfdx) {
  Tape& tape = *x.tape();
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = f(xv.data[i]);
  const std::uint32_t xi = x.id();
  return tape.record(std::move(out), {x}, [xi, dfdx](Tape& t, std::uint32_t self) {
    const Tensor& xv = t.value(xi);
    const Tensor& yv = t.value(self);
    const std::vector<double>& g = t.grad(self).data;
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g[i] * dfdx(xv.data[i], yv.data[i]);
  });
}

enum class BinaryKind { Add, Sub, Mul };

inline Var binary(Var a, Var b, BinaryKind kind) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool equal = av.shape == bv.shape;
  if (!equal && !is_scalar_like(av) && !is_scalar_like(bv)) {
    throw DimensionError("elementwise op on incompatible shapes " + shape_string(av.shape) + " and " +
                         shape_string(bv.shape));
  }
  const bool a_big = equal || !is_scalar_like(av) || (is_scalar_like(av) && is_scalar_like(bv));
  const Tensor& big = a_big ? av : bv;
  Tensor out(big.shape);
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av.data[av.size() == 1 ? 0 : i];
    const double y = bv.data[bv.size() == 1 ? 0 : i];
    switch (kind) {
      case BinaryKind::Add: out.data[i] = x + y; break;
      case BinaryKind::Sub: out.data[i] = x - y; break;
      case BinaryKind::Mul: out.data[i] = x * y; break;
    }
  }
  const std::uint32_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {a, b}, [ai, bi, kind](Tape& t, std::uint32_t self) {
    const std::vector<double>& g = t.grad(self).data;
    const std::vector<double>& av = t.value(ai).data;
    const std::vector<double>& bv = t.value(bi).data;
    const auto fold = [&](std::uint32_t id, auto term) {
      if (!t.requires_grad(id)) return;
      Tensor& gx = t.grad(id);
      if (gx.size() == 1 && g.size() != 1) {
        double s = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) s += term(i);
        gx.data[0] += s;
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += term(i);
      }
    };
    const auto at = [](const std::vector<double>& v, std::size_t i) { return v[v.size() == 1 ? 0 : i]; };
    switch (kind) {
      case BinaryKind::Add:
        fold(ai, [&](std::size_t i) { return g[i]; });
        fold(bi, [&](std::size_t i) { return g[i]; });
        break;
      case BinaryKind::Sub:
        fold(ai, [&](std::size_t i) { return g[i]; });
        fold(bi, [&](std::size_t i) { return -g[i]; });
        break;
      case BinaryKind::Mul:
        fold(ai, [&](std::size_t i) { return g[i] * at(bv, i); });
        fold(bi, [&](std::size_t i) { return g[i] * at(av, i); });
        break;
    }
  });
}

}  // namespace detail

// ---- linear algebra ---------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  if (av.shape[1] != bv.shape[0]) {
    throw DimensionError("matmul inner extents differ: " + shape_string(av.shape) + " x " + shape_string(bv.shape));
  }
  Tensor out(Shape{av.shape[0], bv.shape[1]});
  detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv);
  const std::uint32_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {a, b}, [ai, bi](Tape& t, std::uint32_t self) {
    const auto g = detail::as_matrix(t.grad(self));
    if (t.requires_grad(ai)) detail::as_matrix(t.grad(ai)).noalias() += g * detail::as_matrix(t.value(bi)).transpose();
    if (t.requires_grad(bi)) detail::as_matrix(t.grad(bi)).noalias() += detail::as_matrix(t.value(ai)).transpose() * g;
  });
}

/// a * b^T, the natural product for [out x in] weight storage.
inline Var matmul_nt(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2(av, "matmul_nt");
  detail::require_rank2(bv, "matmul_nt");
  if (av.shape[1] != bv.shape[1]) {
    throw DimensionError("matmul_nt inner extents differ: " + shape_string(av.shape) + " x " +
                         shape_string(bv.shape) + "^T");
  }
  Tensor out(Shape{av.shape[0], bv.shape[0]});
  detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv).transpose();
  const std::uint32_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {a, b}, [ai, bi](Tape& t, std::uint32_t self) {
    const auto g = detail::as_matrix(t.grad(self));
    if (t.requires_grad(ai)) detail::as_matrix(t.grad(ai)).noalias() += g * detail::as_matrix(t.value(bi));
    if (t.requires_grad(bi)) detail::as_matrix(t.grad(bi)).noalias() += g.transpose() * detail::as_matrix(t.value(ai));
  });
}

inline Var transpose(Var a) {
  Tape& tape = *a.tape();
  const Tensor& av = a.value();
  detail::require_rank2(av, "transpose");
  Tensor out(Shape{av.shape[1], av.shape[0]});
  detail::as_matrix(out) = detail::as_matrix(av).transpose();
  const std::uint32_t ai = a.id();
  return tape.record(std::move(out), {a}, [ai](Tape& t, std::uint32_t self) {
    detail::as_matrix(t.grad(ai)) += detail::as_matrix(t.grad(self)).transpose();
  });
}

// ---- elementwise ------------------------------------------------------------

inline Var add(Var a, Var b) { return detail::binary(a, b, detail::BinaryKind::Add); }
inline Var sub(Var a, Var b) { return detail::binary(a, b, detail::BinaryKind::Sub); }
inline Var mul(Var a, Var b) { return detail::binary(a, b, detail::BinaryKind::Mul); }

inline Var add(Var a, double c) {
  return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
inline Var scale(Var a, double c) {
  return detail::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

/// x[B x n] + bias[n] added to every row.
inline Var add_rowwise(Var x, Var bias) {
  Tape& tape = detail::same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rank() != 1 || xv.cols() != bv.size() || xv.rank() > 2) {
    throw DimensionError("add_rowwise: cannot add bias " + shape_string(bv.shape) + " to " + shape_string(xv.shape));
  }
  Tensor out = xv;
  const std::size_t n = bv.size();
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] += bv.data[c];
  const std::uint32_t xi = x.id(), bi = bias.id();
  return tape.record(std::move(out), {x, bias}, [xi, bi, n](Tape& t, std::uint32_t self) {
    const std::vector<double>& g = t.grad(self).data;
    if (t.requires_grad(xi)) {
      Tensor& gx = t.grad(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g[i];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data[i % n] += g[i];
    }
  });
}

inline Var sigmoid(Var x) {
  return detail::unary(
      x, [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var x) {
  return detail::unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var leaky_relu(Var x, double slope = 0.2) {
  return detail::unary(
      x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

inline Var exp(Var x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var elu(Var x, double alpha = 1.0) {
  return detail::unary(
      x, [alpha](double v) { return v > 0 ? v : alpha * std::expm1(v); },
      [alpha](double v, double y) { return v > 0 ? 1.0 : y + alpha; });
}

/// Gradient passes only where lo <= x <= hi.
inline Var clamp(Var x, double lo, double hi) {
  return detail::unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---- structural -------------------------------------------------------------

/// Max-stabilised softmax along `axis` (rank 1: axis 0; rank 2: 0 or 1).
inline Var softmax(Var x, std::size_t axis = 0) {
  Tape& tape = *x.tape();
  const Tensor& xv = x.value();
  if (xv.rank() == 0 || xv.rank() > 2 || axis >= xv.rank()) {
    throw DimensionError("softmax axis " + std::to_string(axis) + " invalid for " + shape_string(xv.shape));
  }
  const std::size_t rows = xv.rows(), cols = xv.cols();
  const bool along_cols = xv.rank() == 1 || axis == 1;
  const std::size_t lanes = along_cols ? rows : cols;
  const std::size_t len = along_cols ? cols : rows;
  const std::size_t stride = along_cols ? 1 : cols;
  const auto base = [=](std::size_t lane) { return along_cols ? lane * cols : lane; };
  Tensor out(xv.shape);
  for (std::size_t l = 0; l < lanes; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xv.data[base(l) + k * stride]);
    double s = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      const double e = std::exp(xv.data[base(l) + k * stride] - mx);
      out.data[base(l) + k * stride] = e;
      s += e;
    }
    for (std::size_t k = 0; k < len; ++k) out.data[base(l) + k * stride] /= s;
  }
  const std::uint32_t xi = x.id();
  return tape.record(std::move(out), {x}, [=](Tape& t, std::uint32_t self) {
    const std::vector<double> y = t.value(self).data;
    const std::vector<double> g = t.grad(self).data;
    Tensor& gx = t.grad(xi);
    for (std::size_t l = 0; l < lanes; ++l) {
      double dot = 0.0;
      for (std::size_t k = 0; k < len; ++k) dot += g[base(l) + k * stride] * y[base(l) + k * stride];
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t i = base(l) + k * stride;
        gx.data[i] += y[i] * (g[i] - dot);
      }
    }
  });
}

/// Concatenate along `axis`. Rank-1 inputs join end to end; rank-2 inputs
/// join as row blocks (axis 0) or column blocks (axis 1).
inline Var concat(const std::vector<Var>& parts, std::size_t axis = 0) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Tape& tape = *parts.front().tape();
  const std::size_t rank = parts.front().value().rank();
  if (rank == 0 || rank > 2 || axis >= rank) throw DimensionError("concat axis invalid");
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p);
    if (p.value().rank() != rank) throw DimensionError("concat of tensors with different ranks");
  }
  const bool by_cols = rank == 1 || axis == 1;
  const std::size_t rows = parts.front().value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (by_cols && v.rows() != rows) {
      throw DimensionError("concat: row extents differ (" + shape_string(parts.front().value().shape) + " vs " +
                           shape_string(v.shape) + ")");
    }
    if (!by_cols && v.cols() != parts.front().value().cols()) {
      throw DimensionError("concat: column extents differ (" + shape_string(parts.front().value().shape) +
                           " vs " + shape_string(v.shape) + ")");
    }
    widths.push_back(by_cols ? v.cols() : v.rows());
    total += widths.back();
  }
  Tensor out;
  if (rank == 1) {
    out = Tensor(Shape{total});
  } else if (by_cols) {
    out = Tensor(Shape{rows, total});
  } else {
    out = Tensor(Shape{total, parts.front().value().cols()});
  }
  std::vector<std::uint32_t> ids;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    ids.push_back(parts[p].id());
    if (by_cols) {
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(v.data.begin() + r * widths[p], widths[p], out.data.begin() + r * total + offset);
    } else {
      std::copy(v.data.begin(), v.data.end(), out.data.begin() + offset * v.cols());
    }
    offset += widths[p];
  }
  return tape.record(std::move(out), parts, [ids, widths, by_cols, rows, total](Tape& t, std::uint32_t self) {
    const std::vector<double> g = t.grad(self).data;
    std::size_t offset = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (t.requires_grad(ids[p])) {
        Tensor& gp = t.grad(ids[p]);
        if (by_cols) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < widths[p]; ++c) gp.data[r * widths[p] + c] += g[r * total + offset + c];
        } else {
          const std::size_t start = offset * (gp.size() / widths[p]);
          for (std::size_t i = 0; i < gp.size(); ++i) gp.data[i] += g[start + i];
        }
      }
      offset += widths[p];
    }
  });
}

/// Columns [begin, begin + count) of a rank-2 tensor (or a range of a vector).
inline Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  Tape& tape = *x.tape();
  const Tensor& xv = x.value();
  if (xv.rank() == 0 || xv.rank() > 2 || begin + count > xv.cols()) {
    throw DimensionError("slice_cols out of range for " + shape_string(xv.shape));
  }
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out = xv.rank() == 1 ? Tensor(Shape{count}) : Tensor(Shape{rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.data.begin() + r * cols + begin, count, out.data.begin() + r * count);
  const std::uint32_t xi = x.id();
  return tape.record(std::move(out), {x}, [=](Tape& t, std::uint32_t self) {
    const std::vector<double> g = t.grad(self).data;
    Tensor& gx = t.grad(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < count; ++c) gx.data[r * cols + begin + c] += g[r * count + c];
  });
}

/// Same data under a new shape with equal element count.
inline Var reshape(Var x, Shape shape) {
  Tape& tape = *x.tape();
  if (numel(shape) != x.value().size()) {
    throw DimensionError("reshape " + shape_string(x.value().shape) + " -> " + shape_string(shape));
  }
  Tensor out(std::move(shape), x.value().data);
  const std::uint32_t xi = x.id();
  return tape.record(std::move(out), {x}, [xi](Tape& t, std::uint32_t self) {
    const std::vector<double>& g = t.grad(self).data;
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g[i];
  });
}

// ---- reductions and losses --------------------------------------------------

inline Var sum(Var x) {
  Tape& tape = *x.tape();
  double s = 0.0;
  for (double v : x.value().data) s += v;
  const std::uint32_t xi = x.id();
  return tape.record(Tensor::scalar(s), {x}, [xi](Tape& t, std::uint32_t self) {
    const double g = t.grad(self).data[0];
    for (double& v : t.grad(xi).data) v += g;
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Mean of squared differences over every element.
inline Var mse(Var prediction, Var target) {
  Tape& tape = detail::same_tape(prediction, target);
  const Tensor& p = prediction.value();
  const Tensor& y = target.value();
  if (p.shape != y.shape) throw DimensionError("mse shapes differ: " + shape_string(p.shape) + " vs " + shape_string(y.shape));
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p.data[i] - y.data[i]) * (p.data[i] - y.data[i]);
  const double n = static_cast<double>(p.size());
  const std::uint32_t pi = prediction.id(), yi = target.id();
  return tape.record(Tensor::scalar(s / n), {prediction, target}, [pi, yi, n](Tape& t, std::uint32_t self) {
    const double g = t.grad(self).data[0];
    const std::vector<double> p = t.value(pi).data;
    const std::vector<double> y = t.value(yi).data;
    if (t.requires_grad(pi)) {
      Tensor& gp = t.grad(pi);
      for (std::size_t i = 0; i < p.size(); ++i) gp.data[i] += g * 2.0 * (p[i] - y[i]) / n;
    }
    if (t.requires_grad(yi)) {
      Tensor& gy = t.grad(yi);
      for (std::size_t i = 0; i < p.size(); ++i) gy.data[i] -= g * 2.0 * (p[i] - y[i]) / n;
    }
  });
}

/// Mean over rows of -log p[row, target[row]]; `probabilities` is [K] or [B x K].
inline Var cross_entropy(Var probabilities, std::span<const std::size_t> targets) {
  Tape& tape = *probabilities.tape();
  const Tensor& p = probabilities.value();
  if (p.rank() == 0 || p.rank() > 2) throw DimensionError("cross_entropy expects [K] or [B x K]");
  const std::size_t rows = p.rows(), k = p.cols();
  if (targets.size() != rows) throw DimensionError("cross_entropy: one target per row required");
  static constexpr double floor = 1e-300;
  double s = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= k) {
      throw IndexError("class index " + std::to_string(targets[r]) + " out of range for " + std::to_string(k) + " classes");
    }
    s -= std::log(std::max(p.data[r * k + targets[r]], floor));
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  const std::uint32_t pi = probabilities.id();
  return tape.record(Tensor::scalar(s / static_cast<double>(rows)), {probabilities},
                     [pi, tgt, rows, k](Tape& t, std::uint32_t self) {
                       const double g = t.grad(self).data[0];
                       const std::vector<double> p = t.value(pi).data;
                       Tensor& gp = t.grad(pi);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const std::size_t i = r * k + tgt[r];
                         gp.data[i] -= g / (std::max(p[i], floor) * static_cast<double>(rows));
                       }
                     });
}

}  // namespace hdril::ad
