#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hdril/errors.hpp"

namespace hdril::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major block of doubles. Rank 0 is a scalar.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(numel(shape), fill) {}

  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_string(shape));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
  }

  std::size_t rank() const { return shape.size(); }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty() && !shape.empty(); }

  // Rank-2 view; a rank-1 tensor reads as a single row.
  std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  double item() const {
    if (data.size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape));
    return data[0];
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

}  // namespace hdril::ad
