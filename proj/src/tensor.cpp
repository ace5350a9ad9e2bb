#include "switchhurdle/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>

namespace switchhurdle {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

static void validate_shape(const Shape& s) {
  if (s.empty()) throw DimensionError("tensor shape must have at least one dim");
  for (auto d : s) {
    if (d == 0) throw DimensionError("tensor dims must be >= 1, got " + shape_string(s));
  }
}

Tensor::Tensor(Shape s) : shape(std::move(s)) {
  validate_shape(shape);
  values.assign(shape_size(shape), 0.0);
}

Tensor::Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
  validate_shape(shape);
  if (values.size() != shape_size(shape)) {
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_string(shape));
  }
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)) {
  validate_shape(shape);
  values.assign(shape_size(shape), fill);
}

Tensor Tensor::vector(std::vector<double> v) {
  Shape s{v.size()};
  return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor({rows, cols}, std::move(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t r = rows.size();
  std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(v));
}

void Tensor::fill(double v) { std::fill(values.begin(), values.end(), v); }

void Tensor::add_inplace(const Tensor& other) {
  if (other.values.size() != values.size()) {
    throw DimensionError("add_inplace: " + shape_string(shape) + " vs " + shape_string(other.shape));
  }
  for (std::size_t i = 0; i < values.size(); ++i) values[i] += other.values[i];
}

}  // namespace switchhurdle
