#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace switchhurdle {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. Rank is arbitrary; most ops view a
/// tensor as a matrix of rows() x cols() where cols() is the last dim.
struct Tensor {
  Shape shape;
  std::vector<double> values;

  Tensor() = default;
  explicit Tensor(Shape s);
  Tensor(Shape s, std::vector<double> v);
  Tensor(Shape s, double fill);

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t size() const { return values.size(); }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  void fill(double v);
  void add_inplace(const Tensor& other);
};

}  // namespace switchhurdle
