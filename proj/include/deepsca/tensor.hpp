#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace deepsca {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. Feature maps are laid out
/// [batch, channels, time]; dense activations [batch, features].
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {}
  Tensor(Shape s, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape[i]; }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  const double& at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  const double& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * shape[1] + j) * shape[2] + k];
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Throws ShapeError unless `t` has exactly `expected` dimensions.
void expect_rank(const Tensor& t, std::size_t expected, const char* what);

}  // namespace deepsca
