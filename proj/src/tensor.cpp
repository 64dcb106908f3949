#include "deepsca/tensor.hpp"

#include "deepsca/error.hpp"

namespace deepsca {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_size(shape)) {
    throw ShapeError("tensor of shape " + shape_string(shape) + " given " +
                     std::to_string(data.size()) + " values");
  }
}

void expect_rank(const Tensor& t, std::size_t expected, const char* what) {
  if (t.rank() != expected) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(expected) +
                     ", got shape " + shape_string(t.shape));
  }
}

}  // namespace deepsca
