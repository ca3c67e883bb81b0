#include "gmflow/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "gmflow/errors.hpp"

namespace gmflow {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (product(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string());
  }
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, double fill) {
  return Tensor({rows, cols}, fill);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::row(std::span<const double> values) {
  return Tensor({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

Tensor Tensor::scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> data;
  std::size_t cols = rows.size() == 0 ? 0 : rows.begin()->size();
  for (const auto& r : rows) {
    if (r.size() != cols) throw ShapeError("ragged rows in Tensor::from_rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() == 2) return shape_[0];
  throw ShapeError("rank-2 view requested on tensor of shape " + shape_string());
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() == 2) return shape_[1];
  throw ShapeError("rank-2 view requested on tensor of shape " + shape_string());
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << 'x';
    os << shape_[i];
  }
  os << ']';
  return os.str();
}

}  // namespace gmflow
