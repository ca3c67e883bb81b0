#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace gmflow {

// Dense row-major tensor of doubles. The autodiff graph only uses rank-2
// tensors (vectors are 1 x n, scalars 1 x 1), but the container itself
// carries an arbitrary shape so checkpoints can hold anything.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor row(std::span<const double> values);
  static Tensor scalar(double v);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-2 view; a rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row_span(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_string() const;

  bool operator==(const Tensor& other) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

}  // namespace gmflow
