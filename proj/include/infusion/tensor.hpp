#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace infusion {

// Dense row-major array of doubles. Rank 0 is a scalar, rank 2 a matrix.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(std::size_t rows, std::size_t cols);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor row(std::span<const double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const;
  std::span<const double> row_span(std::size_t r) const;
  std::span<double> row_span(std::size_t r);

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  // Bitwise equality of shape and every value.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

// Named parameter collection. Ordered so iteration is deterministic.
using NamedTensors = std::map<std::string, Tensor>;
using GradientMap = NamedTensors;

// Plain (non-recorded) kernels shared by the tape and the inference paths.
namespace kernels {

// out = a * b, accumulating over the inner index in increasing order.
void matmul(const Tensor& a, const Tensor& b, Tensor& out);
// out = a * b^T
void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out);
// out = a^T * b
void matmul_tn(const Tensor& a, const Tensor& b, Tensor& out);
void softmax_rows(const Tensor& m, Tensor& out);

}  // namespace kernels

Tensor softmax_rows(const Tensor& m);

}  // namespace infusion
