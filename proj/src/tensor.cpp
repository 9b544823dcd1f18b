#include "infusion/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>

#include "infusion/errors.hpp"

namespace infusion {

namespace {

std::size_t element_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected rank-2 tensor, got " + shape_string(t.shape()));
  }
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(element_count(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::row(std::span<const double> values) {
  return Tensor({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

std::size_t Tensor::rows() const {
  require_rank2(*this, "rows");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require_rank2(*this, "cols");
  return shape_[1];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() on non-scalar tensor " + shape_string(shape_));
  }
  return data_[0];
}

std::span<const double> Tensor::row_span(std::size_t r) const {
  return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]);
}

std::span<double> Tensor::row_span(std::size_t r) {
  return std::span<double>(data_).subspan(r * shape_[1], shape_[1]);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape_ == b.shape_ &&
         (a.data_.empty() ||
          std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(double)) == 0);
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace kernels {

void matmul(const Tensor& a, const Tensor& b, Tensor& out) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  if (out.shape() != std::vector<std::size_t>{n, m}) out = Tensor::zeros(n, m);
  else std::fill(out.values().begin(), out.values().end(), 0.0);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = po + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = pa[i * k + p];
      const double* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += s * brow[j];
    }
  }
}

void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: " + shape_string(a.shape()) + " * T" + shape_string(b.shape()));
  }
  if (out.shape() != std::vector<std::size_t>{n, m}) out = Tensor::zeros(n, m);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += pa[i * k + p] * pb[j * k + p];
      po[i * m + j] = acc;
    }
  }
}

void matmul_tn(const Tensor& a, const Tensor& b, Tensor& out) {
  require_rank2(a, "matmul_tn");
  require_rank2(b, "matmul_tn");
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul_tn: T" + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  if (out.shape() != std::vector<std::size_t>{n, m}) out = Tensor::zeros(n, m);
  else std::fill(out.values().begin(), out.values().end(), 0.0);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values().data();
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < n; ++i) {
      const double s = pa[p * n + i];
      if (s == 0.0) continue;
      double* orow = po + i * m;
      const double* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += s * brow[j];
    }
  }
}

void softmax_rows(const Tensor& m, Tensor& out) {
  require_rank2(m, "softmax_rows");
  const std::size_t rows = m.rows(), cols = m.cols();
  if (!out.same_shape(m)) out = Tensor::zeros(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = m.row_span(r);
    auto o = out.row_span(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    const double inv = 1.0 / total;
    for (std::size_t c = 0; c < cols; ++c) o[c] *= inv;
  }
}

}  // namespace kernels

Tensor softmax_rows(const Tensor& m) {
  Tensor out;
  kernels::softmax_rows(m, out);
  return out;
}

}  // namespace infusion
