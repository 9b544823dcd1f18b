#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include "infusion/tensor.hpp"

namespace infusion {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const std::vector<std::size_t>& shape() const { return value().shape(); }
};

// Dynamic per-evaluation record of tensor operations for reverse-mode
// differentiation. Single-threaded; build one per loss evaluation.
class Tape {
 public:
  using Backprop = std::function<void(Tape&, const Tensor& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf whose gradient is reported by backward() under `name`.
  Var parameter(std::string name, Tensor value);

  // Used by op implementations.
  // Gradient flow is recorded only when some input requires it.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backprop backprop);
  Var record(Tensor value, const std::vector<Var>& inputs, Backprop backprop);
  void accumulate(Var v, const Tensor& grad);
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  const Tensor& value(Var v) const { return nodes_[v.id].value; }

  // Exact reverse-mode gradients of a scalar loss for every registered
  // parameter; parameters the loss does not reach get zeros.
  GradientMap backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backprop backprop;
    bool requires_grad = false;
    std::optional<std::string> param_name;
  };

  std::vector<Node> nodes_;
  std::vector<std::size_t> params_;
};

// Recorded operations. All operate on rank-2 tensors unless stated.
Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
// Adds a 1 x cols row to every row of a.
Var add_row_broadcast(Var a, Var row);
// a with `row_vec` (1 x cols) added to row `r` only.
Var add_to_row(Var a, Var row_vec, std::size_t r);
Var silu(Var a);
Var tanh(Var a);
Var softmax_rows(Var a);
// Rank-preserving reinterpretation of the row-major buffer.
Var reshape(Var a, std::size_t rows, std::size_t cols);
Var concat_cols(Var a, Var b);
// Stacks 1 x cols rows into a matrix.
Var stack_rows(const std::vector<Var>& rows);
Var sum(Var a);
Var mean(Var a);
// Sum of squares of all entries, rank 0.
Var sum_squares(Var a);
Var mse(Var prediction, Var target);

// Central-difference gradient of f at params: (f(p+h e_i) - f(p-h e_i)) / 2h.
GradientMap finite_diff_grad(const std::function<double(const NamedTensors&)>& f,
                             const NamedTensors& params, double h);

}  // namespace infusion
