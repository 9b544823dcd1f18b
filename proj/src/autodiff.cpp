#include "infusion/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "infusion/errors.hpp"

namespace infusion {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, std::nullopt});
  return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(std::string name, Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, std::move(name)});
  params_.push_back(nodes_.size() - 1);
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backprop backprop) {
  const bool grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](Var v) { return nodes_[v.id].requires_grad; });
  nodes_.push_back(Node{std::move(value), {}, grad ? std::move(backprop) : Backprop{}, grad,
                        std::nullopt});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, Backprop backprop) {
  const bool grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](Var v) { return nodes_[v.id].requires_grad; });
  nodes_.push_back(Node{std::move(value), {}, grad ? std::move(backprop) : Backprop{}, grad,
                        std::nullopt});
  return Var{this, nodes_.size() - 1};
}

void Tape::accumulate(Var v, const Tensor& grad) {
  Node& node = nodes_[v.id];
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = grad;
    return;
  }
  auto& dst = node.grad.values();
  const auto& src = grad.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

GradientMap Tape::backward(Var loss) {
  if (nodes_[loss.id].value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " +
                     shape_string(nodes_[loss.id].value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  if (nodes_[loss.id].requires_grad) {
    nodes_[loss.id].grad = Tensor(nodes_[loss.id].value.shape(), {1.0});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0 || !n.backprop) continue;
      n.backprop(*this, n.grad);
    }
  }
  GradientMap out;
  for (std::size_t id : params_) {
    Node& n = nodes_[id];
    out[*n.param_name] = n.grad.size() ? n.grad : Tensor(n.value.shape());
  }
  return out;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

Tensor elementwise(const Tensor& a, auto&& f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var matmul(Var a, Var b) {
  Tensor out;
  kernels::matmul(a.value(), b.value(), out);
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor ga;
      kernels::matmul_nt(g, b.value(), ga);
      t.accumulate(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor gb;
      kernels::matmul_tn(a.value(), g, gb);
      t.accumulate(b, gb);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  Tensor out;
  kernels::matmul_nt(a.value(), b.value(), out);
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor ga;
      kernels::matmul(g, b.value(), ga);
      t.accumulate(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor gb;
      kernels::matmul_tn(g, a.value(), gb);
      t.accumulate(b, gb);
    }
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) t.accumulate(b, elementwise(g, [](double x) { return -x; }));
  });
}

Var hadamard(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "hadamard");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= b.value()[i];
      t.accumulate(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= a.value()[i];
      t.accumulate(b, gb);
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = elementwise(a.value(), [s](double x) { return x * s; });
  return a.tape->record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    t.accumulate(a, elementwise(g, [s](double x) { return x * s; }));
  });
}

Var add_row_broadcast(Var a, Var row) {
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  if (rv.rank() != 2 || rv.rows() != 1 || rv.cols() != av.cols()) {
    throw ShapeError("add_row_broadcast: row " + shape_string(rv.shape()) + " for matrix " +
                     shape_string(av.shape()));
  }
  Tensor out = av;
  const std::size_t n = av.rows(), m = av.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) += rv[j];
  return a.tape->record(std::move(out), {a, row}, [a, row](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.requires_grad(row)) {
      Tensor gr = Tensor::zeros(1, g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j);
      t.accumulate(row, gr);
    }
  });
}

Var add_to_row(Var a, Var row_vec, std::size_t r) {
  const Tensor& av = a.value();
  const Tensor& rv = row_vec.value();
  if (rv.size() != av.cols() || r >= av.rows()) {
    throw ShapeError("add_to_row: vector " + shape_string(rv.shape()) + " at row " +
                     std::to_string(r) + " of " + shape_string(av.shape()));
  }
  Tensor out = av;
  auto dst = out.row_span(r);
  for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += rv[j];
  return a.tape->record(std::move(out), {a, row_vec}, [a, row_vec, r](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.requires_grad(row_vec)) {
      auto src = g.row_span(r);
      t.accumulate(row_vec, Tensor(row_vec.value().shape(), {src.begin(), src.end()}));
    }
  });
}

Var silu(Var a) {
  Tensor out = elementwise(a.value(), [](double x) { return x * sigmoid(x); });
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor ga = g;
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double s = sigmoid(x[i]);
      ga[i] *= s * (1.0 + x[i] * (1.0 - s));
    }
    t.accumulate(a, ga);
  });
}

Var tanh(Var a) {
  Tensor out = elementwise(a.value(), [](double x) { return std::tanh(x); });
  const std::size_t self = a.tape->size();
  return a.tape->record(std::move(out), {a}, [a, self](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(Var{&t, self});
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 1.0 - y[i] * y[i];
    t.accumulate(a, ga);
  });
}

Var softmax_rows(Var a) {
  Tensor out;
  kernels::softmax_rows(a.value(), out);
  const std::size_t self = a.tape->size();
  return a.tape->record(std::move(out), {a}, [a, self](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(Var{&t, self});
    Tensor ga(y.shape());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) ga(i, j) = y(i, j) * (g(i, j) - dot);
    }
    t.accumulate(a, ga);
  });
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a.value().size()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as [" +
                     std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
  Tensor out({rows, cols}, a.value().values());
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    t.accumulate(a, Tensor(a.value().shape(), g.values()));
  });
}

Var concat_cols(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows() != bv.rows()) {
    throw ShapeError("concat_cols: " + shape_string(av.shape()) + " | " + shape_string(bv.shape()));
  }
  const std::size_t n = av.rows(), ma = av.cols(), mb = bv.cols();
  Tensor out = Tensor::zeros(n, ma + mb);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.row_span(i).begin(), ma, out.row_span(i).begin());
    std::copy_n(bv.row_span(i).begin(), mb, out.row_span(i).begin() + ma);
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, ma, mb](Tape& t, const Tensor& g) {
    const std::size_t n = g.rows();
    if (t.requires_grad(a)) {
      Tensor ga = Tensor::zeros(n, ma);
      for (std::size_t i = 0; i < n; ++i) std::copy_n(g.row_span(i).begin(), ma, ga.row_span(i).begin());
      t.accumulate(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor gb = Tensor::zeros(n, mb);
      for (std::size_t i = 0; i < n; ++i)
        std::copy_n(g.row_span(i).begin() + ma, mb, gb.row_span(i).begin());
      t.accumulate(b, gb);
    }
  });
}

Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no rows");
  const std::size_t m = rows.front().value().size();
  Tensor out = Tensor::zeros(rows.size(), m);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Tensor& r = rows[i].value();
    if (r.size() != m) throw ShapeError("stack_rows: ragged rows");
    std::copy(r.values().begin(), r.values().end(), out.row_span(i).begin());
  }
  return rows.front().tape->record(std::move(out), rows, [rows](Tape& t, const Tensor& g) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!t.requires_grad(rows[i])) continue;
      auto src = g.row_span(i);
      t.accumulate(rows[i], Tensor(rows[i].value().shape(), {src.begin(), src.end()}));
    }
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    Tensor ga(a.value().shape());
    std::fill(ga.values().begin(), ga.values().end(), g.item());
    t.accumulate(a, ga);
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var sum_squares(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v * v;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    const double k = 2.0 * g.item();
    t.accumulate(a, elementwise(a.value(), [k](double x) { return k * x; }));
  });
}

Var mse(Var prediction, Var target) {
  const double n = static_cast<double>(prediction.value().size());
  return scale(sum_squares(sub(prediction, target)), 1.0 / n);
}

GradientMap finite_diff_grad(const std::function<double(const NamedTensors&)>& f,
                             const NamedTensors& params, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_grad: step size must be positive");
  GradientMap out;
  NamedTensors probe = params;
  for (const auto& [name, p] : params) {
    Tensor g(p.shape());
    Tensor& slot = probe.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      slot[i] = orig + h;
      const double fp = f(probe);
      slot[i] = orig - h;
      const double fm = f(probe);
      slot[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("finite_diff_grad: non-finite evaluation at " + name + "[" +
                           std::to_string(i) + "]");
      }
      g[i] = (fp - fm) / (2.0 * h);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

}  // namespace infusion
