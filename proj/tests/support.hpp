#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "infusion/autodiff.hpp"
#include "infusion/rng.hpp"

namespace infusion::testing {

inline Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Tensor t = Tensor::zeros(rows, cols);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

// |a - b| / max(|a|, |b|), with denominators below `floor` clamped to it.
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(const GradientMap& a, const GradientMap& b) {
  double worst = 0.0;
  for (const auto& [name, ga] : a) {
    const Tensor& gb = b.at(name);
    for (std::size_t i = 0; i < ga.size(); ++i) worst = std::max(worst, relative_error(ga[i], gb[i]));
  }
  return worst;
}

// A small random graph: a dense layer with a random smooth activation, an
// attention block over a random token matrix, and an MSE head. Sizes vary
// with the seed; parameter count stays under 500.
struct RandomGraph {
  std::uint64_t seed = 0;
  NamedTensors params;
  Tensor x, tokens, target;
  bool use_tanh = false;

  explicit RandomGraph(std::uint64_t s) : seed(s) {
    Rng rng(s);
    const auto in = static_cast<std::size_t>(rng.uniform_int(2, 4));
    const auto hidden = static_cast<std::size_t>(rng.uniform_int(3, 6));
    const auto n = static_cast<std::size_t>(rng.uniform_int(2, 4));
    const auto len = static_cast<std::size_t>(rng.uniform_int(1, 4));
    const auto out = static_cast<std::size_t>(rng.uniform_int(1, 3));
    use_tanh = rng.bernoulli(0.5);
    params["w1"] = random_matrix(rng, in, hidden, 0.7);
    params["b1"] = random_matrix(rng, 1, hidden, 0.3);
    params["wq"] = random_matrix(rng, hidden, hidden, 0.7);
    params["wk"] = random_matrix(rng, hidden, hidden, 0.7);
    params["wv"] = random_matrix(rng, hidden, hidden, 0.7);
    params["w2"] = random_matrix(rng, hidden, out, 0.7);
    x = random_matrix(rng, n, in);
    tokens = random_matrix(rng, len, hidden);
    target = random_matrix(rng, n, out);
  }

  std::size_t parameter_count() const {
    std::size_t c = 0;
    for (const auto& [k, v] : params) c += v.size();
    return c;
  }

  Var build(Tape& tape, const NamedTensors& p, bool as_parameters) const {
    auto bind = [&](const char* name) {
      return as_parameters ? tape.parameter(name, p.at(name)) : tape.constant(p.at(name));
    };
    const Var w1 = bind("w1"), b1 = bind("b1"), wq = bind("wq"), wk = bind("wk"), wv = bind("wv"),
              w2 = bind("w2");
    Var h = add_row_broadcast(matmul(tape.constant(x), w1), b1);
    h = use_tanh ? tanh(h) : silu(h);
    const Var e = tape.constant(tokens);
    const Var q = matmul(h, wq);
    const Var k = matmul(e, wk);
    const Var v = matmul(e, wv);
    const double inv = 1.0 / std::sqrt(static_cast<double>(wq.value().cols()));
    const Var m = softmax_rows(scale(matmul_nt(q, k), inv));
    h = add(h, matmul(m, v));
    return mse(matmul(h, w2), tape.constant(target));
  }

  // Largest relative gap between reverse mode and central differences.
  double check(double h = 1e-5) const {
    Tape tape;
    const GradientMap analytic = tape.backward(build(tape, params, true));
    const GradientMap numeric = finite_diff_grad(
        [&](const NamedTensors& p) {
          Tape t;
          return build(t, p, false).value().item();
        },
        params, h);
    return max_relative_error(analytic, numeric);
  }
};

}  // namespace infusion::testing
