#pragma once

// Central finite-difference oracle shared by the unit tests.

#include <cmath>
#include <functional>
#include <vector>

#include "nvs/tensor.hpp"

namespace nvs::testing {

using Fn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline double eval_scalar(const Fn& f, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

/// Largest per-input relative error ||analytic - numeric|| / max(||analytic||, ||numeric||).
inline double gradcheck(const Fn& f, std::vector<Tensor<double>> inputs, double h = 1e-4) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.param(t));
  tape.backward(f(tape, vars));
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor<double> analytic = tape.grad(vars[i]);
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double saved = inputs[i][j];
      inputs[i][j] = saved + h;
      const double up = eval_scalar(f, inputs);
      inputs[i][j] = saved - h;
      const double down = eval_scalar(f, inputs);
      inputs[i][j] = saved;
      const double numeric = (up - down) / (2.0 * h);
      diff2 += (analytic[j] - numeric) * (analytic[j] - numeric);
      a2 += analytic[j] * analytic[j];
      n2 += numeric * numeric;
    }
    const double denom = std::sqrt(std::max({a2, n2, 1e-24}));
    worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

/// Contracts a tensor-valued output to a scalar with fixed random weights so
/// every output element contributes to the checked gradient.
inline Var<double> project(Tape<double>& tape, Var<double> out, std::uint64_t seed) {
  Rng rng(seed);
  auto w = tape.constant(Tensor<double>::randn(out.shape(), rng));
  return ops::sum(ops::mul(out, w));
}

}  // namespace nvs::testing
