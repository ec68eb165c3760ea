#pragma once

#include <functional>
#include <random>

#include "octc/autodiff.hpp"
#include "octc/gradcheck.hpp"
#include "octc/ops.hpp"

namespace octc::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = n(rng);
  return t;
}

/// Log-softmax of a random grid: a valid T x V log-probability matrix.
inline Tensor random_log_probs(std::size_t T, std::size_t V, std::mt19937_64& rng, double scale = 1.5) {
  return log_softmax_lastdim(random_tensor({T, V}, rng, scale));
}

/// Gradient check of a scalar function of named inputs.
inline GradCheckResult check_graph(const ParameterSet& inputs, const std::function<Var(Tape&)>& build,
                                   std::size_t coords = 64) {
  Tape tape(inputs);
  Gradients g = tape.backward(build(tape));
  auto f = [&](const ParameterSet& p) {
    Tape t(p);
    return build(t).value().item();
  };
  GradCheckOptions opt;
  opt.coords_per_tensor = coords;
  return finite_difference_check(f, inputs, g, opt);
}

/// Contracts an arbitrary-shaped output with fixed random weights so every
/// output coordinate reaches the scalar.
inline Var contract(Tape& tape, const Var& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Var w = tape.constant(random_tensor(y.shape(), rng));
  return sum_all(mul(y, w));
}


/// Every token sequence over symbols 1..V-1 of length <= max_len.
inline std::vector<std::vector<int>> all_targets(int V, std::size_t max_len) {
  std::vector<std::vector<int>> out{{}};
  std::vector<std::vector<int>> frontier{{}};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<std::vector<int>> next;
    for (const auto& p : frontier)
      for (int s = 1; s < V; ++s) {
        auto q = p;
        q.push_back(s);
        next.push_back(q);
      }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

}  // namespace octc::testing
