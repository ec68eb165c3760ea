#include "octc/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace octc {

double lr_at_step(std::size_t step, std::size_t warmup, std::size_t total, double peak) {
  if (step > total) {
    throw std::out_of_range("lr_at_step: step " + std::to_string(step) + " beyond total " + std::to_string(total));
  }
  if (warmup >= total) throw std::invalid_argument("lr_at_step: warmup must be below total");
  if (step <= warmup) {
    return warmup == 0 ? peak : peak * static_cast<double>(step) / static_cast<double>(warmup);
  }
  return peak * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

void adam_step(ParameterSet& params, const Gradients& grads, AdamState& state, double lr,
               const AdamHyper& hyper) {
  for (const auto& [name, g] : grads) {
    const auto p = params.find(name);
    if (p == params.end()) throw std::invalid_argument("gradient for unknown parameter " + name);
    if (p->second.shape() != g.shape()) throw ShapeError("gradient shape mismatch for " + name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw std::runtime_error("non-finite gradient in " + name + " at index " + std::to_string(i) +
                                 " (step " + std::to_string(state.step + 1) + ")");
      }
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [mi, m_new] = state.m.try_emplace(name, g.shape(), 0.0);
    auto [vi, v_new] = state.v.try_emplace(name, g.shape(), 0.0);
    Tensor& m = mi->second;
    Tensor& v = vi->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
  }
}

double global_norm(const Gradients& grads) {
  double s = 0.0;
  for (const auto& [_, g] : grads)
    for (double v : g.values()) s += v * v;
  return std::sqrt(s);
}

double clip_global_norm(Gradients& grads, double max_norm) {
  const double n = global_norm(grads);
  if (n > max_norm && n > 0.0) {
    const double f = max_norm / n;
    for (auto& [_, g] : grads)
      for (double& v : g.values()) v *= f;
  }
  return n;
}

}  // namespace octc
