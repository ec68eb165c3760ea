#pragma once

#include <cstddef>

#include "octc/tensor.hpp"

namespace octc {

/// Two-segment piecewise-linear schedule: 0 -> peak over [0, warmup], then
/// peak -> 0 over [warmup, total].
double lr_at_step(std::size_t step, std::size_t warmup, std::size_t total, double peak);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

struct AdamState {
  std::size_t step = 0;
  ParameterSet m;
  ParameterSet v;
};

/// Bias-corrected Adam update in place. Throws on non-finite gradients,
/// naming the offending parameter.
void adam_step(ParameterSet& params, const Gradients& grads, AdamState& state, double lr,
               const AdamHyper& hyper = {});

double global_norm(const Gradients& grads);
/// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
double clip_global_norm(Gradients& grads, double max_norm);

}  // namespace octc
