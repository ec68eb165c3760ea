#pragma once

#include <cstdint>
#include <functional>

#include "octc/tensor.hpp"

namespace octc {

enum class FiniteDifference {
  Central,      // (f(x+h) - f(x-h)) / 2h, error O(h^2)
  FivePoint,    // fourth-order central stencil, error O(h^4)
};

struct GradCheckOptions {
  double eps = 1e-5;
  FiniteDifference stencil = FiniteDifference::Central;
  /// Coordinates sampled per parameter tensor (all of them when the tensor is smaller).
  std::size_t coords_per_tensor = 8;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

/// Compares `analytic` against central differences of `f` on sampled
/// coordinates. Relative error is |a - n| / max(1e-8, |n|). The five-point
/// stencil tolerates a larger step, which keeps rounding noise in f from
/// swamping small gradients when f itself is large.
GradCheckResult finite_difference_check(const std::function<double(const ParameterSet&)>& f,
                                        const ParameterSet& params, const Gradients& analytic,
                                        const GradCheckOptions& options = {});

}  // namespace octc
