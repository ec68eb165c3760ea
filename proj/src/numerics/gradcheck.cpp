#include "octc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace octc {

GradCheckResult finite_difference_check(const std::function<double(const ParameterSet&)>& f,
                                        const ParameterSet& params, const Gradients& analytic,
                                        const GradCheckOptions& options) {
  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  ParameterSet work = params;
  for (auto& [name, tensor] : work) {
    const auto g = analytic.find(name);
    if (g == analytic.end()) throw std::invalid_argument("no analytic gradient for " + name);
    if (g->second.shape() != tensor.shape()) {
      throw ShapeError("gradient shape mismatch for " + name);
    }
    std::vector<std::size_t> coords(tensor.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > options.coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      const double orig = tensor[idx];
      auto at = [&](double step) {
        tensor[idx] = orig + step;
        return f(work);
      };
      const double h = options.eps;
      double numeric = 0.0;
      if (options.stencil == FiniteDifference::Central) {
        numeric = (at(h) - at(-h)) / (2.0 * h);
      } else {
        numeric = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
      }
      tensor[idx] = orig;
      const double a = g->second[idx];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(numeric));
      ++result.coords_checked;
      if (rel > result.max_rel_error || result.coords_checked == 1) {
        result.max_rel_error = std::max(result.max_rel_error, rel);
        if (rel >= result.max_rel_error) {
          result.worst_param = name;
          result.worst_index = idx;
          result.worst_analytic = a;
          result.worst_numeric = numeric;
        }
      }
    }
  }
  return result;
}

}  // namespace octc
