#include "octc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace octc {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_size(shape_) != values_.size()) {
    throw ShapeError("tensor shape " + shape_string(shape_) + " does not match " +
                     std::to_string(values_.size()) + " values");
  }
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.front().size() : 0;
  std::vector<double> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged rows");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(v));
}

double Tensor::item() const {
  if (values_.size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_string(shape_));
  }
  return values_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), values_);
}

Tensor Tensor::slice_rows(std::size_t start, std::size_t count) const {
  if (start + count > rows()) throw ShapeError("row slice out of range");
  const std::size_t c = cols();
  std::vector<double> v(values_.begin() + static_cast<std::ptrdiff_t>(start * c),
                        values_.begin() + static_cast<std::ptrdiff_t>((start + count) * c));
  return Tensor({count, c}, std::move(v));
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace octc
