#include "rcbm/tensorcore/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "rcbm/tensorcore/error.hpp"

namespace rcbm {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
  }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->values = Buffer(shape_size(shape));
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::span<const double> values, bool requires_grad) {
  check_shape(shape);
  if (shape_size(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_string(shape) + " needs " +
                     std::to_string(shape_size(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  if (!all_finite(values)) throw NumericError("tensor values must be finite");
  Tensor t = zeros(std::move(shape), requires_grad);
  std::copy(values.begin(), values.end(), t.impl_->values.begin());
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, std::span<const double>(&value, 1), requires_grad);
}

Tensor Tensor::intermediate(Shape shape, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  t.impl_->leaf = false;
  return t;
}

std::size_t Tensor::rows() const { return impl_->shape.front(); }

std::size_t Tensor::cols() const {
  return impl_->shape.size() >= 2 ? impl_->shape[1] : 1;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return impl_->values[0];
}

std::vector<double> Tensor::grad_or_zero() const {
  if (!has_grad()) return std::vector<double>(size(), 0.0);
  return {impl_->grad.begin(), impl_->grad.end()};
}

void Tensor::zero_grad() {
  if (impl_->grad.size() != size()) {
    impl_->grad = Buffer(size());
  } else {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
}

void Tensor::clear_grad() { impl_->grad = Buffer(); }

void Tensor::accumulate_grad(std::span<const double> delta) {
  if (delta.size() != size()) {
    throw ShapeError("gradient of size " + std::to_string(delta.size()) + " for tensor " +
                     shape_string(shape()));
  }
  if (!has_grad()) {
    impl_->grad = Buffer(size());
    std::copy(delta.begin(), delta.end(), impl_->grad.begin());
    return;
  }
  double* g = impl_->grad.data();
  for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

Tensor Tensor::clone() const {
  Tensor copy = zeros(shape(), requires_grad());
  std::copy(impl_->values.begin(), impl_->values.end(), copy.impl_->values.begin());
  return copy;
}

}  // namespace rcbm
