#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rcbm/tensorcore/memory_meter.hpp"

namespace rcbm {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

struct TensorImpl {
  Shape shape;
  Buffer values;
  Buffer grad;  // size 0 until the first gradient arrives
  bool requires_grad = false;
  bool leaf = true;
};

// Shared handle to a dense f64 array. Copies alias the same storage; use
// clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  /// Throws ShapeError on size mismatch and NumericError on non-finite input.
  static Tensor from(Shape shape, std::span<const double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  /// Output of an op. Values are filled in by the caller.
  static Tensor intermediate(Shape shape, bool requires_grad);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t size() const { return impl_->values.size(); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return {impl_->values.data(), impl_->values.size()}; }
  std::span<double> mutable_values() { return {impl_->values.data(), impl_->values.size()}; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->leaf; }

  bool has_grad() const { return impl_->grad.size() != 0; }
  std::span<const double> grad() const { return {impl_->grad.data(), impl_->grad.size()}; }
  std::span<double> mutable_grad() { return {impl_->grad.data(), impl_->grad.size()}; }
  /// Gradient, or zeros when nothing reached this tensor.
  std::vector<double> grad_or_zero() const;
  /// Allocates (if needed) and zeroes the gradient buffer.
  void zero_grad();
  void clear_grad();
  void accumulate_grad(std::span<const double> delta);

  /// Independent leaf copy with the same values and requires_grad flag.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

bool all_finite(std::span<const double> values);

}  // namespace rcbm
