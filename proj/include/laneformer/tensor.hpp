#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "laneformer/error.hpp"

namespace laneformer {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

std::string shape_to_string(const Shape& shape);
Index shape_size(const Shape& shape);

/// Dense row-major float64 tensor. Copies share storage (handle semantics);
/// the gradient buffer lives alongside the values and is filled by
/// GradTape::backward for tensors that require gradients.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor constant(Shape shape, double value);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  Index dim(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
  Index size() const { return static_cast<Index>(impl_->values.size()); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);

  std::span<const double> values() const { return impl_->values; }
  std::span<double> values_mut() { return impl_->values; }

  /// Gradient buffer; empty span if no gradient has been accumulated.
  /// Const on the handle: the buffer is side state owned by the tape
  /// machinery, mutated through captured copies inside adjoint closures.
  std::span<const double> grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Allocates (zeroed) on first use.
  std::span<double> ensure_grad() const;
  void zero_grad() const;

  double at(Index flat) const { return impl_->values[static_cast<std::size_t>(flat)]; }
  double operator()(Index r, Index c) const;
  /// Value of a size-1 tensor.
  double item() const;

  bool all_finite() const;
  /// Throws Error if any value is NaN/Inf; `what` names the producing op.
  void check_finite(const char* what) const;

  /// Identity of the underlying storage; used by tests and the tape.
  const void* id() const { return impl_.get(); }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of primitive applications within one training step.
/// Ops append their adjoint closures while a tape is active; backward()
/// replays them in reverse, which visits every node after all of its
/// consumers (ops always execute after their inputs exist).
///
/// Constructing a GradTape makes it the active tape for the current thread;
/// destruction restores the previous one. Single writer: one step, one tape.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  /// The tape recording on this thread, or nullptr outside any step.
  static GradTape* active();

  void record(std::function<void()> adjoint);

  /// Seeds d(loss)/d(loss) = 1 and replays the tape once, in reverse.
  /// `loss` must be a size-1 tensor produced under this tape.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  GradTape* previous_ = nullptr;
  bool consumed_ = false;
};

}  // namespace laneformer
