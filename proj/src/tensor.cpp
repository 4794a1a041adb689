#include "laneformer/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <sstream>
#include <utility>

namespace laneformer {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

static void validate_shape(const Shape& shape) {
  for (Index d : shape) {
    if (d <= 0) {
      throw ShapeError("non-positive extent in shape " + shape_to_string(shape));
    }
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  validate_shape(shape);
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->values.assign(static_cast<std::size_t>(shape_size(shape)), 0.0);
  t.impl_->shape = std::move(shape);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::constant(Shape shape, double value) {
  Tensor t = zeros(std::move(shape));
  for (double& v : t.impl_->values) v = value;
  return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape);
  if (static_cast<Index>(values.size()) != shape_size(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not fill shape " + shape_to_string(shape));
  }
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->values = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value) { return from_values({1}, {value}); }

void Tensor::set_requires_grad(bool on) { impl_->requires_grad = on; }

std::span<double> Tensor::ensure_grad() const {
  if (impl_->grad.empty()) {
    impl_->grad.assign(impl_->values.size(), 0.0);
  }
  return impl_->grad;
}

void Tensor::zero_grad() const {
  for (double& g : impl_->grad) g = 0.0;
}

double Tensor::operator()(Index r, Index c) const {
  return impl_->values[static_cast<std::size_t>(r * impl_->shape[1] + c)];
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  }
  return impl_->values[0];
}

bool Tensor::all_finite() const {
  Eigen::Map<const Eigen::ArrayXd> a(impl_->values.data(),
                                     static_cast<Eigen::Index>(impl_->values.size()));
  return a.allFinite();
}

void Tensor::check_finite(const char* what) const {
  if (!all_finite()) {
    throw NumericError(std::string(what) + " produced a non-finite value");
  }
}

namespace {
thread_local GradTape* g_active_tape = nullptr;
}

GradTape::GradTape() {
  previous_ = g_active_tape;
  g_active_tape = this;
}

GradTape::~GradTape() { g_active_tape = previous_; }

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::record(std::function<void()> adjoint) {
  nodes_.push_back(std::move(adjoint));
}

void GradTape::backward(const Tensor& loss) {
  if (consumed_) {
    throw Error("GradTape::backward called twice on one tape");
  }
  if (loss.size() != 1) {
    throw ShapeError("backward requires a size-1 loss, got " +
                     shape_to_string(loss.shape()));
  }
  consumed_ = true;
  Tensor seed = loss;
  seed.ensure_grad()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    (*it)();
  }
}

}  // namespace laneformer
