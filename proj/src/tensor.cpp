#include "atseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "atseg/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace atseg {

#if defined(__GLIBC__)
namespace {
// Activation buffers are large and short-lived; serve them from the heap
// instead of a fresh mapping per tensor.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  return true;
}();
}  // namespace
#endif

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw StructuralError("tensor shape " + shape_string(shape) + " does not match " +
                          std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) throw StructuralError("item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

double& Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  const Shape& s = impl_->shape;
  return impl_->data[((n * s[1] + c) * s[2] + h) * s[3] + w];
}

double Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
  const Shape& s = impl_->shape;
  return impl_->data[((n * s[1] + c) * s[2] + h) * s[3] + w];
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

Tensor Tensor::clone() const { return from(impl_->shape, impl_->data, false); }

bool Tensor::all_finite() const {
  return std::all_of(impl_->data.begin(), impl_->data.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tape::make_output(Shape shape, std::initializer_list<const Tensor*> inputs) const {
  bool needs = false;
  if (recording_) {
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  }
  Tensor out = Tensor::zeros(std::move(shape), needs);
  out.impl_->leaf = false;
  return out;
}

void Tape::record(std::string name, const Tensor& out, BackwardFn fn) {
  if (!recording_ || !out.requires_grad()) return;
  records_.push_back(Record{std::move(name), out.impl(), std::move(fn)});
}

std::size_t Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw StructuralError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw StructuralError("backward() on a loss that does not require a gradient");
  }
  for (auto& r : records_) r.out->grad.assign(r.out->data.size(), 0.0);

  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;

  std::size_t visited = 0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    it->fn(it->out->grad);
    ++visited;
  }
  return visited;
}

std::string Tape::first_non_finite() const {
  for (const auto& r : records_) {
    for (double v : r.out->data) {
      if (!std::isfinite(v)) return r.name;
    }
  }
  return {};
}

void accumulate_grad(const Tensor& t, std::span<const double> values) {
  if (!t.requires_grad()) return;
  Tensor handle = t;
  auto g = handle.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += values[i];
}

}  // namespace atseg
