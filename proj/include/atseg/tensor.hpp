#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace atseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is first written
  bool requires_grad = false;
  bool leaf = true;
};
}  // namespace detail

/// Dense row-major float64 array.
///
/// Tensor is a handle: copies share storage, like parameters in most
/// autograd frameworks. Use clone() for a deep copy. Gradients are
/// accumulated into grad() by Tape::backward and cleared by zero_grad().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double item() const;

  /// Element of a rank-4 tensor.
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool is_leaf() const { return impl_->leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated (zero-filled) on first access.
  std::span<double> mutable_grad();
  void zero_grad();

  /// Deep copy of values; the result is a leaf without gradient.
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  /// True when every value is finite.
  bool all_finite() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend class Tape;

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable operations.
///
/// Operations push one record per call when recording is enabled and at
/// least one input requires a gradient. backward() replays the records in
/// reverse, visiting each exactly once. Leaf gradients accumulate across
/// calls; intermediate gradients are reset at the start of every call.
/// A tape is not thread-safe; use one tape per thread.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const noexcept { return recording_; }
  void set_recording(bool on) noexcept { recording_ = on; }

  /// Creates a non-leaf output tensor for an op whose inputs are given.
  /// The result requires a gradient iff recording and any input does.
  Tensor make_output(Shape shape, std::initializer_list<const Tensor*> inputs) const;

  /// Registers the backward rule of an op that produced `out`. No-op when
  /// `out` does not require a gradient.
  void record(std::string name, const Tensor& out, BackwardFn fn);

  /// Populates gradients of every requires_grad ancestor of `loss`.
  /// Returns the number of records visited.
  std::size_t backward(const Tensor& loss);

  void clear() { records_.clear(); }
  std::size_t size() const noexcept { return records_.size(); }
  const std::string& name_at(std::size_t i) const { return records_.at(i).name; }

  /// Name of the first recorded op whose output contains a non-finite
  /// value, or an empty string.
  std::string first_non_finite() const;

 private:
  struct Record {
    std::string name;
    std::shared_ptr<detail::TensorImpl> out;
    BackwardFn fn;
  };
  std::vector<Record> records_;
  bool recording_ = true;
};

/// Disables recording on a tape for the lifetime of the guard.
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), previous_(tape.recording()) {
    tape_.set_recording(false);
  }
  ~NoGradGuard() { tape_.set_recording(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool previous_;
};

/// Adds `values` into the gradient buffer of `t` if it requires one.
void accumulate_grad(const Tensor& t, std::span<const double> values);

}  // namespace atseg
