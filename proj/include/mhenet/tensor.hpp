#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mhenet {

#ifdef MHENET_FLOAT32
using Real = float;
#else
using Real = double;
#endif

/// Rank-4 extent in NCHW order.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Raised for any operand whose shape violates an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until something accumulates into it
  bool requires_grad = false;

  std::span<Real> grad_buffer();
};

/// Shared handle to a dense NCHW array. Copies alias the same storage;
/// use clone() for an independent value.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = 0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false);

  static Tensor zeros(Shape shape) { return Tensor(shape, Real(0)); }
  static Tensor full(Shape shape, Real v) { return Tensor(shape, v); }
  static Tensor scalar(Real v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int n() const { return impl_->shape.n; }
  int c() const { return impl_->shape.c; }
  int h() const { return impl_->shape.h; }
  int w() const { return impl_->shape.w; }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const Real> data() const { return impl_->data; }
  // Direct mutation is reserved for leaves (parameters, inputs, buffers).
  std::span<Real> mutable_data() { return impl_->data; }

  Real at(int n, int c, int h, int w) const;
  Real& at(int n, int c, int h, int w);
  Real item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const Real> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable operations for the current thread.
/// backward() replays adjoints in exact reverse execution order and then
/// releases the recorded graph.
class Tape {
 public:
  using Adjoint = std::function<void()>;

  static Tape& current();

  void record(std::shared_ptr<TensorImpl> output, Adjoint adjoint);
  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

  // Observer invoked with each entry index as it is replayed; test hook.
  void set_replay_observer(std::function<void(std::size_t)> fn) {
    observer_ = std::move(fn);
  }

 private:
  struct Entry {
    std::shared_ptr<TensorImpl> output;
    Adjoint adjoint;
  };
  std::vector<Entry> entries_;
  std::function<void(std::size_t)> observer_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Seeds d(loss)/d(loss) = 1 and runs the current thread's tape.
void backward(const Tensor& loss);

}  // namespace mhenet
