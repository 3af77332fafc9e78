#pragma once

// Dense row-major tensors with a reverse-mode gradient tape.
//
// A BasicTape<T> becomes the active tape of its thread for its lifetime.
// While a tape is active, every operation with at least one input that
// requires a gradient records a node; outside a tape, operations compute
// values only. Tensors are shared handles: copying a BasicTensor aliases the
// same storage. Use clone() for a deep copy and detach() for an alias of
// the data that does not participate in gradient tracking.
//
// Training and attack loops run in 32-bit (Tensor); gradient verification
// uses the 64-bit instantiation (Tensor64).

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "patchzero/error.hpp"

namespace pz {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class BasicTape;

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::vector<T> grad;  // empty means absent
  bool requires_grad = false;
  const BasicTape<T>* tape = nullptr;  // tape holding the node that produced this tensor
  std::size_t node = 0;

  bool has_grad() const { return !grad.empty(); }
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data->size(), T(0));
    return grad;
  }
};

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

}  // namespace detail

template <typename T>
class BasicTensor {
 public:
  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data->size(); }

  std::span<const T> data() const { return {impl_->data->data(), impl_->data->size()}; }
  // Writes are visible through every alias (detach() views included). Do not
  // mutate tensors that a live tape still needs for its backward pass.
  std::span<T> mutable_data() { return {impl_->data->data(), impl_->data->size()}; }
  std::vector<T> to_vector() const { return *impl_->data; }

  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value);

  bool has_grad() const { return impl_->has_grad(); }
  std::span<const T> grad() const { return {impl_->grad.data(), impl_->grad.size()}; }
  void zero_grad() { impl_->grad.clear(); }

  BasicTensor detach() const;
  BasicTensor clone() const;

  // Internal handle used by operation implementations.
  const detail::ImplPtr<T>& impl() const { return impl_; }
  static BasicTensor from_impl(detail::ImplPtr<T> impl) {
    BasicTensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  detail::ImplPtr<T> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename T>
class BasicTape {
 public:
  using BackwardFn = std::function<void(std::span<const T> grad_out)>;

  BasicTape();
  ~BasicTape();
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  // Innermost live tape on the calling thread, or nullptr.
  static BasicTape* active();

  std::size_t size() const { return nodes_.size(); }

  // Node bookkeeping exposed for invariant checks.
  std::vector<std::size_t> input_nodes(std::size_t node) const;

  void record(std::vector<detail::ImplPtr<T>> inputs, const detail::ImplPtr<T>& output,
              BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and walks the recorded nodes in reverse,
  // accumulating (+=) into every reachable tensor that requires a gradient.
  void backward(const BasicTensor<T>& loss);

 private:
  struct Node {
    std::vector<detail::ImplPtr<T>> inputs;
    detail::ImplPtr<T> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  BasicTape* previous_;
};

using Tape = BasicTape<float>;
using Tape64 = BasicTape<double>;

// backward() against the calling thread's active tape.
template <typename T>
void backward(const BasicTensor<T>& loss);

// Runs fn with no tape active (values only, nothing recorded).
template <typename T>
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  BasicTape<T>* saved_;
};

// ---------------------------------------------------------------------------
// Operations

enum class BinaryOp { kAdd, kSub, kMul, kDiv };
enum class UnaryOp { kNeg, kRelu, kSigmoid, kExp, kLog, kSign, kAbs };
enum class ReduceOp { kSum, kMean, kMax };

// Broadcasting: shapes are aligned at their trailing axes; a missing leading
// axis counts as size 1, and a size-1 axis stretches to the other operand's
// size. Division does not guard against zero divisors.
template <typename T>
BasicTensor<T> elementwise(const BasicTensor<T>& a, const BasicTensor<T>& b, BinaryOp op);
template <typename T>
BasicTensor<T> elementwise(const BasicTensor<T>& a, T b, BinaryOp op);
// s - a and s / a.
template <typename T>
BasicTensor<T> elementwise(T a, const BasicTensor<T>& b, BinaryOp op);

// sign is gradient-opaque: its output never requires a gradient. relu passes
// the gradient only where the input is strictly positive. log rejects
// non-positive inputs while checked math is on (the default).
template <typename T>
BasicTensor<T> unary(const BasicTensor<T>& a, UnaryOp op);

void set_checked_math(bool enabled);
bool checked_math();

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Cross-correlation (no kernel flip) with zero padding. bias may be undefined.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding);

template <typename T>
BasicTensor<T> avg_pool2x(const BasicTensor<T>& input);
template <typename T>
BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& input);

// Reduces the listed axes (removed from the result); an empty axis list
// reduces everything to shape [1]. Max routes the gradient to the first
// maximal element in row-major order.
template <typename T>
BasicTensor<T> reduce(const BasicTensor<T>& a, ReduceOp op, std::vector<std::size_t> axes = {});

// min(max(a, lo), hi). The gradient passes only where lo < a < hi.
template <typename T>
BasicTensor<T> clip(const BasicTensor<T>& a, T lo, T hi);
template <typename T>
BasicTensor<T> clip(const BasicTensor<T>& a, const BasicTensor<T>& lo, const BasicTensor<T>& hi);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);
template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);

// Forward value is `hard`; the backward pass sends the incoming gradient to
// `soft` unchanged. Shapes must match. This is the BPDA substitution.
template <typename T>
BasicTensor<T> straight_through(const BasicTensor<T>& hard, const BasicTensor<T>& soft);

// Minimum over the (2r+1)x(2r+1) window of the last two axes, clipped at the
// borders. The gradient goes to the first minimal element of each window.
template <typename T>
BasicTensor<T> min_pool_window(const BasicTensor<T>& a, std::size_t radius);

// Convenience wrappers.
template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(a, b, BinaryOp::kAdd);
}
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(a, b, BinaryOp::kSub);
}
template <typename T>
BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(a, b, BinaryOp::kMul);
}
template <typename T>
BasicTensor<T> operator/(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(a, b, BinaryOp::kDiv);
}
template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, T b) {
  return elementwise(a, b, BinaryOp::kAdd);
}
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, T b) {
  return elementwise(a, b, BinaryOp::kSub);
}
template <typename T>
BasicTensor<T> operator*(const BasicTensor<T>& a, T b) {
  return elementwise(a, b, BinaryOp::kMul);
}
template <typename T>
BasicTensor<T> operator/(const BasicTensor<T>& a, T b) {
  return elementwise(a, b, BinaryOp::kDiv);
}
template <typename T>
BasicTensor<T> operator-(T a, const BasicTensor<T>& b) {
  return elementwise(a, b, BinaryOp::kSub);
}
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a) {
  return unary(a, UnaryOp::kNeg);
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  return unary(a, UnaryOp::kRelu);
}
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
  return unary(a, UnaryOp::kSigmoid);
}
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  return reduce(a, ReduceOp::kSum);
}
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return reduce(a, ReduceOp::kMean);
}

namespace detail {

// Records a custom node on the active tape when any input requires a
// gradient; marks `output` accordingly. Used by fused operations elsewhere.
template <typename T>
void record_op(const std::vector<BasicTensor<T>>& inputs, BasicTensor<T>& output,
               typename BasicTape<T>::BackwardFn backward);

// True when an active tape exists and any input requires a gradient.
template <typename T>
bool needs_grad(const std::vector<BasicTensor<T>>& inputs);

}  // namespace detail

}  // namespace pz
