#include "patchzero/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pz {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::atomic<bool> g_checked_math{true};

template <typename T>
BasicTape<T>*& active_slot() {
  thread_local BasicTape<T>* slot = nullptr;
  return slot;
}

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be >= 1, got " + shape_str(shape));
  }
}

template <typename T>
BasicTensor<T> make_output(Shape shape) {
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->data = std::make_shared<std::vector<T>>(shape_numel(shape), T(0));
  impl->shape = std::move(shape);
  return BasicTensor<T>::from_impl(std::move(impl));
}

template <typename T>
T* out_ptr(BasicTensor<T>& t) {
  return t.mutable_data().data();
}

template <typename T>
bool wants_grad(const detail::ImplPtr<T>& impl) {
  return impl && impl->requires_grad;
}

}  // namespace

void set_checked_math(bool enabled) { g_checked_math = enabled; }
bool checked_math() { return g_checked_math; }

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::make_shared<std::vector<T>>(std::move(data));
  impl_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  validate_shape(shape);
  const std::size_t n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor({1}, {value}, requires_grad);
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return (*impl_->data)[0];
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw ShapeError("index out of range for " + shape_str(s));
    off = off * s[axis] + i;
    ++axis;
  }
  return (*impl_->data)[off];
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  if (!value) impl_->grad.clear();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return from_impl(std::move(impl));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor(impl_->shape, *impl_->data, false);
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
BasicTape<T>::BasicTape() : previous_(active_slot<T>()) {
  active_slot<T>() = this;
}

template <typename T>
BasicTape<T>::~BasicTape() {
  active_slot<T>() = previous_;
}

template <typename T>
BasicTape<T>* BasicTape<T>::active() {
  return active_slot<T>();
}

template <typename T>
std::vector<std::size_t> BasicTape<T>::input_nodes(std::size_t node) const {
  std::vector<std::size_t> out;
  for (const auto& in : nodes_.at(node).inputs) {
    if (in->tape == this) out.push_back(in->node);
  }
  return out;
}

template <typename T>
void BasicTape<T>::record(std::vector<detail::ImplPtr<T>> inputs, const detail::ImplPtr<T>& output,
                          BackwardFn backward) {
  output->requires_grad = true;
  output->tape = this;
  output->node = nodes_.size();
  nodes_.push_back(Node{std::move(inputs), output, std::move(backward)});
}

template <typename T>
void BasicTape<T>::backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() requires a scalar loss");
  }
  const auto& impl = loss.impl();
  if (impl->tape != this) {
    throw ValueError("backward(): loss was not recorded on this tape");
  }
  for (auto& node : nodes_) node.output->grad.clear();
  impl->grad_buffer()[0] += T(1);
  for (std::size_t i = impl->node + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.output->has_grad()) continue;
    node.backward(std::span<const T>(node.output->grad));
  }
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  BasicTape<T>* tape = BasicTape<T>::active();
  if (!tape) throw ValueError("backward() called with no active tape");
  tape->backward(loss);
}

template <typename T>
NoGradGuard<T>::NoGradGuard() : saved_(active_slot<T>()) {
  active_slot<T>() = nullptr;
}

template <typename T>
NoGradGuard<T>::~NoGradGuard() {
  active_slot<T>() = saved_;
}

namespace detail {

template <typename T>
bool needs_grad(const std::vector<BasicTensor<T>>& inputs) {
  if (!BasicTape<T>::active()) return false;
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) return true;
  }
  return false;
}

template <typename T>
void record_op(const std::vector<BasicTensor<T>>& inputs, BasicTensor<T>& output,
               typename BasicTape<T>::BackwardFn backward) {
  if (!needs_grad(inputs)) return;
  std::vector<ImplPtr<T>> impls;
  for (const auto& t : inputs) {
    if (t.defined()) impls.push_back(t.impl());
  }
  BasicTape<T>::active()->record(std::move(impls), output.impl(), std::move(backward));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

namespace {

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[r - 1 - k] = std::max(da, db);
  }
  return out;
}

// For each linear index of `out`, the linear index into `in` after broadcasting.
// Broadcast strides of `in` against `out` (0 along broadcast axes).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t ai = in.size() - 1 - k;
    const std::size_t ao = r - 1 - k;
    if (in[ai] != 1) strides[ao] = s;
    s *= in[ai];
  }
  return strides;
}

// Output traversal for a two-operand broadcast, with adjacent axes merged
// wherever both operands stay contiguous across them. The innermost axis is
// visited as rows of `len` elements with operand steps 0 or 1.
struct BroadcastPlan {
  Shape shape;
  std::vector<std::size_t> sa, sb;

  BroadcastPlan(const Shape& a, const Shape& b, const Shape& out) {
    const auto ta = broadcast_strides(a, out), tb = broadcast_strides(b, out);
    for (std::size_t k = 0; k < out.size(); ++k) {
      if (out[k] == 1) continue;
      if (!shape.empty() && sa.back() == ta[k] * out[k] && sb.back() == tb[k] * out[k]) {
        shape.back() *= out[k];
        sa.back() = ta[k];
        sb.back() = tb[k];
        continue;
      }
      shape.push_back(out[k]);
      sa.push_back(ta[k]);
      sb.push_back(tb[k]);
    }
    if (shape.empty()) {
      shape = {1};
      sa = {0};
      sb = {0};
    }
  }

  std::size_t len() const { return shape.back(); }
  std::size_t da() const { return sa.back(); }
  std::size_t db() const { return sb.back(); }

  // fn(out_offset, a_offset, b_offset) once per row.
  template <typename F>
  void rows(F fn) const {
    const std::size_t r = shape.size() - 1;
    std::vector<std::size_t> idx(r, 0);
    std::size_t oa = 0, ob = 0, o = 0;
    const std::size_t n_rows = shape_numel(Shape(shape.begin(), shape.end() - 1));
    for (std::size_t row = 0; row < n_rows; ++row, o += len()) {
      fn(o, oa, ob);
      for (std::size_t k = r; k-- > 0;) {
        ++idx[k];
        oa += sa[k];
        ob += sb[k];
        if (idx[k] < shape[k]) break;
        oa -= sa[k] * shape[k];
        ob -= sb[k] * shape[k];
        idx[k] = 0;
      }
    }
  }
};

template <typename T>
T apply_binary(T x, T y, BinaryOp op) {
  switch (op) {
    case BinaryOp::kAdd:
      return x + y;
    case BinaryOp::kSub:
      return x - y;
    case BinaryOp::kMul:
      return x * y;
    case BinaryOp::kDiv:
      return x / y;
  }
  return T(0);
}

}  // namespace

template <typename T, typename Op>
void binary_rows(const BroadcastPlan& plan, const T* pa, const T* pb, T* po, Op f) {
  const std::size_t len = plan.len(), da = plan.da(), db = plan.db();
  plan.rows([&](std::size_t o, std::size_t ia, std::size_t ib) {
    const T* x = pa + ia;
    const T* y = pb + ib;
    T* z = po + o;
    if (da && db) {
      for (std::size_t j = 0; j < len; ++j) z[j] = f(x[j], y[j]);
    } else if (da) {
      const T c = *y;
      for (std::size_t j = 0; j < len; ++j) z[j] = f(x[j], c);
    } else if (db) {
      const T c = *x;
      for (std::size_t j = 0; j < len; ++j) z[j] = f(c, y[j]);
    } else {
      const T v = f(*x, *y);
      for (std::size_t j = 0; j < len; ++j) z[j] = v;
    }
  });
}

// Accumulates sum over each row of term(j) into dst (step 1) or into a single
// element (step 0).
template <typename T, typename Term>
inline void accumulate_row(T* dst, std::size_t step, std::size_t len, Term term) {
  if (step) {
    for (std::size_t j = 0; j < len; ++j) dst[j] += term(j);
  } else {
    T acc = T(0);
    for (std::size_t j = 0; j < len; ++j) acc += term(j);
    *dst += acc;
  }
}

template <typename T>
BasicTensor<T> elementwise(const BasicTensor<T>& a, const BasicTensor<T>& b, BinaryOp op) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  BasicTensor<T> out = make_output<T>(out_shape);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out_ptr(out);
  const auto plan = std::make_shared<BroadcastPlan>(a.shape(), b.shape(), out_shape);

  switch (op) {
    case BinaryOp::kAdd: binary_rows(*plan, pa, pb, po, [](T x, T y) { return x + y; }); break;
    case BinaryOp::kSub: binary_rows(*plan, pa, pb, po, [](T x, T y) { return x - y; }); break;
    case BinaryOp::kMul: binary_rows(*plan, pa, pb, po, [](T x, T y) { return x * y; }); break;
    case BinaryOp::kDiv: binary_rows(*plan, pa, pb, po, [](T x, T y) { return x / y; }); break;
  }

  if (detail::needs_grad<T>({a, b})) {
    auto ia = a.impl();
    auto ib = b.impl();
    detail::record_op<T>({a, b}, out, [ia, ib, op, plan](std::span<const T> grad) {
      const T* xa = ia->data->data();
      const T* xb = ib->data->data();
      const T* g = grad.data();
      const std::size_t len = plan->len(), da = plan->da(), db = plan->db();
      T* ga = wants_grad(ia) ? ia->grad_buffer().data() : nullptr;
      T* gb = wants_grad(ib) ? ib->grad_buffer().data() : nullptr;
      plan->rows([&](std::size_t o, std::size_t oa, std::size_t ob) {
        const T* gr = g + o;
        const T* x = xa + oa;
        const T* y = xb + ob;
        if (ga) {
          switch (op) {
            case BinaryOp::kAdd:
            case BinaryOp::kSub:
              accumulate_row(ga + oa, da, len, [&](std::size_t j) { return gr[j]; });
              break;
            case BinaryOp::kMul:
              accumulate_row(ga + oa, da, len, [&](std::size_t j) { return gr[j] * y[j * db]; });
              break;
            case BinaryOp::kDiv:
              accumulate_row(ga + oa, da, len, [&](std::size_t j) { return gr[j] / y[j * db]; });
              break;
          }
        }
        if (gb) {
          switch (op) {
            case BinaryOp::kAdd:
              accumulate_row(gb + ob, db, len, [&](std::size_t j) { return gr[j]; });
              break;
            case BinaryOp::kSub:
              accumulate_row(gb + ob, db, len, [&](std::size_t j) { return -gr[j]; });
              break;
            case BinaryOp::kMul:
              accumulate_row(gb + ob, db, len, [&](std::size_t j) { return gr[j] * x[j * da]; });
              break;
            case BinaryOp::kDiv:
              accumulate_row(gb + ob, db, len, [&](std::size_t j) {
                const T v = y[j * db];
                return -(gr[j] * x[j * da] / (v * v));
              });
              break;
          }
        }
      });
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> elementwise(const BasicTensor<T>& a, T b, BinaryOp op) {
  BasicTensor<T> out = make_output<T>(a.shape());
  const std::size_t n = out.numel();
  const T* pa = a.data().data();
  T* po = out_ptr(out);
  for (std::size_t i = 0; i < n; ++i) po[i] = apply_binary(pa[i], b, op);
  if (detail::needs_grad<T>({a})) {
    auto ia = a.impl();
    detail::record_op<T>({a}, out, [ia, b, op, n](std::span<const T> g) {
      T* ga = ia->grad_buffer().data();
      switch (op) {
        case BinaryOp::kAdd:
        case BinaryOp::kSub:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
          break;
        case BinaryOp::kMul:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * b;
          break;
        case BinaryOp::kDiv:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / b;
          break;
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> elementwise(T a, const BasicTensor<T>& b, BinaryOp op) {
  BasicTensor<T> out = make_output<T>(b.shape());
  const std::size_t n = out.numel();
  const T* pb = b.data().data();
  T* po = out_ptr(out);
  for (std::size_t i = 0; i < n; ++i) po[i] = apply_binary(a, pb[i], op);
  if (detail::needs_grad<T>({b})) {
    auto ib = b.impl();
    detail::record_op<T>({b}, out, [ib, a, op, n](std::span<const T> g) {
      T* gb = ib->grad_buffer().data();
      const T* xb = ib->data->data();
      switch (op) {
        case BinaryOp::kAdd:
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
          break;
        case BinaryOp::kSub:
          for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
          break;
        case BinaryOp::kMul:
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * a;
          break;
        case BinaryOp::kDiv:
          for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i] * a / (xb[i] * xb[i]);
          break;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Unary

template <typename T>
BasicTensor<T> unary(const BasicTensor<T>& a, UnaryOp op) {
  BasicTensor<T> out = make_output<T>(a.shape());
  const std::size_t n = out.numel();
  const T* x = a.data().data();
  T* y = out_ptr(out);
  switch (op) {
    case UnaryOp::kNeg:
      for (std::size_t i = 0; i < n; ++i) y[i] = -x[i];
      break;
    case UnaryOp::kRelu:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    case UnaryOp::kSigmoid:
      for (std::size_t i = 0; i < n; ++i) {
        if (x[i] >= T(0)) {
          y[i] = T(1) / (T(1) + std::exp(-x[i]));
        } else {
          const T e = std::exp(x[i]);
          y[i] = e / (T(1) + e);
        }
      }
      break;
    case UnaryOp::kExp:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
      break;
    case UnaryOp::kLog:
      for (std::size_t i = 0; i < n; ++i) {
        if (!(x[i] > T(0)) && checked_math()) {
          throw ValueError("log of non-positive value");
        }
        y[i] = std::log(x[i]);
      }
      break;
    case UnaryOp::kSign:
      for (std::size_t i = 0; i < n; ++i) y[i] = T((x[i] > T(0)) - (x[i] < T(0)));
      return out;  // gradient-opaque
    case UnaryOp::kAbs:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::abs(x[i]);
      break;
  }
  if (detail::needs_grad<T>({a})) {
    auto ia = a.impl();
    auto yo = out.impl()->data;
    detail::record_op<T>({a}, out, [ia, yo, op, n](std::span<const T> g) {
      T* ga = ia->grad_buffer().data();
      const T* xv = ia->data->data();
      const T* yv = yo->data();
      switch (op) {
        case UnaryOp::kNeg:
          for (std::size_t i = 0; i < n; ++i) ga[i] -= g[i];
          break;
        case UnaryOp::kRelu:
          for (std::size_t i = 0; i < n; ++i) {
            if (xv[i] > T(0)) ga[i] += g[i];
          }
          break;
        case UnaryOp::kSigmoid:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * yv[i] * (T(1) - yv[i]);
          break;
        case UnaryOp::kExp:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * yv[i];
          break;
        case UnaryOp::kLog:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / xv[i];
          break;
        case UnaryOp::kSign:
          break;
        case UnaryOp::kAbs:
          for (std::size_t i = 0; i < n; ++i) {
            ga[i] += g[i] * T((xv[i] > T(0)) - (xv[i] < T(0)));
          }
          break;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matmul

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  BasicTensor<T> out = make_output<T>({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out_ptr(out);
  for (std::size_t i = 0; i < m; ++i) {
    T* row = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  if (detail::needs_grad<T>({a, b})) {
    auto ia = a.impl();
    auto ib = b.impl();
    detail::record_op<T>({a, b}, out, [ia, ib, m, k, n](std::span<const T> g) {
      const T* xa = ia->data->data();
      const T* xb = ib->data->data();
      if (wants_grad(ia)) {
        T* ga = ia->grad_buffer().data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            T s = T(0);
            for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * xb[p * n + j];
            ga[i * k + p] += s;
          }
        }
      }
      if (wants_grad(ib)) {
        T* gb = ib->grad_buffer().data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const T s = xa[i * k + p];
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += s * g[i * n + j];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;
  std::size_t ck() const { return c * kh * kw; }
  std::size_t hw() const { return oh * ow; }
};

// Valid output column range [x0, x1) for kernel column j: 0 <= x*stride + j - pad < w.
inline void valid_range(std::size_t out, std::size_t in, std::size_t stride, std::size_t offset,
                        std::size_t pad, std::size_t& lo, std::size_t& hi) {
  // x*stride + offset >= pad  and  x*stride + offset < in + pad
  lo = offset >= pad ? 0 : (pad - offset + stride - 1) / stride;
  const std::size_t limit = in + pad;  // exclusive bound on x*stride + offset
  hi = limit > offset ? std::min(out, (limit - offset + stride - 1) / stride) : 0;
  if (hi < lo) hi = lo;
}

template <typename T>
void im2col(const T* in, const ConvGeometry& g, T* col) {
  const std::size_t hw = g.hw();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      std::size_t y0, y1;
      valid_range(g.oh, g.h, g.stride, i, g.pad, y0, y1);
      for (std::size_t j = 0; j < g.kw; ++j) {
        std::size_t x0, x1;
        valid_range(g.ow, g.w, g.stride, j, g.pad, x0, x1);
        T* row = col + ((c * g.kh + i) * g.kw + j) * hw;
        std::fill(row, row + y0 * g.ow, T(0));
        for (std::size_t y = y0; y < y1; ++y) {
          T* dst = row + y * g.ow;
          const T* src = in + (c * g.h + y * g.stride + i - g.pad) * g.w;
          std::fill(dst, dst + x0, T(0));
          if (g.stride == 1) {
            const T* s = src + (x0 + j - g.pad);
            std::copy(s, s + (x1 - x0), dst + x0);
          } else {
            for (std::size_t x = x0; x < x1; ++x) dst[x] = src[x * g.stride + j - g.pad];
          }
          std::fill(dst + x1, dst + g.ow, T(0));
        }
        std::fill(row + y1 * g.ow, row + hw, T(0));
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* in) {
  const std::size_t hw = g.hw();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      std::size_t y0, y1;
      valid_range(g.oh, g.h, g.stride, i, g.pad, y0, y1);
      for (std::size_t j = 0; j < g.kw; ++j) {
        std::size_t x0, x1;
        valid_range(g.ow, g.w, g.stride, j, g.pad, x0, x1);
        const T* row = col + ((c * g.kh + i) * g.kw + j) * hw;
        for (std::size_t y = y0; y < y1; ++y) {
          T* dst = in + (c * g.h + y * g.stride + i - g.pad) * g.w;
          const T* src = row + y * g.ow;
          if (g.stride == 1) {
            T* d = dst + (j - g.pad);
            for (std::size_t x = x0; x < x1; ++x) d[x] += src[x];
          } else {
            for (std::size_t x = x0; x < x1; ++x) dst[x * g.stride + j - g.pad] += src[x];
          }
        }
      }
    }
  }
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[16] = {};
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) {
    for (std::size_t k = 0; k < 16; ++k) acc[k] += a[j + k] * b[j + k];
  }
  T s = T(0);
  for (std::size_t k = 0; k < 16; ++k) s += acc[k];
  for (; j < n; ++j) s += a[j] * b[j];
  return s;
}

constexpr std::size_t kPanelRows = 8;
constexpr std::size_t kTile = 16;

// out[r][:] = init[r] + sum_k coef(r, k) * src[k][:] for rows r in [0, rows).
// Coefficients are packed eight rows at a time so that an 8 x 16 block of
// outputs stays in registers. Each output element accumulates its terms in
// increasing k, so results do not depend on the blocking.
template <typename T, typename Coef>
void blocked_rows(std::size_t rows, std::size_t depth, std::size_t hw, const T* src, Coef coef,
                  const T* init, T* out) {
  constexpr std::size_t R = kPanelRows;
  std::vector<T> panel(depth * R);
  for (std::size_t r = 0; r < rows; r += R) {
    const std::size_t nr = std::min(R, rows - r);
    for (std::size_t k = 0; k < depth; ++k) {
      for (std::size_t q = 0; q < R; ++q) panel[k * R + q] = q < nr ? coef(r + q, k) : T(0);
    }
    std::size_t j0 = 0;
    for (; j0 + kTile <= hw; j0 += kTile) {
      T acc[R][kTile];
      for (std::size_t q = 0; q < R; ++q) {
        const T v = (init && q < nr) ? init[r + q] : T(0);
        for (std::size_t jj = 0; jj < kTile; ++jj) acc[q][jj] = v;
      }
      const T* s = src + j0;
      const T* p = panel.data();
      for (std::size_t k = 0; k < depth; ++k, s += hw, p += R) {
#pragma GCC unroll 8
        for (std::size_t q = 0; q < R; ++q) {
          const T a = p[q];
#pragma GCC unroll 16
          for (std::size_t jj = 0; jj < kTile; ++jj) acc[q][jj] += a * s[jj];
        }
      }
      for (std::size_t q = 0; q < nr; ++q) std::copy(acc[q], acc[q] + kTile, out + (r + q) * hw + j0);
    }
    for (std::size_t q = 0; q < nr; ++q) {
      T* o = out + (r + q) * hw;
      const T v = init ? init[r + q] : T(0);
      for (std::size_t j = j0; j < hw; ++j) o[j] = v;
      for (std::size_t k = 0; k < depth; ++k) {
        const T a = panel[k * R + q];
        const T* s = src + k * hw;
        for (std::size_t j = j0; j < hw; ++j) o[j] += a * s[j];
      }
    }
  }
}

// out[f][:] = bias[f] + sum_k w[f][k] * col[k][:]
template <typename T>
void gemm_forward(const T* w, const T* bias, const T* col, std::size_t f_count, std::size_t ck,
                  std::size_t hw, T* out) {
  blocked_rows(f_count, ck, hw, col, [w, ck](std::size_t f, std::size_t k) { return w[f * ck + k]; },
               bias, out);
}

// dcol[k][:] = sum_f w[f][k] * dout[f][:]
template <typename T>
void gemm_input_grad(const T* w, const T* dout, std::size_t f_count, std::size_t ck,
                     std::size_t hw, T* dcol) {
  blocked_rows(ck, f_count, hw, dout, [w, ck](std::size_t k, std::size_t f) { return w[f * ck + k]; },
               static_cast<const T*>(nullptr), dcol);
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw ShapeError("conv2d expects input [N,C,H,W] and kernel [F,C,kh,kw]");
  }
  if (input.dim(1) != kernel.dim(1)) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(input.shape()) + ", kernel " +
                     shape_str(kernel.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d stride must be >= 1");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.f = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.pad = padding;
  const std::size_t ph = g.h + 2 * padding, pw = g.w + 2 * padding;
  if (ph < g.kh || pw < g.kw || (ph - g.kh) % stride != 0 || (pw - g.kw) % stride != 0) {
    throw ShapeError("conv2d: non-integral output size for input " + shape_str(input.shape()) +
                     ", kernel " + shape_str(kernel.shape()));
  }
  g.oh = (ph - g.kh) / stride + 1;
  g.ow = (pw - g.kw) / stride + 1;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.f)) {
    throw ShapeError("conv2d bias must have shape [F]");
  }

  BasicTensor<T> out = make_output<T>({g.n, g.f, g.oh, g.ow});
  const T* in = input.data().data();
  const T* w = kernel.data().data();
  const T* b = bias.defined() ? bias.data().data() : nullptr;
  T* po = out_ptr(out);
  std::vector<T> col(g.ck() * g.hw());
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(in + n * g.c * g.h * g.w, g, col.data());
    gemm_forward(w, b, col.data(), g.f, g.ck(), g.hw(), po + n * g.f * g.hw());
  }

  if (detail::needs_grad<T>({input, kernel, bias})) {
    auto ii = input.impl();
    auto ik = kernel.impl();
    auto ib = bias.defined() ? bias.impl() : nullptr;
    detail::record_op<T>({input, kernel, bias}, out, [ii, ik, ib, g](std::span<const T> grad) {
      const T* x = ii->data->data();
      const T* wk = ik->data->data();
      const std::size_t hw = g.hw(), ck = g.ck();
      std::vector<T> col;
      std::vector<T> dcol;
      T* gk = wants_grad(ik) ? ik->grad_buffer().data() : nullptr;
      T* gb = wants_grad(ib) ? ib->grad_buffer().data() : nullptr;
      T* gi = wants_grad(ii) ? ii->grad_buffer().data() : nullptr;
      // For stride 1 the input gradient is a full convolution of the output
      // gradient with the spatially flipped, channel-transposed kernel. With
      // few input channels the column route is cheaper.
      const bool direct = g.stride == 1 && g.kh == g.kw && g.pad < g.kh && g.c >= kPanelRows;
      ConvGeometry gt{};
      std::vector<T> wt, dx;
      if (gi && direct) {
        gt = ConvGeometry{g.n, g.f, g.oh, g.ow, g.c, g.kh, g.kw, 1, g.kh - 1 - g.pad, g.h, g.w};
        wt.resize(g.c * g.f * g.kh * g.kw);
        for (std::size_t f = 0; f < g.f; ++f)
          for (std::size_t c = 0; c < g.c; ++c)
            for (std::size_t i = 0; i < g.kh; ++i)
              for (std::size_t j = 0; j < g.kw; ++j)
                wt[((c * g.f + f) * g.kh + (g.kh - 1 - i)) * g.kw + (g.kw - 1 - j)] =
                    wk[((f * g.c + c) * g.kh + i) * g.kw + j];
        dcol.resize(gt.ck() * gt.hw());
        dx.resize(g.c * g.h * g.w);
      } else if (gi) {
        dcol.resize(ck * hw);
      }
      if (gk) col.resize(ck * hw);
      for (std::size_t n = 0; n < g.n; ++n) {
        const T* dout = grad.data() + n * g.f * hw;
        if (gk) {
          im2col(x + n * g.c * g.h * g.w, g, col.data());
          for (std::size_t f = 0; f < g.f; ++f) {
            for (std::size_t k = 0; k < ck; ++k) {
              gk[f * ck + k] += dot(dout + f * hw, col.data() + k * hw, hw);
            }
          }
        }
        if (gb) {
          for (std::size_t f = 0; f < g.f; ++f) {
            T s = T(0);
            for (std::size_t j = 0; j < hw; ++j) s += dout[f * hw + j];
            gb[f] += s;
          }
        }
        if (gi && direct) {
          im2col(dout, gt, dcol.data());
          gemm_forward(wt.data(), static_cast<const T*>(nullptr), dcol.data(), g.c, gt.ck(),
                       gt.hw(), dx.data());
          T* dst = gi + n * g.c * g.h * g.w;
          for (std::size_t i = 0; i < dx.size(); ++i) dst[i] += dx[i];
        } else if (gi) {
          gemm_input_grad(wk, dout, g.f, ck, hw, dcol.data());
          col2im_add(dcol.data(), g, gi + n * g.c * g.h * g.w);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling / upsampling

template <typename T>
BasicTensor<T> avg_pool2x(const BasicTensor<T>& input) {
  if (input.rank() != 4) throw ShapeError("avg_pool2x expects [N,C,H,W]");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2) throw ShapeError("avg_pool2x requires even spatial dims, got " + shape_str(input.shape()));
  const std::size_t oh = h / 2, ow = w / 2, planes = n * c;
  BasicTensor<T> out = make_output<T>({n, c, oh, ow});
  const T* x = input.data().data();
  T* y = out_ptr(out);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x + p * h * w;
    T* dst = y + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const T* r0 = src + (2 * i) * w + 2 * j;
        const T* r1 = r0 + w;
        dst[i * ow + j] = (((r0[0] + r0[1]) + r1[0]) + r1[1]) * T(0.25);
      }
    }
  }
  if (detail::needs_grad<T>({input})) {
    auto ii = input.impl();
    detail::record_op<T>({input}, out, [ii, planes, h, w, oh, ow](std::span<const T> g) {
      T* gi = ii->grad_buffer().data();
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < oh; ++i) {
          for (std::size_t j = 0; j < ow; ++j) {
            const T v = g[p * oh * ow + i * ow + j] * T(0.25);
            T* r0 = gi + p * h * w + (2 * i) * w + 2 * j;
            r0[0] += v;
            r0[1] += v;
            r0[w] += v;
            r0[w + 1] += v;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& input) {
  if (input.rank() != 4) throw ShapeError("upsample_nearest2x expects [N,C,H,W]");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = h * 2, ow = w * 2, planes = n * c;
  BasicTensor<T> out = make_output<T>({n, c, oh, ow});
  const T* x = input.data().data();
  T* y = out_ptr(out);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        y[p * oh * ow + i * ow + j] = x[p * h * w + (i / 2) * w + j / 2];
      }
    }
  }
  if (detail::needs_grad<T>({input})) {
    auto ii = input.impl();
    detail::record_op<T>({input}, out, [ii, planes, h, w, oh, ow](std::span<const T> g) {
      T* gi = ii->grad_buffer().data();
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < oh; ++i) {
          for (std::size_t j = 0; j < ow; ++j) {
            gi[p * h * w + (i / 2) * w + j / 2] += g[p * oh * ow + i * ow + j];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
BasicTensor<T> reduce(const BasicTensor<T>& a, ReduceOp op, std::vector<std::size_t> axes) {
  const Shape& s = a.shape();
  const std::size_t r = s.size();
  if (axes.empty()) {
    axes.resize(r);
    std::iota(axes.begin(), axes.end(), std::size_t{0});
  }
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  std::vector<bool> reduced(r, false);
  for (std::size_t ax : axes) {
    if (ax >= r) throw ShapeError("reduce: axis " + std::to_string(ax) + " invalid for " + shape_str(s));
    reduced[ax] = true;
  }
  Shape out_shape;
  for (std::size_t k = 0; k < r; ++k) {
    if (!reduced[k]) out_shape.push_back(s[k]);
  }
  if (out_shape.empty()) out_shape.push_back(1);

  const std::size_t n = a.numel();
  BasicTensor<T> out = make_output<T>(out_shape);
  const std::size_t m = out.numel();
  const std::size_t count = n / m;
  const T* x = a.data().data();
  T* y = out_ptr(out);

  // Input linear index -> output linear index. When the reduced axes are
  // contiguous the mapping is (outer, mid, inner) -> (outer, inner) and no
  // table is needed.
  const bool contiguous = axes.back() - axes.front() + 1 == axes.size();
  std::size_t outer = 1, mid = 1, inner = 1;
  if (contiguous) {
    for (std::size_t k = 0; k < r; ++k) {
      if (k < axes.front()) outer *= s[k];
      else if (k <= axes.back()) mid *= s[k];
      else inner *= s[k];
    }
  }
  auto map = std::make_shared<std::vector<std::size_t>>();
  if (!contiguous) {
    map->resize(n);
    std::vector<std::size_t> out_strides(r, 0);
    std::size_t st = 1;
    for (std::size_t k = r; k-- > 0;) {
      if (!reduced[k]) {
        out_strides[k] = st;
        st *= s[k];
      }
    }
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      (*map)[i] = off;
      for (std::size_t k = r; k-- > 0;) {
        ++idx[k];
        off += out_strides[k];
        if (idx[k] < s[k]) break;
        off -= out_strides[k] * s[k];
        idx[k] = 0;
      }
    }
  }
  auto out_index = [&](std::size_t i) {
    return contiguous ? (i / (mid * inner)) * inner + i % inner : (*map)[i];
  };

  auto argmax = std::make_shared<std::vector<std::size_t>>();
  switch (op) {
    case ReduceOp::kSum:
    case ReduceOp::kMean:
      if (contiguous && inner == 1) {
        for (std::size_t o = 0; o < outer; ++o) {
          const T* row = x + o * mid;
          T acc[8] = {};
          std::size_t j = 0;
          for (; j + 8 <= mid; j += 8) {
            for (std::size_t q = 0; q < 8; ++q) acc[q] += row[j + q];
          }
          T total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
          for (; j < mid; ++j) total += row[j];
          y[o] = total;
        }
      } else if (contiguous) {
        for (std::size_t o = 0; o < outer; ++o) {
          T* dst = y + o * inner;
          for (std::size_t q = 0; q < mid; ++q) {
            const T* src = x + (o * mid + q) * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
          }
        }
      } else {
        for (std::size_t i = 0; i < n; ++i) y[(*map)[i]] += x[i];
      }
      if (op == ReduceOp::kMean) {
        for (std::size_t j = 0; j < m; ++j) y[j] /= static_cast<T>(count);
      }
      break;
    case ReduceOp::kMax: {
      argmax->assign(m, n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = out_index(i);
        if ((*argmax)[j] == n || x[i] > y[j]) {
          y[j] = x[i];
          (*argmax)[j] = i;
        }
      }
      break;
    }
  }
  if (detail::needs_grad<T>({a})) {
    auto ia = a.impl();
    detail::record_op<T>({a}, out, [ia, op, map, argmax, n, m, count, contiguous, outer, mid, inner](std::span<const T> g) {
      T* ga = ia->grad_buffer().data();
      if (op == ReduceOp::kMax) {
        for (std::size_t j = 0; j < m; ++j) ga[(*argmax)[j]] += g[j];
        return;
      }
      const bool mean = op == ReduceOp::kMean;
      const T cnt = static_cast<T>(count);
      if (!contiguous) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += mean ? g[(*map)[i]] / cnt : g[(*map)[i]];
        return;
      }
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = g.data() + o * inner;
        T* dst = ga + o * mid * inner;
        if (inner == 1) {
          const T v = mean ? src[0] / cnt : src[0];
          for (std::size_t q = 0; q < mid; ++q) dst[q] += v;
          continue;
        }
        for (std::size_t q = 0; q < mid; ++q, dst += inner) {
          if (mean) {
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] / cnt;
          } else {
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Clip

template <typename T>
BasicTensor<T> clip(const BasicTensor<T>& a, T lo, T hi) {
  if (lo > hi) throw ValueError("clip: lower bound exceeds upper bound");
  BasicTensor<T> out = make_output<T>(a.shape());
  const std::size_t n = out.numel();
  const T* x = a.data().data();
  T* y = out_ptr(out);
  for (std::size_t i = 0; i < n; ++i) y[i] = std::min(std::max(x[i], lo), hi);
  if (detail::needs_grad<T>({a})) {
    auto ia = a.impl();
    detail::record_op<T>({a}, out, [ia, lo, hi, n](std::span<const T> g) {
      T* ga = ia->grad_buffer().data();
      const T* xv = ia->data->data();
      for (std::size_t i = 0; i < n; ++i) {
        if (xv[i] > lo && xv[i] < hi) ga[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> clip(const BasicTensor<T>& a, const BasicTensor<T>& lo, const BasicTensor<T>& hi) {
  if (lo.shape() != a.shape() || hi.shape() != a.shape()) {
    throw ShapeError("clip: bound shapes must match the input shape " + shape_str(a.shape()));
  }
  const std::size_t n = a.numel();
  const T* l = lo.data().data();
  const T* h = hi.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    if (l[i] > h[i]) throw ValueError("clip: lower bound exceeds upper bound");
  }
  BasicTensor<T> out = make_output<T>(a.shape());
  const T* x = a.data().data();
  T* y = out_ptr(out);
  for (std::size_t i = 0; i < n; ++i) y[i] = std::min(std::max(x[i], l[i]), h[i]);
  if (detail::needs_grad<T>({a})) {
    auto ia = a.impl();
    auto il = lo.impl()->data;
    auto ih = hi.impl()->data;
    detail::record_op<T>({a}, out, [ia, il, ih, n](std::span<const T> g) {
      T* ga = ia->grad_buffer().data();
      const T* xv = ia->data->data();
      for (std::size_t i = 0; i < n; ++i) {
        if (xv[i] > (*il)[i] && xv[i] < (*ih)[i]) ga[i] += g[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  validate_shape(shape);
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = a.impl()->data;
  BasicTensor<T> out = BasicTensor<T>::from_impl(std::move(impl));
  if (detail::needs_grad<T>({a})) {
    auto ia = a.impl();
    const std::size_t n = a.numel();
    detail::record_op<T>({a}, out, [ia, n](std::span<const T> g) {
      T* ga = ia->grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: invalid axis");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t k = 0; k < first.size(); ++k) {
      if (k != axis && p.dim(k) != first[k]) throw ShapeError("concat: shape mismatch");
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= first[k];
  for (std::size_t k = axis + 1; k < first.size(); ++k) inner *= first[k];
  BasicTensor<T> out = make_output<T>(out_shape);
  T* y = out_ptr(out);
  const std::size_t out_block = out_shape[axis] * inner;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t block = p.dim(axis) * inner;
    const T* x = p.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(x + o * block, x + (o + 1) * block, y + o * out_block + off);
    }
    off += block;
  }
  if (detail::needs_grad<T>(parts)) {
    std::vector<detail::ImplPtr<T>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    detail::record_op<T>(parts, out, [impls, offsets, outer, inner, out_block, axis](std::span<const T> g) {
      for (std::size_t q = 0; q < impls.size(); ++q) {
        if (!wants_grad(impls[q])) continue;
        T* gp = impls[q]->grad_buffer().data();
        const std::size_t block = impls[q]->shape[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = g.data() + o * out_block + offsets[q];
          T* dst = gp + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> straight_through(const BasicTensor<T>& hard, const BasicTensor<T>& soft) {
  if (hard.shape() != soft.shape()) {
    throw ShapeError("straight_through: shape mismatch " + shape_str(hard.shape()) + " vs " +
                     shape_str(soft.shape()));
  }
  BasicTensor<T> out = BasicTensor<T>(hard.shape(), hard.to_vector());
  if (detail::needs_grad<T>({soft})) {
    auto is = soft.impl();
    const std::size_t n = soft.numel();
    detail::record_op<T>({soft}, out, [is, n](std::span<const T> g) {
      T* gs = is->grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) gs[i] += g[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> min_pool_window(const BasicTensor<T>& a, std::size_t radius) {
  if (a.rank() < 2) throw ShapeError("min_pool_window expects at least 2 axes");
  const std::size_t h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1);
  const std::size_t planes = a.numel() / (h * w);
  BasicTensor<T> out = make_output<T>(a.shape());
  const T* x = a.data().data();
  T* y = out_ptr(out);
  auto argmin = std::make_shared<std::vector<std::size_t>>(a.numel());
  const long r = static_cast<long>(radius);
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * h * w;
    for (long i = 0; i < static_cast<long>(h); ++i) {
      for (long j = 0; j < static_cast<long>(w); ++j) {
        std::size_t best = base + static_cast<std::size_t>(i) * w + static_cast<std::size_t>(j);
        for (long di = std::max(0L, i - r); di <= std::min<long>(h - 1, i + r); ++di) {
          for (long dj = std::max(0L, j - r); dj <= std::min<long>(w - 1, j + r); ++dj) {
            const std::size_t idx = base + static_cast<std::size_t>(di) * w + static_cast<std::size_t>(dj);
            if (x[idx] < x[best] || (x[idx] == x[best] && idx < best)) best = idx;
          }
        }
        const std::size_t o = base + static_cast<std::size_t>(i) * w + static_cast<std::size_t>(j);
        y[o] = x[best];
        (*argmin)[o] = best;
      }
    }
  }
  if (detail::needs_grad<T>({a})) {
    auto ia = a.impl();
    detail::record_op<T>({a}, out, [ia, argmin](std::span<const T> g) {
      T* ga = ia->grad_buffer().data();
      for (std::size_t o = 0; o < g.size(); ++o) ga[(*argmin)[o]] += g[o];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define PZ_INSTANTIATE_TENSOR(T)                                                                 \
  template class BasicTensor<T>;                                                                 \
  template class BasicTape<T>;                                                                   \
  template class NoGradGuard<T>;                                                                 \
  template void backward<T>(const BasicTensor<T>&);                                              \
  template bool detail::needs_grad<T>(const std::vector<BasicTensor<T>>&);                       \
  template void detail::record_op<T>(const std::vector<BasicTensor<T>>&, BasicTensor<T>&,        \
                                     typename BasicTape<T>::BackwardFn);                         \
  template BasicTensor<T> elementwise<T>(const BasicTensor<T>&, const BasicTensor<T>&, BinaryOp); \
  template BasicTensor<T> elementwise<T>(const BasicTensor<T>&, T, BinaryOp);                    \
  template BasicTensor<T> elementwise<T>(T, const BasicTensor<T>&, BinaryOp);                    \
  template BasicTensor<T> unary<T>(const BasicTensor<T>&, UnaryOp);                              \
  template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                    const BasicTensor<T>&, std::size_t, std::size_t);            \
  template BasicTensor<T> avg_pool2x<T>(const BasicTensor<T>&);                                  \
  template BasicTensor<T> upsample_nearest2x<T>(const BasicTensor<T>&);                          \
  template BasicTensor<T> reduce<T>(const BasicTensor<T>&, ReduceOp, std::vector<std::size_t>);  \
  template BasicTensor<T> clip<T>(const BasicTensor<T>&, T, T);                                  \
  template BasicTensor<T> clip<T>(const BasicTensor<T>&, const BasicTensor<T>&,                  \
                                  const BasicTensor<T>&);                                        \
  template BasicTensor<T> reshape<T>(const BasicTensor<T>&, Shape);                              \
  template BasicTensor<T> concat<T>(const std::vector<BasicTensor<T>>&, std::size_t);            \
  template BasicTensor<T> straight_through<T>(const BasicTensor<T>&, const BasicTensor<T>&);     \
  template BasicTensor<T> min_pool_window<T>(const BasicTensor<T>&, std::size_t);

PZ_INSTANTIATE_TENSOR(float)
PZ_INSTANTIATE_TENSOR(double)

#undef PZ_INSTANTIATE_TENSOR

}  // namespace pz
