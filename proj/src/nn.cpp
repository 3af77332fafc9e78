#include "patchzero/nn.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "patchzero/rng.hpp"

namespace pz {
namespace {

template <typename T>
BasicTensor<T> kaiming_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  return BasicTensor<T>(std::move(shape), std::move(data), true);
}

template <typename T>
BasicTensor<T> zero_bias(std::size_t n) {
  return BasicTensor<T>::zeros({n}, true);
}

template <typename T>
BasicTensor<T> detach_or_empty(const BasicTensor<T>& t) {
  return t.defined() ? t.detach() : BasicTensor<T>{};
}

template <typename T>
BasicTensor<T> clone_or_empty(const BasicTensor<T>& t, bool requires_grad) {
  if (!t.defined()) return {};
  BasicTensor<T> c = t.clone();
  c.set_requires_grad(requires_grad);
  return c;
}

template <typename To, typename From>
BasicTensor<To> cast_tensor(const BasicTensor<From>& t) {
  if (!t.defined()) return {};
  std::vector<To> data(t.numel());
  auto src = t.data();
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<To>(src[i]);
  return BasicTensor<To>(t.shape(), std::move(data), t.requires_grad());
}

template <typename T>
const BasicTensor<T>& lookup(const std::map<std::string, BasicTensor<T>>& table,
                             const std::string& name) {
  auto it = table.find(name);
  if (it == table.end()) throw FormatError("missing parameter tensor '" + name + "'");
  return it->second;
}

template <typename T>
std::map<std::string, BasicTensor<T>> to_table(const std::vector<NamedTensor<T>>& named) {
  std::map<std::string, BasicTensor<T>> table;
  for (const auto& nt : named) {
    if (!table.emplace(nt.name, nt.tensor).second) {
      throw FormatError("duplicate parameter tensor '" + nt.name + "'");
    }
  }
  return table;
}

void expect_shape(const Shape& got, const Shape& want, const std::string& what) {
  if (got != want) {
    throw ShapeError(what + ": expected " + shape_str(want) + ", got " + shape_str(got));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameter containers

template <typename T>
std::vector<NamedTensor<T>> BasicClassifierParams<T>::named() const {
  return {{"conv1.weight", conv1_w}, {"conv1.bias", conv1_b}, {"conv2.weight", conv2_w},
          {"conv2.bias", conv2_b},   {"fc.weight", fc_w},     {"fc.bias", fc_b}};
}

template <typename T>
std::vector<BasicTensor<T>> BasicClassifierParams<T>::tensors() const {
  return {conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b};
}

template <typename T>
BasicClassifierParams<T> BasicClassifierParams<T>::detached() const {
  BasicClassifierParams<T> p = *this;
  p.conv1_w = conv1_w.detach();
  p.conv1_b = conv1_b.detach();
  p.conv2_w = conv2_w.detach();
  p.conv2_b = conv2_b.detach();
  p.fc_w = fc_w.detach();
  p.fc_b = fc_b.detach();
  return p;
}

template <typename T>
BasicClassifierParams<T> BasicClassifierParams<T>::clone() const {
  BasicClassifierParams<T> p = *this;
  p.conv1_w = clone_or_empty(conv1_w, conv1_w.requires_grad());
  p.conv1_b = clone_or_empty(conv1_b, conv1_b.requires_grad());
  p.conv2_w = clone_or_empty(conv2_w, conv2_w.requires_grad());
  p.conv2_b = clone_or_empty(conv2_b, conv2_b.requires_grad());
  p.fc_w = clone_or_empty(fc_w, fc_w.requires_grad());
  p.fc_b = clone_or_empty(fc_b, fc_b.requires_grad());
  return p;
}

template <typename T>
void BasicClassifierParams<T>::set_requires_grad(bool value) {
  for (auto& t : tensors()) t.set_requires_grad(value);
}

template <typename T>
std::vector<NamedTensor<T>> BasicDetectorParams<T>::named() const {
  std::vector<NamedTensor<T>> out = {
      {"enc1.weight", enc1_w}, {"enc1.bias", enc1_b}, {"enc2.weight", enc2_w},
      {"enc2.bias", enc2_b},   {"enc3.weight", enc3_w}, {"enc3.bias", enc3_b},
      {"dec1.weight", dec1_w}, {"dec1.bias", dec1_b}, {"head.weight", head_w},
      {"head.bias", head_b}};
  if (has_aux()) {
    out.push_back({"aux.weight", aux_w});
    out.push_back({"aux.bias", aux_b});
  }
  return out;
}

template <typename T>
std::vector<BasicTensor<T>> BasicDetectorParams<T>::tensors() const {
  std::vector<BasicTensor<T>> out;
  for (auto& nt : named()) out.push_back(nt.tensor);
  return out;
}

template <typename T>
BasicDetectorParams<T> BasicDetectorParams<T>::detached() const {
  BasicDetectorParams<T> p = *this;
  p.enc1_w = enc1_w.detach();
  p.enc1_b = enc1_b.detach();
  p.enc2_w = enc2_w.detach();
  p.enc2_b = enc2_b.detach();
  p.enc3_w = enc3_w.detach();
  p.enc3_b = enc3_b.detach();
  p.dec1_w = dec1_w.detach();
  p.dec1_b = dec1_b.detach();
  p.head_w = head_w.detach();
  p.head_b = head_b.detach();
  p.aux_w = detach_or_empty(aux_w);
  p.aux_b = detach_or_empty(aux_b);
  return p;
}

template <typename T>
BasicDetectorParams<T> BasicDetectorParams<T>::clone() const {
  BasicDetectorParams<T> p = *this;
  p.enc1_w = clone_or_empty(enc1_w, enc1_w.requires_grad());
  p.enc1_b = clone_or_empty(enc1_b, enc1_b.requires_grad());
  p.enc2_w = clone_or_empty(enc2_w, enc2_w.requires_grad());
  p.enc2_b = clone_or_empty(enc2_b, enc2_b.requires_grad());
  p.enc3_w = clone_or_empty(enc3_w, enc3_w.requires_grad());
  p.enc3_b = clone_or_empty(enc3_b, enc3_b.requires_grad());
  p.dec1_w = clone_or_empty(dec1_w, dec1_w.requires_grad());
  p.dec1_b = clone_or_empty(dec1_b, dec1_b.requires_grad());
  p.head_w = clone_or_empty(head_w, head_w.requires_grad());
  p.head_b = clone_or_empty(head_b, head_b.requires_grad());
  p.aux_w = has_aux() ? clone_or_empty(aux_w, aux_w.requires_grad()) : BasicTensor<T>{};
  p.aux_b = has_aux() ? clone_or_empty(aux_b, aux_b.requires_grad()) : BasicTensor<T>{};
  return p;
}

template <typename T>
void BasicDetectorParams<T>::set_requires_grad(bool value) {
  for (auto& t : tensors()) t.set_requires_grad(value);
}

template <typename T>
BasicClassifierParams<T> init_classifier(std::uint64_t seed, std::size_t in_channels,
                                         std::size_t image_size, std::size_t num_classes) {
  if (image_size % 4 != 0 || image_size == 0) {
    throw ShapeError("classifier image size must be a positive multiple of 4");
  }
  Rng rng(mix_seed(seed, 0xC1A5));
  BasicClassifierParams<T> p;
  p.in_channels = in_channels;
  p.image_size = image_size;
  p.num_classes = num_classes;
  const std::size_t flat = 32 * (image_size / 4) * (image_size / 4);
  p.conv1_w = kaiming_uniform<T>(rng, {16, in_channels, 3, 3}, in_channels * 9);
  p.conv1_b = zero_bias<T>(16);
  p.conv2_w = kaiming_uniform<T>(rng, {32, 16, 3, 3}, 16 * 9);
  p.conv2_b = zero_bias<T>(32);
  p.fc_w = kaiming_uniform<T>(rng, {flat, num_classes}, flat);
  p.fc_b = zero_bias<T>(num_classes);
  return p;
}

template <typename T>
BasicDetectorParams<T> init_detector(std::uint64_t seed, std::size_t in_channels, bool with_aux) {
  Rng rng(mix_seed(seed, 0xDE7E));
  BasicDetectorParams<T> p;
  p.in_channels = in_channels;
  p.enc1_w = kaiming_uniform<T>(rng, {8, in_channels, 3, 3}, in_channels * 9);
  p.enc1_b = zero_bias<T>(8);
  p.enc2_w = kaiming_uniform<T>(rng, {16, 8, 3, 3}, 8 * 9);
  p.enc2_b = zero_bias<T>(16);
  p.enc3_w = kaiming_uniform<T>(rng, {16, 16, 3, 3}, 16 * 9);
  p.enc3_b = zero_bias<T>(16);
  p.dec1_w = kaiming_uniform<T>(rng, {8, 24, 3, 3}, 24 * 9);
  p.dec1_b = zero_bias<T>(8);
  p.head_w = kaiming_uniform<T>(rng, {1, 8, 1, 1}, 8);
  p.head_b = zero_bias<T>(1);
  if (with_aux) {
    p.aux_w = kaiming_uniform<T>(rng, {1, 16, 1, 1}, 16);
    p.aux_b = zero_bias<T>(1);
  }
  return p;
}

template <typename T>
BasicClassifierParams<T> classifier_from_named(const std::vector<NamedTensor<T>>& named) {
  const auto table = to_table(named);
  BasicClassifierParams<T> p;
  p.conv1_w = lookup(table, "conv1.weight");
  p.conv1_b = lookup(table, "conv1.bias");
  p.conv2_w = lookup(table, "conv2.weight");
  p.conv2_b = lookup(table, "conv2.bias");
  p.fc_w = lookup(table, "fc.weight");
  p.fc_b = lookup(table, "fc.bias");
  if (p.conv1_w.rank() != 4 || p.fc_w.rank() != 2) throw FormatError("classifier tensor ranks invalid");
  p.in_channels = p.conv1_w.dim(1);
  p.num_classes = p.fc_w.dim(1);
  const std::size_t cells = p.fc_w.dim(0) / 32;
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(cells))));
  p.image_size = side * 4;
  expect_shape(p.conv1_w.shape(), {16, p.in_channels, 3, 3}, "conv1.weight");
  expect_shape(p.conv1_b.shape(), {16}, "conv1.bias");
  expect_shape(p.conv2_w.shape(), {32, 16, 3, 3}, "conv2.weight");
  expect_shape(p.conv2_b.shape(), {32}, "conv2.bias");
  expect_shape(p.fc_w.shape(), {32 * side * side, p.num_classes}, "fc.weight");
  expect_shape(p.fc_b.shape(), {p.num_classes}, "fc.bias");
  p.set_requires_grad(true);
  return p;
}

template <typename T>
BasicDetectorParams<T> detector_from_named(const std::vector<NamedTensor<T>>& named) {
  const auto table = to_table(named);
  BasicDetectorParams<T> p;
  p.enc1_w = lookup(table, "enc1.weight");
  p.enc1_b = lookup(table, "enc1.bias");
  p.enc2_w = lookup(table, "enc2.weight");
  p.enc2_b = lookup(table, "enc2.bias");
  p.enc3_w = lookup(table, "enc3.weight");
  p.enc3_b = lookup(table, "enc3.bias");
  p.dec1_w = lookup(table, "dec1.weight");
  p.dec1_b = lookup(table, "dec1.bias");
  p.head_w = lookup(table, "head.weight");
  p.head_b = lookup(table, "head.bias");
  if (table.count("aux.weight")) {
    p.aux_w = lookup(table, "aux.weight");
    p.aux_b = lookup(table, "aux.bias");
  }
  if (p.enc1_w.rank() != 4) throw FormatError("detector tensor ranks invalid");
  p.in_channels = p.enc1_w.dim(1);
  expect_shape(p.enc1_w.shape(), {8, p.in_channels, 3, 3}, "enc1.weight");
  expect_shape(p.enc2_w.shape(), {16, 8, 3, 3}, "enc2.weight");
  expect_shape(p.enc3_w.shape(), {16, 16, 3, 3}, "enc3.weight");
  expect_shape(p.dec1_w.shape(), {8, 24, 3, 3}, "dec1.weight");
  expect_shape(p.head_w.shape(), {1, 8, 1, 1}, "head.weight");
  expect_shape(p.head_b.shape(), {1}, "head.bias");
  if (p.has_aux()) expect_shape(p.aux_w.shape(), {1, 16, 1, 1}, "aux.weight");
  p.set_requires_grad(true);
  return p;
}

template <typename To, typename From>
BasicClassifierParams<To> cast_params(const BasicClassifierParams<From>& p) {
  BasicClassifierParams<To> q;
  q.conv1_w = cast_tensor<To>(p.conv1_w);
  q.conv1_b = cast_tensor<To>(p.conv1_b);
  q.conv2_w = cast_tensor<To>(p.conv2_w);
  q.conv2_b = cast_tensor<To>(p.conv2_b);
  q.fc_w = cast_tensor<To>(p.fc_w);
  q.fc_b = cast_tensor<To>(p.fc_b);
  q.in_channels = p.in_channels;
  q.image_size = p.image_size;
  q.num_classes = p.num_classes;
  return q;
}

template <typename To, typename From>
BasicDetectorParams<To> cast_params(const BasicDetectorParams<From>& p) {
  BasicDetectorParams<To> q;
  q.enc1_w = cast_tensor<To>(p.enc1_w);
  q.enc1_b = cast_tensor<To>(p.enc1_b);
  q.enc2_w = cast_tensor<To>(p.enc2_w);
  q.enc2_b = cast_tensor<To>(p.enc2_b);
  q.enc3_w = cast_tensor<To>(p.enc3_w);
  q.enc3_b = cast_tensor<To>(p.enc3_b);
  q.dec1_w = cast_tensor<To>(p.dec1_w);
  q.dec1_b = cast_tensor<To>(p.dec1_b);
  q.head_w = cast_tensor<To>(p.head_w);
  q.head_b = cast_tensor<To>(p.head_b);
  q.aux_w = cast_tensor<To>(p.aux_w);
  q.aux_b = cast_tensor<To>(p.aux_b);
  q.in_channels = p.in_channels;
  q.version = p.version;
  return q;
}

// ---------------------------------------------------------------------------
// Forward passes

template <typename T>
BasicTensor<T> classifier_forward(const BasicClassifierParams<T>& params, const BasicTensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != params.in_channels || x.dim(2) != params.image_size ||
      x.dim(3) != params.image_size) {
    throw ShapeError("classifier expects [N," + std::to_string(params.in_channels) + "," +
                     std::to_string(params.image_size) + "," + std::to_string(params.image_size) +
                     "], got " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0);
  auto h = relu(conv2d(x, params.conv1_w, params.conv1_b, 1, 1));
  h = avg_pool2x(h);
  h = relu(conv2d(h, params.conv2_w, params.conv2_b, 1, 1));
  h = avg_pool2x(h);
  h = reshape(h, {n, h.numel() / n});
  return matmul(h, params.fc_w) + params.fc_b;
}

template <typename T>
DetectorOutput<T> detector_forward(const BasicDetectorParams<T>& params, const BasicTensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != params.in_channels) {
    throw ShapeError("detector expects [N," + std::to_string(params.in_channels) + ",H,W], got " +
                     shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeError("detector requires even H and W, got " + shape_str(x.shape()));
  auto e1 = relu(conv2d(x, params.enc1_w, params.enc1_b, 1, 1));
  auto e2 = relu(conv2d(avg_pool2x(e1), params.enc2_w, params.enc2_b, 1, 1));
  auto e3 = relu(conv2d(e2, params.enc3_w, params.enc3_b, 1, 1));
  auto cat = concat<T>({upsample_nearest2x(e3), e1}, 1);
  auto d1 = relu(conv2d(cat, params.dec1_w, params.dec1_b, 1, 1));
  DetectorOutput<T> out;
  out.prob = reshape(sigmoid(conv2d(d1, params.head_w, params.head_b, 1, 0)), {n, h, w});
  if (params.has_aux()) {
    out.aux = reshape(sigmoid(conv2d(e3, params.aux_w, params.aux_b, 1, 0)), {n, h / 2, w / 2});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels,
                             Reduction reduction) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ValueError("cross_entropy: label " + std::to_string(y) + " out of range");
    }
  }
  const T* z = logits.data().data();
  auto probs = std::make_shared<std::vector<T>>(n * k);
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z + i * k;
    const T mx = *std::max_element(row, row + k);
    T s = T(0);
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - lse);
    total += lse - row[labels[i]];
  }
  const bool mean = reduction == Reduction::kMean;
  BasicTensor<T> out = BasicTensor<T>::scalar(mean ? total / static_cast<T>(n) : total);
  if (detail::needs_grad<T>({logits})) {
    auto il = logits.impl();
    std::vector<int> ys(labels.begin(), labels.end());
    detail::record_op<T>({logits}, out, [il, probs, ys, n, k, mean](std::span<const T> g) {
      T* gl = il->grad_buffer().data();
      const T scale = mean ? g[0] / static_cast<T>(n) : g[0];
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const T target = static_cast<int>(j) == ys[i] ? T(1) : T(0);
          gl[i * k + j] += scale * ((*probs)[i * k + j] - target);
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> cw_margin_loss(const BasicTensor<T>& logits, std::span<const int> labels, T kappa,
                              Reduction reduction) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || logits.dim(1) < 2) {
    throw ShapeError("cw_margin_loss: bad logits shape " + shape_str(logits.shape()));
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  const T* z = logits.data().data();
  auto runner_up = std::make_shared<std::vector<std::size_t>>(n, k);
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw ValueError("cw_margin_loss: label out of range");
    const T* row = z + i * k;
    std::size_t best = k;
    for (std::size_t j = 0; j < k; ++j) {
      if (static_cast<int>(j) == y) continue;
      if (best == k || row[j] > row[best]) best = j;
    }
    const T margin = row[y] - row[best];
    if (margin > -kappa) {
      total += margin;
      (*runner_up)[i] = best;
    } else {
      total += -kappa;
    }
  }
  const bool mean = reduction == Reduction::kMean;
  BasicTensor<T> out = BasicTensor<T>::scalar(mean ? total / static_cast<T>(n) : total);
  if (detail::needs_grad<T>({logits})) {
    auto il = logits.impl();
    std::vector<int> ys(labels.begin(), labels.end());
    detail::record_op<T>({logits}, out, [il, runner_up, ys, n, k, mean](std::span<const T> g) {
      T* gl = il->grad_buffer().data();
      const T scale = mean ? g[0] / static_cast<T>(n) : g[0];
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = (*runner_up)[i];
        if (j == k) continue;
        gl[i * k + static_cast<std::size_t>(ys[i])] += scale;
        gl[i * k + j] -= scale;
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> pixel_bce(const BasicTensor<T>& p, const BasicTensor<T>& gt, const BasicTensor<T>& aux,
                         T aux_weight) {
  if (p.shape() != gt.shape() || p.rank() != 3) {
    throw ShapeError("pixel_bce: prob " + shape_str(p.shape()) + " vs mask " + shape_str(gt.shape()));
  }
  for (T v : gt.data()) {
    if (v != T(0) && v != T(1)) throw ValueError("pixel_bce: ground-truth mask must be binary");
  }
  const T lo = T(1e-7), hi = T(1) - T(1e-7);
  auto bce = [&](const BasicTensor<T>& prob, const BasicTensor<T>& target) {
    auto pc = clip(prob, lo, hi);
    auto pos = target * unary(pc, UnaryOp::kLog);
    auto neg = (T(1) - target) * unary(T(1) - pc, UnaryOp::kLog);
    return -mean(pos + neg);
  };
  auto loss = bce(p, gt);
  if (aux.defined() && aux_weight != T(0)) {
    const std::size_t n = gt.dim(0), h = gt.dim(1), w = gt.dim(2);
    if (aux.shape() != Shape{n, h / 2, w / 2}) {
      throw ShapeError("pixel_bce: aux map must be " + shape_str({n, h / 2, w / 2}));
    }
    std::vector<T> coarse(n * (h / 2) * (w / 2));
    const T* m = gt.data().data();
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < h / 2; ++i) {
        for (std::size_t j = 0; j < w / 2; ++j) {
          const T* r0 = m + (b * h + 2 * i) * w + 2 * j;
          coarse[(b * (h / 2) + i) * (w / 2) + j] = std::min({r0[0], r0[1], r0[w], r0[w + 1]});
        }
      }
    }
    BasicTensor<T> target(aux.shape(), std::move(coarse));
    loss = loss + bce(aux, target) * aux_weight;
  }
  return loss;
}

template <typename T>
std::vector<int> argmax_rows(const BasicTensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows expects [N,K]");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  const T* z = logits.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (z[i * k + j] > z[i * k + best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
void adam_step(const std::vector<BasicTensor<T>>& params, AdamState<T>& state, T lr) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state/parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel()) throw ShapeError("adam_step: moment shape mismatch");
    for (T g : params[i].grad()) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient");
    }
  }
  state.t += 1;
  const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta1), static_cast<double>(state.t)));
  const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta2), static_cast<double>(state.t)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    BasicTensor<T> p = params[i];
    auto data = p.mutable_data();
    auto grad = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const T g = grad.empty() ? T(0) : grad[j];
      m[j] = state.beta1 * m[j] + (T(1) - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (T(1) - state.beta2) * g * g;
      const T mhat = m[j] / bc1;
      const T vhat = v[j] / bc2;
      data[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// ---------------------------------------------------------------------------

#define PZ_INSTANTIATE_NN(T)                                                                          \
  template struct BasicClassifierParams<T>;                                                           \
  template struct BasicDetectorParams<T>;                                                             \
  template BasicClassifierParams<T> init_classifier<T>(std::uint64_t, std::size_t, std::size_t,       \
                                                       std::size_t);                                  \
  template BasicDetectorParams<T> init_detector<T>(std::uint64_t, std::size_t, bool);                 \
  template BasicClassifierParams<T> classifier_from_named<T>(const std::vector<NamedTensor<T>>&);     \
  template BasicDetectorParams<T> detector_from_named<T>(const std::vector<NamedTensor<T>>&);         \
  template BasicTensor<T> classifier_forward<T>(const BasicClassifierParams<T>&,                      \
                                                const BasicTensor<T>&);                               \
  template DetectorOutput<T> detector_forward<T>(const BasicDetectorParams<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> cross_entropy<T>(const BasicTensor<T>&, std::span<const int>, Reduction);   \
  template BasicTensor<T> cw_margin_loss<T>(const BasicTensor<T>&, std::span<const int>, T, Reduction); \
  template BasicTensor<T> pixel_bce<T>(const BasicTensor<T>&, const BasicTensor<T>&,                  \
                                       const BasicTensor<T>&, T);                                     \
  template std::vector<int> argmax_rows<T>(const BasicTensor<T>&);                                    \
  template void adam_step<T>(const std::vector<BasicTensor<T>>&, AdamState<T>&, T);

PZ_INSTANTIATE_NN(float)
PZ_INSTANTIATE_NN(double)
#undef PZ_INSTANTIATE_NN

template BasicClassifierParams<double> cast_params<double, float>(const BasicClassifierParams<float>&);
template BasicClassifierParams<float> cast_params<float, double>(const BasicClassifierParams<double>&);
template BasicDetectorParams<double> cast_params<double, float>(const BasicDetectorParams<float>&);
template BasicDetectorParams<float> cast_params<float, double>(const BasicDetectorParams<double>&);

}  // namespace pz
