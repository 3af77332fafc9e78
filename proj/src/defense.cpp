#include "patchzero/defense.hpp"

#include <cmath>

#include "patchzero/nn.hpp"

namespace pz {

void validate(const DefenseConfig& cfg) {
  if (!(cfg.eps_p > 0.0 && cfg.eps_p < 1.0)) throw ValueError("defense eps_p must lie in (0,1)");
  if (!(cfg.k > 0.0)) throw ValueError("defense k must be positive");
}

namespace {

template <typename T>
BasicTensor<T> mean_as(const DefenseConfig& cfg, std::size_t channels) {
  if (!cfg.mean.defined() || cfg.mean.numel() != channels) {
    throw ShapeError("defense mean must have one value per channel (" + std::to_string(channels) + ")");
  }
  std::vector<T> v(cfg.mean.data().begin(), cfg.mean.data().end());
  return BasicTensor<T>({channels}, std::move(v));
}

// Reshapes a [N,H,W] / [H,W] mask to broadcast over the channel axis.
template <typename T>
BasicTensor<T> channel_view(const BasicTensor<T>& x, const BasicTensor<T>& m) {
  if (x.rank() == 4 && m.rank() == 3 && m.dim(0) == x.dim(0) && m.dim(1) == x.dim(2) &&
      m.dim(2) == x.dim(3)) {
    return reshape(m, {m.dim(0), 1, m.dim(1), m.dim(2)});
  }
  if (x.rank() == 3 && m.rank() == 2 && m.dim(0) == x.dim(1) && m.dim(1) == x.dim(2)) {
    return reshape(m, {1, m.dim(0), m.dim(1)});
  }
  throw ShapeError("mask " + shape_str(m.shape()) + " does not match image " + shape_str(x.shape()));
}

template <typename T>
std::size_t channel_count(const BasicTensor<T>& x) {
  if (x.rank() == 4) return x.dim(1);
  if (x.rank() == 3) return x.dim(0);
  throw ShapeError("expected an image batch [N,C,H,W] or image [C,H,W]");
}

}  // namespace

template <typename T>
BasicTensor<T> binarize(const BasicTensor<T>& p, T eps_p) {
  std::vector<T> out(p.numel());
  auto v = p.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] >= eps_p ? T(1) : T(0);
  return BasicTensor<T>(p.shape(), std::move(out));
}

template <typename T>
BasicTensor<T> sigmoid_surrogate(const BasicTensor<T>& p, T eps_p, T k) {
  return sigmoid((p - eps_p) * k);
}

BinaryMask dilate_zero_region(const BinaryMask& m, std::size_t r) {
  if (r == 0) return m;
  const std::size_t h = m.height, w = m.width;
  // Separable: a row pass then a column pass over the Chebyshev window.
  std::vector<std::uint8_t> rows(m.values.size());
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t lo = j >= r ? j - r : 0, hi = std::min(w - 1, j + r);
      std::uint8_t v = 1;
      for (std::size_t q = lo; q <= hi && v; ++q) v = m.values[i * w + q];
      rows[i * w + j] = v;
    }
  }
  BinaryMask out{h, w, std::vector<std::uint8_t>(m.values.size())};
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t lo = i >= r ? i - r : 0, hi = std::min(h - 1, i + r);
    for (std::size_t j = 0; j < w; ++j) {
      std::uint8_t v = 1;
      for (std::size_t q = lo; q <= hi && v; ++q) v = rows[q * w + j];
      out.values[i * w + j] = v;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> dilate_zero_region(const BasicTensor<T>& masks, std::size_t r) {
  NoGradGuard<T> guard;
  if (r == 0) return masks.detach();
  return min_pool_window(masks.detach(), r);
}

template <typename T>
BasicTensor<T> blend(const BasicTensor<T>& x, const BasicTensor<T>& m, const BasicTensor<T>& mean) {
  const std::size_t c = channel_count(x);
  if (mean.numel() != c) throw ShapeError("mean must have one value per channel");
  const BasicTensor<T> mv = channel_view(x, m);
  const BasicTensor<T> fill = reshape(mean, {c, 1, 1});
  return x * mv + fill * (T(1) - mv);
}

template <typename T>
BasicTensor<T> zero_out(const BasicTensor<T>& x, const BasicTensor<T>& m, const BasicTensor<T>& mean) {
  for (T v : m.data()) {
    if (v != T(0) && v != T(1)) throw ValueError("zero_out: mask is not binary");
  }
  return blend(x, m, mean);
}

Tensor masks_to_tensor(const std::vector<BinaryMask>& masks) {
  if (masks.empty()) throw ValueError("masks_to_tensor: empty list");
  const std::size_t h = masks[0].height, w = masks[0].width;
  std::vector<float> out;
  out.reserve(masks.size() * h * w);
  for (const BinaryMask& m : masks) {
    if (m.height != h || m.width != w) throw ShapeError("masks_to_tensor: mixed mask sizes");
    for (std::uint8_t v : m.values) out.push_back(v ? 1.0f : 0.0f);
  }
  return Tensor({masks.size(), h, w}, std::move(out));
}

std::vector<BinaryMask> tensor_to_masks(const Tensor& masks) {
  if (masks.rank() != 3) throw ShapeError("tensor_to_masks expects [N,H,W]");
  const std::size_t n = masks.dim(0), h = masks.dim(1), w = masks.dim(2);
  std::vector<BinaryMask> out;
  auto v = masks.data();
  for (std::size_t i = 0; i < n; ++i) {
    BinaryMask m{h, w, std::vector<std::uint8_t>(h * w)};
    for (std::size_t p = 0; p < h * w; ++p) {
      const float x = v[i * h * w + p];
      if (x != 0.0f && x != 1.0f) throw ValueError("tensor_to_masks: mask is not binary");
      m.values[p] = x == 1.0f;
    }
    out.push_back(std::move(m));
  }
  return out;
}

template <typename T>
PipelineOutput<T> pipeline_forward(const ImageFn<T>& detector, const ImageFn<T>& classifier,
                                   const BasicTensor<T>& x, const DefenseConfig& cfg) {
  NoGradGuard<T> guard;
  PipelineOutput<T> out;
  out.prob = detector(x);
  out.mask = dilate_zero_region(binarize(out.prob, static_cast<T>(cfg.eps_p)), cfg.dilation_radius);
  out.sanitized = zero_out(x, out.mask, mean_as<T>(cfg, channel_count(x)));
  out.logits = classifier(out.sanitized);
  out.prediction = argmax_rows(out.logits);
  return out;
}

template <typename T>
PipelineOutput<T> pipeline_forward_bpda(const ImageFn<T>& detector, const ImageFn<T>& classifier,
                                        const BasicTensor<T>& x, const DefenseConfig& cfg) {
  PipelineOutput<T> out;
  out.prob = detector(x);
  const T eps_p = static_cast<T>(cfg.eps_p);
  const BasicTensor<T> hard = dilate_zero_region(binarize(out.prob, eps_p), cfg.dilation_radius);
  BasicTensor<T> soft = sigmoid_surrogate(out.prob, eps_p, static_cast<T>(cfg.k));
  if (cfg.soften_dilation && cfg.dilation_radius > 0) soft = min_pool_window(soft, cfg.dilation_radius);
  out.mask = straight_through(hard, soft);
  out.sanitized = zero_out(x, out.mask, mean_as<T>(cfg, channel_count(x)));
  out.logits = classifier(out.sanitized);
  out.prediction = argmax_rows(out.logits);
  return out;
}

template <typename T>
PipelineOutput<T> pipeline_with_mask(const ImageFn<T>& classifier, const BasicTensor<T>& x,
                                     const BasicTensor<T>& masks, const DefenseConfig& cfg) {
  NoGradGuard<T> guard;
  PipelineOutput<T> out;
  out.prob = masks;
  out.mask = dilate_zero_region(masks, cfg.dilation_radius);
  out.sanitized = zero_out(x, out.mask, mean_as<T>(cfg, channel_count(x)));
  out.logits = classifier(out.sanitized);
  out.prediction = argmax_rows(out.logits);
  return out;
}

template <typename T>
BasicTensor<T> pipeline_soft_logits(const ImageFn<T>& detector, const ImageFn<T>& classifier,
                                    const BasicTensor<T>& x, const DefenseConfig& cfg) {
  const BasicTensor<T> soft =
      sigmoid_surrogate(detector(x), static_cast<T>(cfg.eps_p), static_cast<T>(cfg.k));
  return classifier(blend(x, soft, mean_as<T>(cfg, channel_count(x))));
}

#define PZ_INSTANTIATE_DEFENSE(T)                                                                  \
  template BasicTensor<T> binarize<T>(const BasicTensor<T>&, T);                                   \
  template BasicTensor<T> sigmoid_surrogate<T>(const BasicTensor<T>&, T, T);                       \
  template BasicTensor<T> dilate_zero_region<T>(const BasicTensor<T>&, std::size_t);               \
  template BasicTensor<T> blend<T>(const BasicTensor<T>&, const BasicTensor<T>&,                   \
                                   const BasicTensor<T>&);                                         \
  template BasicTensor<T> zero_out<T>(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                      const BasicTensor<T>&);                                      \
  template PipelineOutput<T> pipeline_forward<T>(const ImageFn<T>&, const ImageFn<T>&,             \
                                                 const BasicTensor<T>&, const DefenseConfig&);     \
  template PipelineOutput<T> pipeline_forward_bpda<T>(const ImageFn<T>&, const ImageFn<T>&,        \
                                                      const BasicTensor<T>&, const DefenseConfig&); \
  template PipelineOutput<T> pipeline_with_mask<T>(const ImageFn<T>&, const BasicTensor<T>&,       \
                                                   const BasicTensor<T>&, const DefenseConfig&);   \
  template BasicTensor<T> pipeline_soft_logits<T>(const ImageFn<T>&, const ImageFn<T>&,            \
                                                  const BasicTensor<T>&, const DefenseConfig&);

PZ_INSTANTIATE_DEFENSE(float)
PZ_INSTANTIATE_DEFENSE(double)

}  // namespace pz
