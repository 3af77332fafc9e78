#pragma once

// Detect-and-zero-out pipeline:
//   p = d(X); M = dilate(binarize(p, eps_p), r); X' = X*M + mean*(1-M); Y = f(X')
// The BPDA variant keeps these forward values and routes the backward pass
// of the binarization through sigmoid(k (p - eps_p)). Dilation is skipped
// in that backward path unless soften_dilation is set, in which case the
// surrogate is min-pooled over the same window.

#include <functional>
#include <vector>

#include "patchzero/data.hpp"
#include "patchzero/tensor.hpp"

namespace pz {

struct DefenseConfig {
  double eps_p = 0.5;
  double k = 50.0;
  std::size_t dilation_radius = 2;
  Tensor mean;  // [C]
  bool soften_dilation = false;
};

void validate(const DefenseConfig& cfg);

template <typename T>
using ImageFn = std::function<BasicTensor<T>(const BasicTensor<T>&)>;

// 1 where p >= eps_p (ties count as benign), else 0. Not differentiable.
template <typename T>
BasicTensor<T> binarize(const BasicTensor<T>& p, T eps_p);

// 1 / (1 + exp(-k (p - eps_p))), differentiable.
template <typename T>
BasicTensor<T> sigmoid_surrogate(const BasicTensor<T>& p, T eps_p, T k);

// A pixel becomes 0 iff some pixel within Chebyshev distance r is 0.
BinaryMask dilate_zero_region(const BinaryMask& m, std::size_t r);
template <typename T>
BasicTensor<T> dilate_zero_region(const BasicTensor<T>& masks, std::size_t r);

// X [N,C,H,W] or [C,H,W]; M [N,H,W] or [H,W]; mean [C].
// blend() accepts any M; zero_out() additionally requires M to be binary.
template <typename T>
BasicTensor<T> blend(const BasicTensor<T>& x, const BasicTensor<T>& m, const BasicTensor<T>& mean);
template <typename T>
BasicTensor<T> zero_out(const BasicTensor<T>& x, const BasicTensor<T>& m, const BasicTensor<T>& mean);

Tensor masks_to_tensor(const std::vector<BinaryMask>& masks);
std::vector<BinaryMask> tensor_to_masks(const Tensor& masks);

template <typename T>
struct PipelineOutput {
  BasicTensor<T> prob;       // detector output [N,H,W]
  BasicTensor<T> mask;       // M after dilation [N,H,W]
  BasicTensor<T> sanitized;  // X'
  BasicTensor<T> logits;
  std::vector<int> prediction;
};

template <typename T>
PipelineOutput<T> pipeline_forward(const ImageFn<T>& detector, const ImageFn<T>& classifier,
                                   const BasicTensor<T>& x, const DefenseConfig& cfg);

template <typename T>
PipelineOutput<T> pipeline_forward_bpda(const ImageFn<T>& detector, const ImageFn<T>& classifier,
                                        const BasicTensor<T>& x, const DefenseConfig& cfg);

// Classifier on zero_out(X, dilate(M_given, r), mean); the detector is bypassed.
template <typename T>
PipelineOutput<T> pipeline_with_mask(const ImageFn<T>& classifier, const BasicTensor<T>& x,
                                     const BasicTensor<T>& masks, const DefenseConfig& cfg);

// The fully smooth composition f(blend(X, h'(d(X)), mean)), used as a
// finite-difference reference for the BPDA gradient.
template <typename T>
BasicTensor<T> pipeline_soft_logits(const ImageFn<T>& detector, const ImageFn<T>& classifier,
                                    const BasicTensor<T>& x, const DefenseConfig& cfg);

}  // namespace pz
