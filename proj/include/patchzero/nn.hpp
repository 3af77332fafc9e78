#pragma once

// Fixed architectures used by the pipeline.
//
// TinyCNN classifier (input [N,C,S,S], S divisible by 4):
//   conv3x3(C->16, pad 1) -> relu -> avgpool2 -> conv3x3(16->32, pad 1) -> relu
//   -> avgpool2 -> flatten -> fc(32*(S/4)^2 -> K)
//
// TinyUNet detector (input [N,C,H,W], H and W even):
//   enc1 = relu(conv3x3(C->8))                       at full resolution
//   enc2 = relu(conv3x3(8->16)) on avgpool2(enc1)    at half resolution
//   enc3 = relu(conv3x3(16->16)) on enc2             bottleneck
//   dec1 = relu(conv3x3(24->8)) on concat(upsample(enc3), enc1)
//   prob = sigmoid(conv1x1(8->1)) on dec1            [N,H,W]
//   aux  = sigmoid(conv1x1(16->1)) on enc3           [N,H/2,W/2], optional
//
// The detector outputs the probability that a pixel is BENIGN. No batch
// normalization is used, so every example is processed independently.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "patchzero/tensor.hpp"

namespace pz {

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> tensor;
};

template <typename T>
struct BasicClassifierParams {
  BasicTensor<T> conv1_w, conv1_b;
  BasicTensor<T> conv2_w, conv2_b;
  BasicTensor<T> fc_w, fc_b;  // fc_w is [flattened, num_classes]
  std::size_t in_channels = 3;
  std::size_t image_size = 32;
  std::size_t num_classes = 4;

  std::vector<NamedTensor<T>> named() const;
  std::vector<BasicTensor<T>> tensors() const;
  BasicClassifierParams detached() const;
  BasicClassifierParams clone() const;
  void set_requires_grad(bool value);
};

template <typename T>
struct BasicDetectorParams {
  BasicTensor<T> enc1_w, enc1_b;
  BasicTensor<T> enc2_w, enc2_b;
  BasicTensor<T> enc3_w, enc3_b;
  BasicTensor<T> dec1_w, dec1_b;
  BasicTensor<T> head_w, head_b;
  BasicTensor<T> aux_w, aux_b;  // undefined when the auxiliary head is disabled
  std::size_t in_channels = 3;
  // Incremented by the training loop after every optimizer step.
  std::uint64_t version = 0;

  bool has_aux() const { return aux_w.defined(); }
  std::vector<NamedTensor<T>> named() const;
  std::vector<BasicTensor<T>> tensors() const;
  BasicDetectorParams detached() const;
  BasicDetectorParams clone() const;
  void set_requires_grad(bool value);
};

using ClassifierParams = BasicClassifierParams<float>;
using DetectorParams = BasicDetectorParams<float>;

enum class Arch { kClassifier, kDetector };

// Kaiming-uniform fan-in weights (bound sqrt(6/fan_in)), zero biases.
template <typename T>
BasicClassifierParams<T> init_classifier(std::uint64_t seed, std::size_t in_channels = 3,
                                         std::size_t image_size = 32,
                                         std::size_t num_classes = 4);
template <typename T>
BasicDetectorParams<T> init_detector(std::uint64_t seed, std::size_t in_channels = 3,
                                     bool with_aux = true);

// Rebuilds typed parameters from a named-tensor table (checkpoint loading).
template <typename T>
BasicClassifierParams<T> classifier_from_named(const std::vector<NamedTensor<T>>& named);
template <typename T>
BasicDetectorParams<T> detector_from_named(const std::vector<NamedTensor<T>>& named);

// Converts between precisions (verification runs use double).
template <typename To, typename From>
BasicClassifierParams<To> cast_params(const BasicClassifierParams<From>& p);
template <typename To, typename From>
BasicDetectorParams<To> cast_params(const BasicDetectorParams<From>& p);

template <typename T>
BasicTensor<T> classifier_forward(const BasicClassifierParams<T>& params, const BasicTensor<T>& x);

template <typename T>
struct DetectorOutput {
  BasicTensor<T> prob;  // [N,H,W], 1 = benign
  BasicTensor<T> aux;   // [N,H/2,W/2] or undefined
};

template <typename T>
DetectorOutput<T> detector_forward(const BasicDetectorParams<T>& params, const BasicTensor<T>& x);

// kSum makes each example's gradient independent of the batch size.
enum class Reduction { kMean, kSum };

// Mean (or sum) over the batch of -log softmax(logits)[label], max-shifted.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels,
                             Reduction reduction = Reduction::kMean);

// Mean (or sum) over the batch of max(z_y - max_{i != y} z_i, -kappa).
template <typename T>
BasicTensor<T> cw_margin_loss(const BasicTensor<T>& logits, std::span<const int> labels, T kappa,
                              Reduction reduction = Reduction::kMean);

// Mean per-pixel binary cross-entropy of p (clamped to [1e-7, 1-1e-7]) against
// gt in {0,1}, plus aux_weight times the same loss of `aux` against gt
// min-pooled 2x2 (a coarse cell is adversarial if any of its pixels is).
template <typename T>
BasicTensor<T> pixel_bce(const BasicTensor<T>& p, const BasicTensor<T>& gt,
                         const BasicTensor<T>& aux = {}, T aux_weight = T(0));

// Argmax per row; ties go to the lowest class index.
template <typename T>
std::vector<int> argmax_rows(const BasicTensor<T>& logits);

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::uint64_t t = 0;
  T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);
};

// Bias-corrected Adam update applied in place to each tensor's data using
// its accumulated gradient (absent gradient = zero). Throws NumericError on a
// non-finite gradient before touching any parameter.
template <typename T>
void adam_step(const std::vector<BasicTensor<T>>& params, AdamState<T>& state, T lr);

}  // namespace pz
