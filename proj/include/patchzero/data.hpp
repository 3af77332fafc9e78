#pragma once

// Datasets, patch placement and ground-truth masks.
//
// Mask polarity is global: 0 marks an adversarial pixel, 1 a benign one.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "patchzero/rng.hpp"
#include "patchzero/tensor.hpp"

namespace pz {

struct Example {
  Tensor image;  // [C,H,W], values in [0,1]
  int label = 0;
};

enum class Split { kTrain, kVal, kTest };

struct Dataset {
  std::vector<Example> examples;
  Tensor mean;  // [C], computed on the train split
  Split split = Split::kTrain;
  std::vector<std::string> class_names;

  std::size_t size() const { return examples.size(); }
  std::size_t channels() const { return examples.at(0).image.dim(0); }
  std::size_t height() const { return examples.at(0).image.dim(1); }
  std::size_t width() const { return examples.at(0).image.dim(2); }
  std::size_t num_classes() const { return class_names.size(); }
};

// Stacks the listed examples into [N,C,H,W] plus their labels.
Tensor stack_images(const Dataset& ds, const std::vector<std::size_t>& indices);
std::vector<int> gather_labels(const Dataset& ds, const std::vector<std::size_t>& indices);

enum class ShapeClass { kCircle, kSquare, kTriangle, kCross };

const char* shape_class_name(ShapeClass c);

// One centered (jittered) filled shape per image on a random background,
// classes interleaved so every prefix of length k*|classes| is balanced.
Dataset gen_shapes_dataset(std::size_t n_per_class, const std::vector<ShapeClass>& classes,
                           std::size_t image_size, std::uint64_t seed);

struct ShapesSplits {
  Dataset train, val, test;
};

// Three independently seeded splits; the train mean is copied to val/test.
ShapesSplits gen_shapes_splits(std::size_t train_per_class, std::size_t val_per_class,
                               std::size_t test_per_class, std::size_t image_size,
                               std::uint64_t seed);

// IDX: big-endian magic 0x00000803 (u8 images, dims n,rows,cols) and
// 0x00000801 (u8 labels, dim n). Gray pixels are replicated to 3 channels.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

// CIFAR-10 binary: records of 1 label byte + 3072 bytes (R, G, B planes of 32x32).
Dataset load_cifar_binary(const std::string& path);
void write_cifar_binary(const Dataset& ds, const std::string& path);

Tensor dataset_mean(const Dataset& train);

enum class PatchShape { kRectangle, kSquare, kDiamond, kOctagon };

const char* patch_shape_name(PatchShape s);
PatchShape parse_patch_shape(const std::string& name);

struct PatchSpec {
  std::size_t x = 0;  // row offset
  std::size_t y = 0;  // column offset
  std::size_t h = 1;
  std::size_t w = 1;
  PatchShape shape = PatchShape::kSquare;

  bool operator==(const PatchSpec&) const = default;
};

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;  // row-major, 0 = adversarial

  std::size_t zeros() const;
  bool operator==(const BinaryMask&) const = default;
};

BinaryMask ones_mask(std::size_t height, std::size_t width);

// Sizes the bounding box so the rasterized shape covers about
// area_fraction*H*W pixels, then places it uniformly inside the image.
//   square:    h = w = round(sqrt(A))
//   rectangle: aspect = w/h (log-uniform in [1/2, 2] when absent),
//              h = round(sqrt(A/aspect)), w = round(A/h)
//   diamond, octagon: h = w = the side whose rasterized area is closest to A
PatchSpec sample_patch_spec(Rng& rng, std::size_t height, std::size_t width, double area_fraction,
                            PatchShape shape, std::optional<double> aspect = std::nullopt);

// Rectangle and square fill the box. The diamond keeps pixel centers with
// |dr|/(h/2) + |dc|/(w/2) <= 1 about the box center. The octagon removes the
// corner triangles {a + b < c} with c = floor(min(h,w)/3), where a and b are
// a pixel's row and column distances to the nearest box edges.
BinaryMask rasterize_mask(const PatchSpec& spec, std::size_t height, std::size_t width);

}  // namespace pz
