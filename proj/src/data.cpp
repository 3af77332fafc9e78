#include "patchzero/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "patchzero/parallel.hpp"

namespace pz {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

bool inside_shape(ShapeClass cls, double dr, double dc, double r) {
  switch (cls) {
    case ShapeClass::kCircle:
      return dr * dr + dc * dc <= r * r;
    case ShapeClass::kSquare:
      return std::abs(dr) <= 0.8 * r && std::abs(dc) <= 0.8 * r;
    case ShapeClass::kTriangle:
      // Apex up, base of width 2r at the bottom.
      return dr >= -r && dr <= r && std::abs(dc) <= 0.5 * (dr + r);
    case ShapeClass::kCross: {
      const double t = 0.3 * r;
      return (std::abs(dr) <= t && std::abs(dc) <= r) || (std::abs(dc) <= t && std::abs(dr) <= r);
    }
  }
  return false;
}

Example render_shape(ShapeClass cls, int label, std::size_t s, std::uint64_t seed) {
  Rng rng(seed);
  double bg[3], fg[3];
  for (double& c : bg) c = rng.uniform();
  double dist2;
  do {
    dist2 = 0.0;
    for (int k = 0; k < 3; ++k) {
      fg[k] = rng.uniform();
      dist2 += (fg[k] - bg[k]) * (fg[k] - bg[k]);
    }
  } while (dist2 < 0.04);
  const double size = static_cast<double>(s);
  const double r = rng.uniform(0.2 * size, 0.32 * size);
  const double cr = 0.5 * size + rng.uniform(-size / 8.0, size / 8.0);
  const double cc = 0.5 * size + rng.uniform(-size / 8.0, size / 8.0);

  std::vector<float> px(3 * s * s);
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      const bool in = inside_shape(cls, i + 0.5 - cr, j + 0.5 - cc, r);
      for (std::size_t c = 0; c < 3; ++c) {
        const double base = in ? fg[c] : bg[c];
        const double v = std::clamp(base + 0.02 * rng.normal(), 0.0, 1.0);
        px[(c * s + i) * s + j] = static_cast<float>(v);
      }
    }
  }
  return Example{Tensor({3, s, s}, std::move(px)), label};
}

std::vector<std::string> digit_names(std::size_t k) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(std::to_string(i));
  return out;
}

}  // namespace

Tensor stack_images(const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ValueError("stack_images: empty index list");
  const Shape& s = ds.examples.at(indices[0]).image.shape();
  const std::size_t per = shape_numel(s);
  std::vector<float> out(indices.size() * per);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Tensor& img = ds.examples.at(indices[k]).image;
    if (img.shape() != s) throw ShapeError("stack_images: mixed image shapes");
    std::copy(img.data().begin(), img.data().end(), out.begin() + k * per);
  }
  return Tensor({indices.size(), s[0], s[1], s[2]}, std::move(out));
}

std::vector<int> gather_labels(const Dataset& ds, const std::vector<std::size_t>& indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(ds.examples.at(i).label);
  return out;
}

const char* shape_class_name(ShapeClass c) {
  switch (c) {
    case ShapeClass::kCircle: return "circle";
    case ShapeClass::kSquare: return "square";
    case ShapeClass::kTriangle: return "triangle";
    case ShapeClass::kCross: return "cross";
  }
  return "?";
}

Dataset gen_shapes_dataset(std::size_t n_per_class, const std::vector<ShapeClass>& classes,
                           std::size_t image_size, std::uint64_t seed) {
  if (image_size == 0 || image_size % 4 != 0) {
    throw ValueError("image_size must be a positive multiple of 4");
  }
  if (classes.empty()) throw ValueError("gen_shapes_dataset: no classes");
  Dataset ds;
  for (ShapeClass c : classes) ds.class_names.emplace_back(shape_class_name(c));
  const std::size_t n = n_per_class * classes.size();
  ds.examples.resize(n);
  parallel_for(n, [&](std::size_t i) {
    const std::size_t k = i % classes.size();
    ds.examples[i] = render_shape(classes[k], static_cast<int>(k), image_size, mix_seed(seed, i));
  });
  if (n > 0) ds.mean = dataset_mean(ds);
  return ds;
}

ShapesSplits gen_shapes_splits(std::size_t train_per_class, std::size_t val_per_class,
                               std::size_t test_per_class, std::size_t image_size,
                               std::uint64_t seed) {
  const std::vector<ShapeClass> all = {ShapeClass::kCircle, ShapeClass::kSquare,
                                       ShapeClass::kTriangle, ShapeClass::kCross};
  ShapesSplits s;
  s.train = gen_shapes_dataset(train_per_class, all, image_size, mix_seed(seed, 1000));
  s.val = gen_shapes_dataset(val_per_class, all, image_size, mix_seed(seed, 2000));
  s.test = gen_shapes_dataset(test_per_class, all, image_size, mix_seed(seed, 3000));
  s.train.split = Split::kTrain;
  s.val.split = Split::kVal;
  s.test.split = Split::kTest;
  s.val.mean = s.train.mean;
  s.test.mean = s.train.mean;
  return s;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.size() < 16) throw FormatError("IDX image file truncated: " + images_path);
  if (lab.size() < 8) throw FormatError("IDX label file truncated: " + labels_path);
  if (read_be32(img, 0) != 0x00000803) throw FormatError("bad IDX image magic in " + images_path);
  if (read_be32(lab, 0) != 0x00000801) throw FormatError("bad IDX label magic in " + labels_path);
  const std::size_t n = read_be32(img, 4), rows = read_be32(img, 8), cols = read_be32(img, 12);
  const std::size_t nl = read_be32(lab, 4);
  if (n != nl) {
    throw FormatError("IDX count mismatch: " + std::to_string(n) + " images, " +
                      std::to_string(nl) + " labels");
  }
  if (rows == 0 || cols == 0) throw FormatError("IDX image dims must be positive");
  if (img.size() < 16 + n * rows * cols) throw FormatError("IDX image file truncated: " + images_path);
  if (lab.size() < 8 + n) throw FormatError("IDX label file truncated: " + labels_path);

  Dataset ds;
  int max_label = 0;
  ds.examples.reserve(n);
  const std::size_t plane = rows * cols;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> px(3 * plane);
    const std::uint8_t* src = img.data() + 16 + i * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      const float v = static_cast<float>(src[p]) / 255.0f;
      px[p] = px[plane + p] = px[2 * plane + p] = v;
    }
    const int label = lab[8 + i];
    max_label = std::max(max_label, label);
    ds.examples.push_back({Tensor({3, rows, cols}, std::move(px)), label});
  }
  ds.class_names = digit_names(static_cast<std::size_t>(max_label) + 1);
  if (n > 0) ds.mean = dataset_mean(ds);
  return ds;
}

void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  if (ds.examples.empty()) throw ValueError("write_idx: empty dataset");
  const std::size_t rows = ds.height(), cols = ds.width(), plane = rows * cols;
  std::vector<std::uint8_t> img, lab;
  put_be32(img, 0x00000803);
  put_be32(img, static_cast<std::uint32_t>(ds.size()));
  put_be32(img, static_cast<std::uint32_t>(rows));
  put_be32(img, static_cast<std::uint32_t>(cols));
  put_be32(lab, 0x00000801);
  put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (const Example& e : ds.examples) {
    auto px = e.image.data();
    for (std::size_t p = 0; p < plane; ++p) img.push_back(to_byte(px[p]));
    if (e.label < 0 || e.label > 255) throw ValueError("write_idx: label out of byte range");
    lab.push_back(static_cast<std::uint8_t>(e.label));
  }
  write_file(images_path, img);
  write_file(labels_path, lab);
}

Dataset load_cifar_binary(const std::string& path) {
  constexpr std::size_t kRecord = 3073, kPlane = 1024;
  const auto bytes = read_file(path);
  if (bytes.empty() || bytes.size() % kRecord != 0) {
    throw FormatError("CIFAR file size " + std::to_string(bytes.size()) +
                      " is not a positive multiple of 3073: " + path);
  }
  Dataset ds;
  ds.class_names = {"airplane", "automobile", "bird", "cat", "deer",
                    "dog", "frog", "horse", "ship", "truck"};
  const std::size_t n = bytes.size() / kRecord;
  ds.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kRecord;
    if (rec[0] >= 10) {
      throw FormatError("CIFAR record " + std::to_string(i) + " has label " +
                        std::to_string(rec[0]));
    }
    std::vector<float> px(3 * kPlane);
    for (std::size_t p = 0; p < 3 * kPlane; ++p) px[p] = static_cast<float>(rec[1 + p]) / 255.0f;
    ds.examples.push_back({Tensor({3, 32, 32}, std::move(px)), rec[0]});
  }
  ds.mean = dataset_mean(ds);
  return ds;
}

void write_cifar_binary(const Dataset& ds, const std::string& path) {
  std::vector<std::uint8_t> out;
  for (const Example& e : ds.examples) {
    if (e.image.shape() != Shape{3, 32, 32}) throw ShapeError("CIFAR records are 3x32x32");
    if (e.label < 0 || e.label >= 10) throw ValueError("CIFAR labels must be in [0,10)");
    out.push_back(static_cast<std::uint8_t>(e.label));
    for (float v : e.image.data()) out.push_back(to_byte(v));
  }
  write_file(path, out);
}

Tensor dataset_mean(const Dataset& train) {
  if (train.examples.empty()) throw ValueError("dataset_mean: empty dataset");
  const std::size_t c = train.channels();
  const std::size_t plane = train.height() * train.width();
  std::vector<double> acc(c, 0.0);
  for (const Example& e : train.examples) {
    auto px = e.image.data();
    for (std::size_t k = 0; k < c; ++k) {
      double s = 0.0;
      for (std::size_t p = 0; p < plane; ++p) s += px[k * plane + p];
      acc[k] += s;
    }
  }
  std::vector<float> out(c);
  const double denom = static_cast<double>(plane) * static_cast<double>(train.size());
  for (std::size_t k = 0; k < c; ++k) out[k] = static_cast<float>(acc[k] / denom);
  return Tensor({c}, std::move(out));
}

const char* patch_shape_name(PatchShape s) {
  switch (s) {
    case PatchShape::kRectangle: return "rectangle";
    case PatchShape::kSquare: return "square";
    case PatchShape::kDiamond: return "diamond";
    case PatchShape::kOctagon: return "octagon";
  }
  return "?";
}

PatchShape parse_patch_shape(const std::string& name) {
  for (PatchShape s : {PatchShape::kRectangle, PatchShape::kSquare, PatchShape::kDiamond,
                       PatchShape::kOctagon}) {
    if (name == patch_shape_name(s)) return s;
  }
  throw ValueError("unknown patch shape '" + name + "'");
}

std::size_t BinaryMask::zeros() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{0}));
}

BinaryMask ones_mask(std::size_t height, std::size_t width) {
  return BinaryMask{height, width, std::vector<std::uint8_t>(height * width, 1)};
}

namespace {

bool in_patch(const PatchSpec& s, std::size_t a, std::size_t b) {
  switch (s.shape) {
    case PatchShape::kRectangle:
    case PatchShape::kSquare:
      return true;
    case PatchShape::kDiamond: {
      const double hr = 0.5 * static_cast<double>(s.h), hc = 0.5 * static_cast<double>(s.w);
      return std::abs(a + 0.5 - hr) / hr + std::abs(b + 0.5 - hc) / hc <= 1.0;
    }
    case PatchShape::kOctagon: {
      const std::size_t cut = std::min(s.h, s.w) / 3;
      const std::size_t da = std::min(a, s.h - 1 - a);
      const std::size_t db = std::min(b, s.w - 1 - b);
      return da + db >= cut;
    }
  }
  return false;
}

std::size_t shape_area(PatchShape shape, std::size_t h, std::size_t w) {
  PatchSpec s{0, 0, h, w, shape};
  std::size_t n = 0;
  for (std::size_t a = 0; a < h; ++a) {
    for (std::size_t b = 0; b < w; ++b) n += in_patch(s, a, b);
  }
  return n;
}

std::size_t round_pos(double v) { return static_cast<std::size_t>(std::max(0.0, std::round(v))); }

}  // namespace

PatchSpec sample_patch_spec(Rng& rng, std::size_t height, std::size_t width, double area_fraction,
                            PatchShape shape, std::optional<double> aspect) {
  if (!(area_fraction > 0.0 && area_fraction < 1.0)) {
    throw ValueError("area_fraction must lie in (0,1)");
  }
  const double area = area_fraction * static_cast<double>(height) * static_cast<double>(width);
  PatchSpec spec;
  spec.shape = shape;
  switch (shape) {
    case PatchShape::kSquare:
      spec.h = spec.w = round_pos(std::sqrt(area));
      break;
    case PatchShape::kRectangle: {
      const double a = aspect ? *aspect : std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
      if (!(a > 0.0)) throw ValueError("rectangle aspect must be positive");
      spec.h = round_pos(std::sqrt(area / a));
      spec.w = spec.h > 0 ? round_pos(area / static_cast<double>(spec.h)) : 0;
      break;
    }
    case PatchShape::kDiamond:
    case PatchShape::kOctagon: {
      const std::size_t limit = std::min(height, width);
      std::size_t best = 0;
      double best_err = area;
      for (std::size_t side = 1; side <= limit; ++side) {
        const double err = std::abs(static_cast<double>(shape_area(shape, side, side)) - area);
        if (err < best_err) {
          best_err = err;
          best = side;
        }
      }
      spec.h = spec.w = best;
      break;
    }
  }
  spec.h = std::min(spec.h, height);
  spec.w = std::min(spec.w, width);
  if (spec.h == 0 || spec.w == 0 || shape_area(shape, spec.h, spec.w) == 0) {
    throw ValueError("area_fraction " + std::to_string(area_fraction) +
                     " is too small for a " + patch_shape_name(shape) + " patch");
  }
  spec.x = static_cast<std::size_t>(rng.below(height - spec.h + 1));
  spec.y = static_cast<std::size_t>(rng.below(width - spec.w + 1));
  return spec;
}

BinaryMask rasterize_mask(const PatchSpec& spec, std::size_t height, std::size_t width) {
  if (spec.h == 0 || spec.w == 0 || spec.x + spec.h > height || spec.y + spec.w > width) {
    throw ValueError("patch spec does not fit the image");
  }
  BinaryMask m = ones_mask(height, width);
  for (std::size_t a = 0; a < spec.h; ++a) {
    for (std::size_t b = 0; b < spec.w; ++b) {
      if (in_patch(spec, a, b)) m.values[(spec.x + a) * width + spec.y + b] = 0;
    }
  }
  return m;
}

}  // namespace pz
