#include "patchzero/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

namespace pz {

const char* checkpoint_kind_name(CheckpointKind k) {
  switch (k) {
    case CheckpointKind::kClassifier: return "classifier";
    case CheckpointKind::kDetector: return "detector";
    case CheckpointKind::kDataset: return "dataset";
  }
  return "?";
}

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) {
  return crc32_z(crc32(0L, Z_NULL, 0), bytes.data(), bytes.size());
}

namespace {

using Reason = CheckpointError::Reason;

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) b.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t end) : b_(b), end_(end) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= std::uint32_t{b_[pos_ + k]} << (8 * k);
    pos_ += 4;
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }

  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw CheckpointError(Reason::kTruncated, "checkpoint truncated");
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError("missing artifact: " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> b = {'P', 'Z', 'C', 'K'};
  put_u32(b, kCheckpointVersion);
  put_u32(b, static_cast<std::uint32_t>(ckpt.kind));
  put_u32(b, static_cast<std::uint32_t>(ckpt.tensors.size()));
  std::set<std::string> names;
  for (const auto& nt : ckpt.tensors) {
    if (!names.insert(nt.name).second) throw ValueError("duplicate checkpoint entry '" + nt.name + "'");
    put_u32(b, static_cast<std::uint32_t>(nt.name.size()));
    b.insert(b.end(), nt.name.begin(), nt.name.end());
    put_u32(b, static_cast<std::uint32_t>(nt.tensor.rank()));
    for (std::size_t d : nt.tensor.shape()) put_u32(b, static_cast<std::uint32_t>(d));
    for (float v : nt.tensor.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      put_u32(b, bits);
    }
  }
  put_u32(b, crc32_of(b));
  return b;
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "PZCK", 4) != 0) {
    throw CheckpointError(Reason::kBadMagic, "not a PZCK checkpoint (bad magic)");
  }
  if (bytes.size() < 20) throw CheckpointError(Reason::kTruncated, "checkpoint truncated");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int k = 0; k < 4; ++k) stored |= std::uint32_t{bytes[body + k]} << (8 * k);
  const std::uint32_t actual = crc32_z(crc32(0L, Z_NULL, 0), bytes.data(), body);
  if (stored != actual) throw CheckpointError(Reason::kCrcMismatch, "checkpoint CRC mismatch");

  Reader r(bytes, body);
  r.str(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Reason::kUnsupportedVersion,
                          "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const std::uint32_t kind = r.u32();
  if (kind < 1 || kind > 3) throw CheckpointError(Reason::kMalformed, "unknown checkpoint kind");
  ckpt.kind = static_cast<CheckpointKind>(kind);
  const std::uint32_t count = r.u32();
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    std::string name = r.str(len);
    if (!names.insert(name).second) {
      throw CheckpointError(Reason::kMalformed, "duplicate checkpoint entry '" + name + "'");
    }
    const std::uint32_t rank = r.u32();
    if (rank == 0) throw CheckpointError(Reason::kMalformed, "zero-rank tensor '" + name + "'");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) throw CheckpointError(Reason::kMalformed, "zero dimension in '" + name + "'");
      n *= d;
    }
    if (n > body) throw CheckpointError(Reason::kTruncated, "checkpoint truncated");
    std::vector<float> data(n);
    for (float& v : data) v = r.f32();
    ckpt.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (!r.done()) throw CheckpointError(Reason::kMalformed, "trailing bytes after checkpoint entries");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_bytes(path)); }

namespace {

Checkpoint expect_kind(const std::string& path, CheckpointKind kind) {
  Checkpoint c = load_checkpoint(path);
  if (c.kind != kind) {
    throw FormatError(path + " holds a " + checkpoint_kind_name(c.kind) + ", expected a " +
                      checkpoint_kind_name(kind));
  }
  return c;
}

}  // namespace

void save_classifier(const ClassifierParams& p, const std::string& path) {
  save_checkpoint({CheckpointKind::kClassifier, p.named()}, path);
}

ClassifierParams load_classifier(const std::string& path) {
  return classifier_from_named(expect_kind(path, CheckpointKind::kClassifier).tensors);
}

void save_detector(const DetectorParams& p, const std::string& path) {
  save_checkpoint({CheckpointKind::kDetector, p.named()}, path);
}

DetectorParams load_detector(const std::string& path) {
  return detector_from_named(expect_kind(path, CheckpointKind::kDetector).tensors);
}

// Datasets reuse the container: images, labels, mean, split, and one
// "class:<name>" entry per class holding its index.
void save_dataset(const Dataset& ds, const std::string& path) {
  if (ds.examples.empty()) throw ValueError("save_dataset: empty dataset");
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Checkpoint c{CheckpointKind::kDataset, {}};
  c.tensors.push_back({"images", stack_images(ds, idx)});
  std::vector<float> labels;
  for (const Example& e : ds.examples) labels.push_back(static_cast<float>(e.label));
  c.tensors.push_back({"labels", Tensor({ds.size()}, std::move(labels))});
  c.tensors.push_back({"mean", ds.mean.defined() ? ds.mean.clone() : dataset_mean(ds)});
  c.tensors.push_back({"split", Tensor::scalar(static_cast<float>(ds.split))});
  for (std::size_t k = 0; k < ds.class_names.size(); ++k) {
    c.tensors.push_back({"class:" + ds.class_names[k], Tensor::scalar(static_cast<float>(k))});
  }
  save_checkpoint(c, path);
}

Dataset load_dataset(const std::string& path) {
  const Checkpoint c = expect_kind(path, CheckpointKind::kDataset);
  Dataset ds;
  Tensor images, labels;
  std::vector<std::pair<int, std::string>> classes;
  for (const auto& nt : c.tensors) {
    if (nt.name == "images") images = nt.tensor;
    else if (nt.name == "labels") labels = nt.tensor;
    else if (nt.name == "mean") ds.mean = nt.tensor;
    else if (nt.name == "split") ds.split = static_cast<Split>(static_cast<int>(nt.tensor.item()));
    else if (nt.name.rfind("class:", 0) == 0) classes.push_back({static_cast<int>(nt.tensor.item()), nt.name.substr(6)});
  }
  if (!images.defined() || !labels.defined() || images.rank() != 4 || labels.numel() != images.dim(0)) {
    throw FormatError("dataset checkpoint lacks consistent images/labels: " + path);
  }
  std::sort(classes.begin(), classes.end());
  for (auto& [k, name] : classes) ds.class_names.push_back(name);
  const std::size_t n = images.dim(0), per = images.numel() / n;
  const Shape s = {images.dim(1), images.dim(2), images.dim(3)};
  auto px = images.data();
  for (std::size_t i = 0; i < n; ++i) {
    ds.examples.push_back({Tensor(s, std::vector<float>(px.begin() + i * per, px.begin() + (i + 1) * per)),
                           static_cast<int>(labels.data()[i])});
  }
  return ds;
}

std::uint32_t file_crc32(const std::string& path) { return crc32_of(read_bytes(path)); }

}  // namespace pz
