#pragma once

// PZCK binary container (all integers little-endian u32):
//   "PZCK" | version | kind | count |
//   count x (name_len | name bytes | rank | dims[rank] | float32 payload) |
//   CRC32 of every preceding byte

#include <cstdint>
#include <string>
#include <vector>

#include "patchzero/data.hpp"
#include "patchzero/error.hpp"
#include "patchzero/nn.hpp"

namespace pz {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint32_t { kClassifier = 1, kDetector = 2, kDataset = 3 };

const char* checkpoint_kind_name(CheckpointKind k);

class CheckpointError : public FormatError {
 public:
  enum class Reason { kBadMagic, kCrcMismatch, kUnsupportedVersion, kTruncated, kMalformed };

  CheckpointError(Reason reason, const std::string& what) : FormatError(what), reason_(reason) {}
  Reason reason() const noexcept { return reason_; }

 private:
  Reason reason_;
};

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::kClassifier;
  std::vector<NamedTensor<float>> tensors;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
// Throws MissingArtifactError when the file does not exist.
Checkpoint load_checkpoint(const std::string& path);

void save_classifier(const ClassifierParams& p, const std::string& path);
ClassifierParams load_classifier(const std::string& path);
void save_detector(const DetectorParams& p, const std::string& path);
DetectorParams load_detector(const std::string& path);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes);
std::uint32_t file_crc32(const std::string& path);

}  // namespace pz
