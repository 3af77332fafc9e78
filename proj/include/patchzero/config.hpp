#pragma once

// Run configuration: one JSON document covering data, training, attack,
// defense and evaluation settings. Missing keys take defaults; unknown keys
// are rejected with their full path.

#include <cstdint>
#include <string>
#include <vector>

#include "patchzero/attack.hpp"
#include "patchzero/data.hpp"
#include "patchzero/defense.hpp"
#include "patchzero/train.hpp"

namespace pz {

enum class DataSource { kShapes, kIdx, kCifar };

const char* data_source_name(DataSource s);

struct DataConfig {
  DataSource source = DataSource::kShapes;
  std::size_t train_per_class = 1500;
  std::size_t val_per_class = 100;
  std::size_t test_per_class = 100;
  std::size_t image_size = 32;
  // External sources: the last val_fraction of the training file becomes
  // the validation split.
  std::string train_images, train_labels, test_images, test_labels;  // IDX
  std::string cifar_train, cifar_test;                               // CIFAR binary
  double val_fraction = 0.1;
};

struct EvalConfig {
  std::size_t examples = 200;
  std::size_t batch_size = 32;
  std::vector<double> patch_fractions = {0.02, 0.09};
  std::vector<AttackFamily> attacks = {AttackFamily::kMPGD, AttackFamily::kMAPGD, AttackFamily::kMCW};
  std::vector<GradMode> grad_modes = {GradMode::kDO, GradMode::kBPDA};
  std::vector<AttackFamily> transfer_attacks = {AttackFamily::kMPGD, AttackFamily::kMAPGD};
  std::vector<PatchShape> shapes = {PatchShape::kDiamond, PatchShape::kOctagon, PatchShape::kRectangle};
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  DataConfig data;
  TrainConfig train;
  AttackConfig attack;  // evaluation and `attack` subcommand settings
  DefenseConfig defense;
  EvalConfig eval;

  RunConfig() { attack.restarts = 3; }
};

// Validates every section; messages name the offending key path.
void validate(const RunConfig& cfg);

RunConfig parse_config_text(const std::string& text);
// Throws MissingArtifactError when the file does not exist.
RunConfig parse_config(const std::string& path);

// Canonical form: every key present, sorted, two-space indent, trailing
// newline. parse(serialize(c)) == c and serialize is a fixed point.
std::string serialize_config(const RunConfig& cfg);

// Byte offset to 1-based (line, column).
std::pair<std::size_t, std::size_t> line_col(const std::string& text, std::size_t offset);

}  // namespace pz
