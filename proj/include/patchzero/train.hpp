#pragma once

// Training loops. Every loop is single-threaded over parameter state and
// fully determined by (dataset, config, seed).
//
// Detector training runs in two stages. Stage 1 mixes benign images with
// downstream-only attacks against the frozen classifier. Stage 2 regenerates
// attacks at every step with BPDA gradients through the current detector.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "patchzero/attack.hpp"
#include "patchzero/data.hpp"
#include "patchzero/defense.hpp"
#include "patchzero/nn.hpp"

namespace pz {

struct StageSwitch {
  // When set, stage 2 starts after exactly this many stage-1 epochs.
  std::optional<std::size_t> fixed_epoch;
  double f1_tau = 0.95;
};

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;         // classifier training
  std::size_t stage1_epochs = 8;   // upper bound for stage 1
  std::size_t stage2_epochs = 4;
  double mix_ratio = 0.5;
  StageSwitch stage2_trigger;
  AttackConfig attack;  // training-time attack (iters 20, restarts 1 by default)
  double min_fraction = 0.02;
  double max_fraction = 0.10;
  PatchShape patch_shape = PatchShape::kSquare;
  double aux_weight = 0.4;
  // Probability that a clean classifier training image gets one mean-filled
  // square occluder, area uniform in [min_fraction, 2 * max_fraction].
  double occlusion_prob = 0.0;
  std::size_t val_examples = 128;  // validation subset for detector F1
  std::uint64_t seed = 0;

  TrainConfig() {
    attack.iters = 20;
    attack.restarts = 1;
  }
};

void validate(const TrainConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based, monotone across stages
  std::string stage;      // "classifier", "adversarial", "stage1", "stage2"
  double mean_loss = 0.0;
  double loss_first = 0.0;  // mean over the first tenth of the epoch's batches
  double loss_last = 0.0;   // mean over the last tenth
  double val_acc = 0.0;
  double val_f1 = 0.0;
  double attack_seconds = 0.0;
  double wall_seconds = 0.0;
  std::size_t attacked = 0;
  std::size_t examples = 0;
};

// Detector version consumed by a stage-2 attack versus the version current
// when the resulting batch updated the detector.
struct FreshnessRecord {
  std::uint64_t attack_version = 0;
  std::uint64_t update_version = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::vector<FreshnessRecord> freshness;
  std::vector<std::size_t> attacked_per_batch;
  std::vector<std::size_t> batch_sizes;

  // One JSON object per epoch; wall-clock fields are omitted when
  // include_timing is false so that logs can be compared across runs.
  std::string to_jsonl(bool include_timing = true) const;
  void append_jsonl(const std::string& path, bool include_timing = true) const;
};

struct ClassifierRun {
  ClassifierParams params;  // best validation accuracy
  TrainLog log;
};

ClassifierRun train_classifier(const Dataset& train, const Dataset& val, const TrainConfig& cfg);

// As train_classifier, but round(mix_ratio * B) examples of each batch are
// replaced by DO masked-PGD attacks against the current weights.
ClassifierRun adversarial_train_classifier(const Dataset& train, const Dataset& val, const TrainConfig& cfg);

struct DetectorRun {
  DetectorParams params;
  TrainLog log;
};

// Stage 1 attacks the whole training split once with DO attacks before the
// first epoch; each batch then mixes benign rows with their attacked copies.
// Stage 2 regenerates BPDA attacks against the current weights every step.
DetectorRun stage1_train_detector(const ClassifierParams& classifier, const Dataset& train,
                                  const Dataset& val, const TrainConfig& cfg);

DetectorRun stage2_train_detector(const ClassifierParams& classifier, const DetectorParams& init,
                                  const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                                  const DefenseConfig& defense, std::size_t first_epoch = 1);

struct TwoStageRun {
  DetectorParams stage1;
  DetectorParams final;
  TrainLog log;  // both stages
  std::size_t switch_epoch = 0;
};

TwoStageRun train_detector(const ClassifierParams& classifier, const Dataset& train, const Dataset& val,
                           const TrainConfig& cfg, const DefenseConfig& defense);

// True when the last two epochs have val F1 >= tau, or when the fixed epoch
// has been reached.
bool stage_switch_criterion(const TrainLog& log, const StageSwitch& rule);

}  // namespace pz
