#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "patchzero/attack.hpp"
#include "patchzero/data.hpp"
#include "patchzero/defense.hpp"
#include "patchzero/nn.hpp"

namespace pz {

// Maps a batch [N,C,H,W] to top-1 predictions.
using Predictor = std::function<std::vector<int>(const Tensor&)>;

Predictor classifier_predictor(const ClassifierParams& params);
Predictor defended_predictor(const ClassifierParams& classifier, const DetectorParams& detector,
                             const DefenseConfig& cfg);

ImageFn<float> classifier_fn(const ClassifierParams& params);
ImageFn<float> detector_fn(const DetectorParams& params);
AttackTarget make_target(const ClassifierParams& classifier, const DetectorParams* detector,
                         const DefenseConfig* defense);

// Top-1 accuracy over a stack of images.
double accuracy(const Predictor& predict, const Tensor& images, const std::vector<int>& labels,
                std::size_t batch_size = 64);
double accuracy(const Predictor& predict, const Dataset& ds, std::size_t batch_size = 64);

struct PatchSampling {
  double fraction = 0.09;
  // When max_fraction > fraction, each example draws its fraction uniformly
  // from [fraction, max_fraction].
  double max_fraction = 0.0;
  PatchShape shape = PatchShape::kSquare;
  std::uint64_t seed = 0;
};

// Seeded per-example patch specs; example i always receives the same spec
// for a given sampling seed, independent of batching.
std::vector<PatchSpec> sample_specs(const PatchSampling& sampling, std::size_t height, std::size_t width,
                                    const std::vector<std::uint64_t>& example_ids);

struct AttackedSet {
  Tensor x;      // clean [N,C,H,W]
  Tensor x_adv;  // attacked [N,C,H,W]
  std::vector<int> labels;
  std::vector<PatchSpec> specs;
  std::vector<BinaryMask> masks;
  std::vector<double> loss;
  double seconds = 0.0;
};

// Attacks the listed examples in batches. Example ids double as the attack
// stream ids and the patch-sampling ids.
AttackedSet make_attacked_set(const AttackTarget& target, const Dataset& ds,
                              const std::vector<std::size_t>& indices, const AttackConfig& cfg,
                              const PatchSampling& sampling, std::size_t batch_size = 32);

std::vector<std::size_t> first_indices(const Dataset& ds, std::size_t limit);

// Classifier accuracy on zero_out(X_adv, dilate(M_gt, r), mean).
double gt_mask_bound(const ClassifierParams& classifier, const AttackedSet& set, const DefenseConfig& cfg);

// Positive class: adversarial pixel (mask value 0). Micro-averaged.
struct SegCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  SegCounts& operator+=(const SegCounts& o);
};

struct SegMetrics {
  double precision = 0.0, recall = 0.0, accuracy = 0.0, f1 = 0.0;
  // No predicted positives: precision reported as 0.
  bool precision_undefined = false;
  // No actual positives: recall reported as 0.
  bool recall_undefined = false;
  SegCounts counts;
};

SegCounts count_segmentation(const std::vector<BinaryMask>& pred, const std::vector<BinaryMask>& gt);
SegMetrics metrics_from_counts(const SegCounts& c);
SegMetrics segmentation_metrics(const std::vector<BinaryMask>& pred, const std::vector<BinaryMask>& gt);

// binarize(d(X), eps_p) per image, without dilation.
std::vector<BinaryMask> predict_masks(const DetectorParams& detector, const Tensor& images, double eps_p,
                                      std::size_t batch_size = 64);

// Fraction of benign pixels with binarize(p) = 0.
double benign_fpr(const ImageFn<float>& detector, const Tensor& images, double eps_p,
                  std::size_t batch_size = 64);

struct MetricCell {
  std::string metric;
  std::string attack;     // "none" for benign quantities
  std::string grad_mode;  // "do", "bpda" or "none"
  double patch_fraction = 0.0;
  double value = 0.0;

  bool operator==(const MetricCell&) const = default;
};

struct TransferMatrix {
  std::vector<std::string> attacks;         // row = training attack, column = evaluation attack
  std::vector<std::vector<double>> values;  // defended accuracy

  bool operator==(const TransferMatrix&) const = default;
  // values[i][i] - values[j][i] for the largest off-diagonal gap per column.
  double max_offdiagonal_gap() const;
};

struct MetricsReport {
  std::vector<MetricCell> cells;
  TransferMatrix transfer;
  std::map<std::string, double> wall_seconds;  // not part of report.json
  std::map<std::string, bool> flags;

  void add(std::string metric, std::string attack, std::string grad_mode, double fraction, double value);
  // First cell matching all keys; throws ValueError when absent.
  double get(const std::string& metric, const std::string& attack = "none",
             const std::string& grad_mode = "none", double fraction = 0.0) const;
  bool has(const std::string& metric, const std::string& attack = "none",
           const std::string& grad_mode = "none", double fraction = 0.0) const;

  bool operator==(const MetricsReport&) const = default;
};

// report.json carries everything except wall times, so that a seeded rerun
// reproduces it byte for byte; wall times go to timings.json.
std::string report_to_json(const MetricsReport& r);
MetricsReport report_from_json(const std::string& text);
std::string report_to_csv(const MetricsReport& r);
// Writes report.json, tables.csv and timings.json into dir.
void emit_report(const MetricsReport& r, const std::string& dir);
MetricsReport load_report(const std::string& dir);

// Ordering chain benign >= gt >= PZ(DO) >= PZ(BPDA) >= undefended; the
// first link tolerates `first_link_slack`.
struct OrderingCheck {
  bool holds = true;
  std::string detail;
};
OrderingCheck check_ordering(double benign, double gt, double pz_do, double pz_bpda, double undefended,
                             double first_link_slack = 0.02);

// Defended accuracy of every detector (row) under every attack family
// (column), using downstream-only attacks generated once per family.
TransferMatrix transfer_matrix(const ClassifierParams& classifier,
                               const std::vector<std::pair<AttackFamily, DetectorParams>>& detectors,
                               const Dataset& ds, const std::vector<std::size_t>& indices,
                               const DefenseConfig& defense, const PatchSampling& sampling,
                               std::size_t attack_iters, std::size_t restarts, std::uint64_t seed);

struct ShapeTransferRow {
  PatchShape shape = PatchShape::kSquare;
  double f1 = 0.0;
  double defended_acc = 0.0;
  double undefended_acc = 0.0;
};

// DO MPGD attacks with each patch shape against a detector trained on squares.
std::vector<ShapeTransferRow> shape_transfer_eval(const ClassifierParams& classifier,
                                                  const DetectorParams& detector, const Dataset& ds,
                                                  const std::vector<std::size_t>& indices,
                                                  const DefenseConfig& defense,
                                                  const std::vector<PatchShape>& shapes,
                                                  const AttackConfig& attack, double fraction,
                                                  std::uint64_t seed);

struct EvalPlan {
  std::size_t examples = 200;
  std::size_t batch_size = 32;
  std::vector<double> patch_fractions = {0.02, 0.09};
  std::vector<AttackFamily> attacks = {AttackFamily::kMPGD};
  std::vector<GradMode> grad_modes = {GradMode::kDO, GradMode::kBPDA};
  // Per-family settings come from default_attack(family); iteration count,
  // restarts and the AutoPGD/CW knobs come from here.
  AttackConfig base;
  std::uint64_t seed = 0;
};

// Family settings for evaluation: default_attack(family) with the budget
// and algorithm knobs of `base`. The base family keeps its own eps/alpha.
AttackConfig eval_attack(const AttackConfig& base, AttackFamily family);

// Benign accuracy (undefended and defended), benign FPR, and for every
// (fraction, family, grad mode): undefended and defended robust accuracy,
// GT-mask accuracy and segmentation metrics. DO attacks target the bare
// classifier; BPDA attacks target the defended pipeline. The ordering chain
// is recorded in flags as "ordering/<family>/<fraction>".
MetricsReport full_evaluation(const ClassifierParams& classifier, const DetectorParams& detector,
                              const Dataset& ds, const DefenseConfig& defense, const EvalPlan& plan);

// Checksum of all parameter bytes (CRC32), used to show evaluation leaves
// models untouched.
std::uint32_t params_checksum(const std::vector<Tensor>& tensors);

}  // namespace pz
