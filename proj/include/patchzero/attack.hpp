#pragma once

// Untargeted patch attacks. Every update is confined to the patch region:
//   cand = clip(clip(X_adv + alpha*sign(g), X - eps, X + eps), 0, 1)
//   X_adv[patch] = cand[patch], X_adv[outside] unchanged.
//
// Attacks operate on batches. Each example draws its random start from its
// own stream (seed, stream id, restart), so results do not depend on how a
// dataset is split into batches.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "patchzero/data.hpp"
#include "patchzero/defense.hpp"
#include "patchzero/tensor.hpp"

namespace pz {

enum class AttackFamily { kMPGD, kMAPGD, kMCW };
enum class GradMode { kDO, kBPDA };

const char* attack_family_name(AttackFamily f);
AttackFamily parse_attack_family(const std::string& name);  // mpgd | mapgd | mcw
const char* grad_mode_name(GradMode m);
GradMode parse_grad_mode(const std::string& name);  // do | bpda

struct AttackConfig {
  AttackFamily family = AttackFamily::kMPGD;
  double eps = 1.0;
  double alpha = 0.01;
  std::size_t iters = 100;
  std::size_t restarts = 1;
  GradMode grad_mode = GradMode::kDO;
  std::uint64_t seed = 0;
  // AutoPGD
  double rho = 0.75;       // oscillation threshold on the fraction of increasing steps
  double momentum = 0.25;  // weight of the previous displacement
  bool halving = true;
  // CW
  double kappa = 0.0;
};

void validate(const AttackConfig& cfg);

// Family defaults: MPGD eps 1, alpha 0.01; MAPGD eps 0.3, alpha 0.1;
// MCW eps 1, alpha 0.01. All use 100 iterations.
AttackConfig default_attack(AttackFamily family);

struct AttackTarget {
  ImageFn<float> classifier;  // X -> logits
  ImageFn<float> detector;    // X -> benign probability, needed for BPDA
  const DefenseConfig* defense = nullptr;
};

enum class AttackLoss { kCrossEntropy, kCwMargin };

struct GradientResult {
  std::vector<float> grad;   // same layout as X
  std::vector<double> loss;  // per example
  Tensor logits;
};

// DO: gradient of the loss of f(X). BPDA: gradient of the loss of the
// defended pipeline with the surrogate backward path.
GradientResult attack_gradient(GradMode mode, const AttackTarget& target, const Tensor& x,
                               std::span<const int> labels, AttackLoss loss = AttackLoss::kCrossEntropy,
                               double kappa = 0.0);

// Per-example losses computed from logits in double precision.
std::vector<double> cross_entropy_per_example(const Tensor& logits, std::span<const int> labels);
std::vector<double> cw_margin_per_example(const Tensor& logits, std::span<const int> labels, double kappa);

// One signed step restricted to the masks (0 = patch pixel). Pixels outside
// the patch are copied from x_adv.
Tensor apply_patch_update(const Tensor& x_adv, std::span<const float> grad,
                          const std::vector<BinaryMask>& masks, double alpha, double eps,
                          const Tensor& x_orig);

struct AttackBatch {
  Tensor x;  // [N,C,H,W]
  std::vector<int> labels;
  std::vector<PatchSpec> specs;
  std::vector<std::uint64_t> stream_ids;  // defaults to 0..N-1 when empty
};

struct AttackResult {
  Tensor x_adv;
  std::vector<BinaryMask> masks;  // rasterized specs
  std::vector<double> loss;       // objective of the returned iterate (CE, or f_cw for MCW)
};

// Called after every iterate update with (restart, iteration, iterate, loss
// of the iterate). Iteration 0 is the starting point.
using AttackObserver = std::function<void(std::size_t, std::size_t, const Tensor&, std::span<const double>)>;

AttackResult masked_pgd(const AttackTarget& target, const AttackBatch& batch, const AttackConfig& cfg,
                        const AttackObserver& observer = {});
AttackResult masked_autopgd(const AttackTarget& target, const AttackBatch& batch,
                            const AttackConfig& cfg, const AttackObserver& observer = {});
// No random start; Adam (lr = alpha) on the CW margin, stopping per example
// at the first iterate with f_cw <= -kappa. Restarts are not used.
AttackResult masked_cw(const AttackTarget& target, const AttackBatch& batch, const AttackConfig& cfg,
                       const AttackObserver& observer = {});

AttackResult run_attack(const AttackTarget& target, const AttackBatch& batch, const AttackConfig& cfg,
                        const AttackObserver& observer = {});

struct MaskedExample {
  Tensor x;      // [C,H,W]
  Tensor x_adv;  // [C,H,W]
  PatchSpec spec;
  BinaryMask gt_mask;
  int label = 0;
};

MaskedExample attack_example(const AttackTarget& target, const Tensor& x, int label,
                             const PatchSpec& spec, const AttackConfig& cfg,
                             std::uint64_t stream_id = 0);

// AutoPGD checkpoint iterations for a budget of T steps: p0 = ceil(0.22T),
// then intervals shrinking by ceil(0.03T) down to ceil(0.06T).
std::vector<std::size_t> autopgd_checkpoints(std::size_t iters);

}  // namespace pz
