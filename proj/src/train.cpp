#include "patchzero/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "patchzero/error.hpp"
#include "patchzero/eval.hpp"
#include "patchzero/rng.hpp"

namespace pz {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Stream tags keep the shuffle, patch placement and attack noise independent.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kSpecStream = 3;
constexpr std::uint64_t kAttackStream = 4;
constexpr std::uint64_t kValStream = 5;
constexpr std::uint64_t kOcclusionStream = 6;

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::size_t attacked_count(double mix_ratio, std::size_t batch) {
  return static_cast<std::size_t>(std::llround(mix_ratio * static_cast<double>(batch)));
}

void require_finite(double loss, const char* where) {
  if (!std::isfinite(loss)) throw NumericError(std::string(where) + ": non-finite loss");
}

void zero_grads(const std::vector<Tensor>& params) {
  for (Tensor t : params) t.zero_grad();
}

void finish_losses(EpochRecord& rec, const std::vector<double>& losses) {
  if (losses.empty()) return;
  const std::size_t k = std::max<std::size_t>(1, losses.size() / 10);
  auto avg = [](auto b, auto e) { return std::accumulate(b, e, 0.0) / static_cast<double>(e - b); };
  rec.mean_loss = avg(losses.begin(), losses.end());
  rec.loss_first = avg(losses.begin(), losses.begin() + k);
  rec.loss_last = avg(losses.end() - k, losses.end());
}

// Writes the attacked rows back into the batch tensor in place.
void splice_rows(Tensor& batch, const Tensor& rows) {
  auto dst = batch.mutable_data();
  auto src = rows.data();
  std::copy(src.begin(), src.end(), dst.begin());
}

Tensor head_rows(const Tensor& x, std::size_t n) {
  Shape s = x.shape();
  const std::size_t per = x.numel() / s[0];
  s[0] = n;
  auto d = x.data();
  return Tensor(s, std::vector<float>(d.begin(), d.begin() + n * per));
}

// Patch specs for attacked training examples; the fraction is uniform over
// [min_fraction, max_fraction] and every draw is keyed by the global example
// counter so the stream does not depend on batch boundaries.
std::vector<PatchSpec> training_specs(const TrainConfig& cfg, std::size_t h, std::size_t w,
                                      const std::vector<std::uint64_t>& ids) {
  std::vector<PatchSpec> specs;
  for (std::uint64_t id : ids) {
    Rng rng(mix_seed(mix_seed(cfg.seed, kSpecStream), id));
    const double f = rng.uniform(cfg.min_fraction, cfg.max_fraction);
    specs.push_back(sample_patch_spec(rng, h, w, f, cfg.patch_shape));
  }
  return specs;
}

AttackConfig training_attack(const TrainConfig& cfg, GradMode mode) {
  AttackConfig a = cfg.attack;
  a.grad_mode = mode;
  a.seed = mix_seed(cfg.seed, kAttackStream);
  return a;
}

void check_splits(const Dataset& train, const Dataset& val) {
  if (train.examples.empty()) throw ValueError("training split is empty");
  if (val.examples.empty()) throw ValueError("validation split is empty");
}

// Mean-fills one random square in a fraction of the clean rows [first, N).
// Each example draws from its own stream, so batching does not matter.
void occlude_rows(Tensor& x, std::size_t first, const Tensor& mean, const TrainConfig& cfg,
                  std::uint64_t example_base) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto d = x.mutable_data();
  for (std::size_t i = first; i < n; ++i) {
    Rng rng(mix_seed(mix_seed(cfg.seed, kOcclusionStream), example_base + i));
    if (rng.uniform() >= cfg.occlusion_prob) continue;
    const double frac = rng.uniform(cfg.min_fraction, 2.0 * cfg.max_fraction);
    const BinaryMask m = rasterize_mask(sample_patch_spec(rng, h, w, frac, PatchShape::kSquare), h, w);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < h * w; ++p)
        if (m.values[p] == 0) d[(i * c + ch) * h * w + p] = mean.data()[ch];
  }
}

ClassifierRun classifier_loop(const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                              bool adversarial) {
  validate(cfg);
  check_splits(train, val);
  ClassifierParams params = init_classifier<float>(mix_seed(cfg.seed, kInitStream), train.channels(),
                                                   train.height(), train.num_classes());
  params.set_requires_grad(true);
  const std::vector<Tensor> tensors = params.tensors();
  AdamState<float> adam;
  const AttackConfig attack = training_attack(cfg, GradMode::kDO);

  ClassifierRun run;
  run.params = params.clone();
  double best_acc = -1.0;
  std::uint64_t example_counter = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.stage = adversarial ? "adversarial" : "classifier";
    std::vector<double> losses;
    const auto order = shuffled(train.size(), mix_seed(mix_seed(cfg.seed, kShuffleStream), epoch));
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + b,
                                         order.begin() + std::min(order.size(), b + cfg.batch_size));
      Tensor x = stack_images(train, idx);
      const std::vector<int> labels = gather_labels(train, idx);
      const std::size_t n_att = adversarial ? attacked_count(cfg.mix_ratio, idx.size()) : 0;
      if (n_att > 0) {
        const auto ta = Clock::now();
        AttackBatch ab;
        ab.x = head_rows(x, n_att);
        ab.labels.assign(labels.begin(), labels.begin() + n_att);
        for (std::size_t i = 0; i < n_att; ++i) ab.stream_ids.push_back(example_counter + i);
        ab.specs = training_specs(cfg, train.height(), train.width(), ab.stream_ids);
        const AttackResult r = masked_pgd(make_target(params, nullptr, nullptr), ab, attack);
        splice_rows(x, r.x_adv);
        rec.attack_seconds += seconds_since(ta);
      }
      if (cfg.occlusion_prob > 0.0) occlude_rows(x, n_att, train.mean, cfg, example_counter);
      example_counter += idx.size();
      run.log.attacked_per_batch.push_back(n_att);
      run.log.batch_sizes.push_back(idx.size());
      rec.attacked += n_att;
      rec.examples += idx.size();

      Tape tape;
      const Tensor loss = cross_entropy(classifier_forward(params, x), labels);
      require_finite(loss.item(), "train_classifier");
      tape.backward(loss);
      adam_step(tensors, adam, static_cast<float>(cfg.lr));
      zero_grads(tensors);
      losses.push_back(loss.item());
    }
    finish_losses(rec, losses);
    rec.val_acc = accuracy(classifier_predictor(params), val);
    rec.wall_seconds = seconds_since(t0);
    if (rec.val_acc > best_acc) {
      best_acc = rec.val_acc;
      run.params = params.clone();
    }
    run.log.epochs.push_back(rec);
  }
  run.params.set_requires_grad(false);
  return run;
}

// Validation set for detector F1: a fixed subset attacked once with DO
// attacks against the frozen classifier.
AttackedSet detector_val_set(const ClassifierParams& classifier, const Dataset& val, const TrainConfig& cfg) {
  PatchSampling sampling;
  sampling.fraction = cfg.min_fraction;
  sampling.max_fraction = cfg.max_fraction;
  sampling.shape = cfg.patch_shape;
  sampling.seed = mix_seed(cfg.seed, kValStream);
  AttackConfig a = training_attack(cfg, GradMode::kDO);
  a.seed = mix_seed(a.seed, kValStream);
  return make_attacked_set(make_target(classifier, nullptr, nullptr), val,
                           first_indices(val, cfg.val_examples), a, sampling);
}

double detector_val_f1(const DetectorParams& det, const AttackedSet& set, double eps_p) {
  return segmentation_metrics(predict_masks(det, set.x_adv, eps_p), set.masks).f1;
}

// Stage 1 attacks every training example once, up front: DO attacks do not
// depend on the detector, so only stage 2 needs fresh attacks per step.
struct AttackedPool {
  Tensor x_adv;
  std::vector<BinaryMask> masks;
};

AttackedPool attack_training_set(const ClassifierParams& classifier, const Dataset& train, const TrainConfig& cfg) {
  const AttackConfig attack = training_attack(cfg, GradMode::kDO);
  const AttackTarget target = make_target(classifier, nullptr, nullptr);
  const std::size_t n = train.size(), per = train.channels() * train.height() * train.width();
  std::vector<float> x(n * per);
  AttackedPool pool;
  for (std::size_t b = 0; b < n; b += cfg.batch_size) {
    AttackBatch ab;
    std::vector<std::size_t> idx;
    for (std::size_t i = b; i < std::min(n, b + cfg.batch_size); ++i) {
      idx.push_back(i);
      ab.stream_ids.push_back(i);
    }
    ab.x = stack_images(train, idx);
    ab.labels = gather_labels(train, idx);
    ab.specs = training_specs(cfg, train.height(), train.width(), ab.stream_ids);
    const AttackResult r = run_attack(target, ab, attack);
    std::copy(r.x_adv.data().begin(), r.x_adv.data().end(), x.begin() + b * per);
    pool.masks.insert(pool.masks.end(), r.masks.begin(), r.masks.end());
  }
  pool.x_adv = Tensor({n, train.channels(), train.height(), train.width()}, std::move(x));
  return pool;
}

struct DetectorLoop {
  const ClassifierParams& classifier;
  const Dataset& train;
  const TrainConfig& cfg;
  const DefenseConfig* defense;  // set for stage 2
  const AttackedPool* pool;      // set for stage 1
  const AttackedSet& val_set;
  double eps_p;
};

// One epoch of mixed benign/attacked detector training.
EpochRecord detector_epoch(const DetectorLoop& L, DetectorParams& det, AdamState<float>& adam,
                           std::size_t epoch, TrainLog& log) {
  const auto t0 = Clock::now();
  const bool stage2 = L.defense != nullptr;
  const std::vector<Tensor> tensors = det.tensors();
  const AttackConfig attack = training_attack(L.cfg, stage2 ? GradMode::kBPDA : GradMode::kDO);
  const std::size_t h = L.train.height(), w = L.train.width();
  EpochRecord rec;
  rec.epoch = epoch;
  rec.stage = stage2 ? "stage2" : "stage1";
  std::vector<double> losses;
  const auto order = shuffled(L.train.size(), mix_seed(mix_seed(L.cfg.seed, kShuffleStream), 1000 + epoch));
  std::uint64_t counter = static_cast<std::uint64_t>(epoch) * L.train.size() * 2;
  for (std::size_t b = 0; b < order.size(); b += L.cfg.batch_size) {
    const std::vector<std::size_t> idx(order.begin() + b,
                                       order.begin() + std::min(order.size(), b + L.cfg.batch_size));
    Tensor x = stack_images(L.train, idx);
    const std::vector<int> labels = gather_labels(L.train, idx);
    const std::size_t n_att = attacked_count(L.cfg.mix_ratio, idx.size());
    std::vector<BinaryMask> gt(idx.size(), ones_mask(h, w));
    if (n_att > 0 && L.pool != nullptr) {
      const std::size_t per = x.numel() / idx.size();
      auto dst = x.mutable_data();
      const auto src = L.pool->x_adv.data();
      for (std::size_t k = 0; k < n_att; ++k) {
        std::copy_n(src.begin() + idx[k] * per, per, dst.begin() + k * per);
        gt[k] = L.pool->masks[idx[k]];
      }
    } else if (n_att > 0) {
      const auto ta = Clock::now();
      AttackBatch ab;
      ab.x = head_rows(x, n_att);
      ab.labels.assign(labels.begin(), labels.begin() + n_att);
      for (std::size_t i = 0; i < n_att; ++i) ab.stream_ids.push_back(counter + i);
      ab.specs = training_specs(L.cfg, h, w, ab.stream_ids);
      const std::uint64_t attack_version = det.version;
      const AttackTarget target = stage2 ? make_target(L.classifier, &det, L.defense)
                                         : make_target(L.classifier, nullptr, nullptr);
      const AttackResult r = run_attack(target, ab, attack);
      splice_rows(x, r.x_adv);
      std::copy(r.masks.begin(), r.masks.end(), gt.begin());
      rec.attack_seconds += seconds_since(ta);
      if (stage2) {
        if (attack_version != det.version) throw ValueError("stage 2 attack used stale detector weights");
        log.freshness.push_back({attack_version, det.version});
      }
    }
    counter += idx.size();
    log.attacked_per_batch.push_back(n_att);
    log.batch_sizes.push_back(idx.size());
    rec.attacked += n_att;
    rec.examples += idx.size();

    Tape tape;
    const DetectorOutput<float> out = detector_forward(det, x);
    const Tensor loss = pixel_bce(out.prob, masks_to_tensor(gt), out.aux, static_cast<float>(L.cfg.aux_weight));
    require_finite(loss.item(), "train_detector");
    tape.backward(loss);
    adam_step(tensors, adam, static_cast<float>(L.cfg.lr));
    zero_grads(tensors);
    ++det.version;
    losses.push_back(loss.item());
  }
  finish_losses(rec, losses);
  rec.val_f1 = detector_val_f1(det, L.val_set, L.eps_p);
  rec.wall_seconds = seconds_since(t0);
  return rec;
}

void check_frozen(const ClassifierParams& classifier, std::uint32_t before) {
  if (params_checksum(classifier.tensors()) != before) {
    throw ValueError("classifier parameters changed during detector training");
  }
}

}  // namespace

void validate(const TrainConfig& cfg) {
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw ValueError("train.lr must be positive");
  if (cfg.batch_size == 0) throw ValueError("train.batch_size must be positive");
  if (!(cfg.mix_ratio >= 0.0 && cfg.mix_ratio <= 1.0)) throw ValueError("train.mix_ratio must lie in [0,1]");
  if (!(cfg.min_fraction > 0.0 && cfg.min_fraction <= cfg.max_fraction && cfg.max_fraction < 1.0)) {
    throw ValueError("train patch fractions must satisfy 0 < min_fraction <= max_fraction < 1");
  }
  if (!(cfg.stage2_trigger.f1_tau >= 0.0 && cfg.stage2_trigger.f1_tau <= 1.0)) {
    throw ValueError("train.stage2_trigger.f1_tau must lie in [0,1]");
  }
  if (cfg.aux_weight < 0.0) throw ValueError("train.aux_weight must be non-negative");
  if (!(cfg.occlusion_prob >= 0.0 && cfg.occlusion_prob <= 1.0)) {
    throw ValueError("train.occlusion_prob must lie in [0,1]");
  }
  validate(cfg.attack);
}

std::string TrainLog::to_jsonl(bool include_timing) const {
  std::string out;
  for (const EpochRecord& r : epochs) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["stage"] = r.stage;
    j["mean_loss"] = r.mean_loss;
    j["loss_first"] = r.loss_first;
    j["loss_last"] = r.loss_last;
    j["val_acc"] = r.val_acc;
    j["val_f1"] = r.val_f1;
    j["attacked"] = r.attacked;
    j["examples"] = r.examples;
    if (include_timing) {
      j["attack_seconds"] = r.attack_seconds;
      j["wall_seconds"] = r.wall_seconds;
    }
    out += j.dump() + "\n";
  }
  return out;
}

void TrainLog::append_jsonl(const std::string& path, bool include_timing) const {
  std::ofstream f(path, std::ios::app);
  if (!f) throw IoError("cannot write " + path);
  f << to_jsonl(include_timing);
}

ClassifierRun train_classifier(const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
  return classifier_loop(train, val, cfg, false);
}

ClassifierRun adversarial_train_classifier(const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
  return classifier_loop(train, val, cfg, true);
}

bool stage_switch_criterion(const TrainLog& log, const StageSwitch& rule) {
  if (log.epochs.empty()) return false;
  if (rule.fixed_epoch) return log.epochs.size() >= *rule.fixed_epoch;
  const std::size_t n = log.epochs.size();
  return n >= 2 && log.epochs[n - 1].val_f1 >= rule.f1_tau && log.epochs[n - 2].val_f1 >= rule.f1_tau;
}

DetectorRun stage1_train_detector(const ClassifierParams& classifier, const Dataset& train,
                                  const Dataset& val, const TrainConfig& cfg) {
  validate(cfg);
  check_splits(train, val);
  const std::uint32_t frozen = params_checksum(classifier.tensors());
  DetectorRun run;
  run.params = init_detector<float>(mix_seed(cfg.seed, kInitStream + 10), train.channels(), cfg.aux_weight > 0);
  run.params.set_requires_grad(true);
  AdamState<float> adam;
  const AttackedSet val_set = detector_val_set(classifier, val, cfg);
  const auto t0 = Clock::now();
  const AttackedPool pool = attack_training_set(classifier, train, cfg);
  const double pool_seconds = seconds_since(t0);
  const DetectorLoop loop{classifier, train, cfg, nullptr, &pool, val_set, DefenseConfig{}.eps_p};
  for (std::size_t epoch = 1; epoch <= cfg.stage1_epochs; ++epoch) {
    run.log.epochs.push_back(detector_epoch(loop, run.params, adam, epoch, run.log));
    if (epoch == 1) {
      run.log.epochs.back().attack_seconds += pool_seconds;
      run.log.epochs.back().wall_seconds += pool_seconds;
    }
    if (stage_switch_criterion(run.log, cfg.stage2_trigger)) break;
  }
  check_frozen(classifier, frozen);
  run.params.set_requires_grad(false);
  return run;
}

DetectorRun stage2_train_detector(const ClassifierParams& classifier, const DetectorParams& init,
                                  const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                                  const DefenseConfig& defense, std::size_t first_epoch) {
  validate(cfg);
  validate(defense);
  check_splits(train, val);
  const std::uint32_t frozen = params_checksum(classifier.tensors());
  DetectorRun run;
  run.params = init.clone();
  run.params.set_requires_grad(true);
  AdamState<float> adam;
  const AttackedSet val_set = detector_val_set(classifier, val, cfg);
  const DetectorLoop loop{classifier, train, cfg, &defense, nullptr, val_set, defense.eps_p};
  for (std::size_t k = 0; k < cfg.stage2_epochs; ++k) {
    run.log.epochs.push_back(detector_epoch(loop, run.params, adam, first_epoch + k, run.log));
  }
  check_frozen(classifier, frozen);
  run.params.set_requires_grad(false);
  return run;
}

TwoStageRun train_detector(const ClassifierParams& classifier, const Dataset& train, const Dataset& val,
                           const TrainConfig& cfg, const DefenseConfig& defense) {
  DetectorRun s1 = stage1_train_detector(classifier, train, val, cfg);
  TwoStageRun out;
  out.stage1 = s1.params.clone();
  out.switch_epoch = s1.log.epochs.size();
  DetectorRun s2 = stage2_train_detector(classifier, s1.params, train, val, cfg, defense, out.switch_epoch + 1);
  out.final = s2.params;
  out.log = std::move(s1.log);
  auto& l = out.log;
  l.epochs.insert(l.epochs.end(), s2.log.epochs.begin(), s2.log.epochs.end());
  l.freshness = std::move(s2.log.freshness);
  l.attacked_per_batch.insert(l.attacked_per_batch.end(), s2.log.attacked_per_batch.begin(),
                              s2.log.attacked_per_batch.end());
  l.batch_sizes.insert(l.batch_sizes.end(), s2.log.batch_sizes.begin(), s2.log.batch_sizes.end());
  return out;
}

}  // namespace pz
