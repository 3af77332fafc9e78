#include "patchzero/eval.hpp"

#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace pz {

using json = nlohmann::json;

ImageFn<float> classifier_fn(const ClassifierParams& params) {
  const ClassifierParams p = params.detached();
  return [p](const Tensor& x) { return classifier_forward(p, x); };
}

ImageFn<float> detector_fn(const DetectorParams& params) {
  const DetectorParams p = params.detached();
  return [p](const Tensor& x) { return detector_forward(p, x).prob; };
}

Predictor classifier_predictor(const ClassifierParams& params) {
  const ImageFn<float> f = classifier_fn(params);
  return [f](const Tensor& x) {
    NoGradGuard<float> guard;
    return argmax_rows(f(x));
  };
}

Predictor defended_predictor(const ClassifierParams& classifier, const DetectorParams& detector,
                             const DefenseConfig& cfg) {
  const ImageFn<float> f = classifier_fn(classifier);
  const ImageFn<float> d = detector_fn(detector);
  return [f, d, cfg](const Tensor& x) { return pipeline_forward(d, f, x, cfg).prediction; };
}

AttackTarget make_target(const ClassifierParams& classifier, const DetectorParams* detector,
                         const DefenseConfig* defense) {
  AttackTarget t;
  t.classifier = classifier_fn(classifier);
  if (detector) t.detector = detector_fn(*detector);
  t.defense = defense;
  return t;
}

namespace {

Tensor slice_batch(const Tensor& images, std::size_t begin, std::size_t end) {
  const std::size_t per = images.numel() / images.dim(0);
  Shape s = images.shape();
  s[0] = end - begin;
  auto d = images.data();
  return Tensor(s, std::vector<float>(d.begin() + begin * per, d.begin() + end * per));
}

std::string format_fraction(double f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", f);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

double accuracy(const Predictor& predict, const Tensor& images, const std::vector<int>& labels,
                std::size_t batch_size) {
  if (images.rank() != 4 || images.dim(0) != labels.size() || labels.empty()) {
    throw ShapeError("accuracy: images and labels disagree or are empty");
  }
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); b += batch_size) {
    const std::size_t e = std::min(labels.size(), b + batch_size);
    const std::vector<int> pred = predict(slice_batch(images, b, e));
    for (std::size_t i = b; i < e; ++i) correct += pred[i - b] == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double accuracy(const Predictor& predict, const Dataset& ds, std::size_t batch_size) {
  const auto idx = first_indices(ds, ds.size());
  return accuracy(predict, stack_images(ds, idx), gather_labels(ds, idx), batch_size);
}

std::vector<std::size_t> first_indices(const Dataset& ds, std::size_t limit) {
  std::vector<std::size_t> idx(std::min(limit, ds.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

std::vector<PatchSpec> sample_specs(const PatchSampling& sampling, std::size_t height, std::size_t width,
                                    const std::vector<std::uint64_t>& example_ids) {
  std::vector<PatchSpec> out;
  out.reserve(example_ids.size());
  for (std::uint64_t id : example_ids) {
    Rng rng(mix_seed(sampling.seed, id));
    double f = sampling.fraction;
    if (sampling.max_fraction > sampling.fraction) f = rng.uniform(sampling.fraction, sampling.max_fraction);
    out.push_back(sample_patch_spec(rng, height, width, f, sampling.shape));
  }
  return out;
}

AttackedSet make_attacked_set(const AttackTarget& target, const Dataset& ds,
                              const std::vector<std::size_t>& indices, const AttackConfig& cfg,
                              const PatchSampling& sampling, std::size_t batch_size) {
  if (indices.empty()) throw ValueError("make_attacked_set: no examples");
  const auto t0 = std::chrono::steady_clock::now();
  AttackedSet set;
  set.x = stack_images(ds, indices);
  set.labels = gather_labels(ds, indices);
  std::vector<std::uint64_t> ids(indices.begin(), indices.end());
  set.specs = sample_specs(sampling, ds.height(), ds.width(), ids);
  std::vector<float> adv(set.x.numel());
  const std::size_t per = set.x.numel() / indices.size();
  for (std::size_t b = 0; b < indices.size(); b += batch_size) {
    const std::size_t e = std::min(indices.size(), b + batch_size);
    AttackBatch batch;
    batch.x = slice_batch(set.x, b, e);
    batch.labels.assign(set.labels.begin() + b, set.labels.begin() + e);
    batch.specs.assign(set.specs.begin() + b, set.specs.begin() + e);
    batch.stream_ids.assign(ids.begin() + b, ids.begin() + e);
    AttackResult r = run_attack(target, batch, cfg);
    std::copy(r.x_adv.data().begin(), r.x_adv.data().end(), adv.begin() + b * per);
    set.masks.insert(set.masks.end(), r.masks.begin(), r.masks.end());
    set.loss.insert(set.loss.end(), r.loss.begin(), r.loss.end());
  }
  set.x_adv = Tensor(set.x.shape(), std::move(adv));
  set.seconds = seconds_since(t0);
  return set;
}

double gt_mask_bound(const ClassifierParams& classifier, const AttackedSet& set, const DefenseConfig& cfg) {
  const ImageFn<float> f = classifier_fn(classifier);
  const Tensor masks = masks_to_tensor(set.masks);
  std::size_t correct = 0;
  const std::size_t n = set.labels.size();
  for (std::size_t b = 0; b < n; b += 64) {
    const std::size_t e = std::min(n, b + 64);
    const auto out = pipeline_with_mask(f, slice_batch(set.x_adv, b, e), slice_batch(masks, b, e), cfg);
    for (std::size_t i = b; i < e; ++i) correct += out.prediction[i - b] == set.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

SegCounts& SegCounts::operator+=(const SegCounts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

SegCounts count_segmentation(const std::vector<BinaryMask>& pred, const std::vector<BinaryMask>& gt) {
  if (pred.size() != gt.size()) throw ShapeError("segmentation: mask counts differ");
  SegCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const BinaryMask& p = pred[i];
    const BinaryMask& g = gt[i];
    if (p.height != g.height || p.width != g.width || p.values.size() != g.values.size()) {
      throw ShapeError("segmentation: mask shapes differ");
    }
    for (std::size_t k = 0; k < p.values.size(); ++k) {
      const std::uint8_t a = p.values[k], b = g.values[k];
      if (a > 1 || b > 1) throw ValueError("segmentation: masks must be binary");
      const bool pp = a == 0, gp = b == 0;
      if (pp && gp) ++c.tp;
      else if (pp) ++c.fp;
      else if (gp) ++c.fn;
      else ++c.tn;
    }
  }
  return c;
}

SegMetrics metrics_from_counts(const SegCounts& c) {
  SegMetrics m;
  m.counts = c;
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  const double fn = static_cast<double>(c.fn), tn = static_cast<double>(c.tn);
  m.precision_undefined = c.tp + c.fp == 0;
  m.recall_undefined = c.tp + c.fn == 0;
  m.precision = m.precision_undefined ? 0.0 : tp / (tp + fp);
  m.recall = m.recall_undefined ? 0.0 : tp / (tp + fn);
  const double total = tp + fp + fn + tn;
  m.accuracy = total > 0 ? (tp + tn) / total : 0.0;
  m.f1 = m.precision + m.recall > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

SegMetrics segmentation_metrics(const std::vector<BinaryMask>& pred, const std::vector<BinaryMask>& gt) {
  return metrics_from_counts(count_segmentation(pred, gt));
}

std::vector<BinaryMask> predict_masks(const DetectorParams& detector, const Tensor& images, double eps_p,
                                      std::size_t batch_size) {
  NoGradGuard<float> guard;
  const DetectorParams d = detector.detached();
  std::vector<BinaryMask> out;
  const std::size_t n = images.dim(0);
  for (std::size_t b = 0; b < n; b += batch_size) {
    const std::size_t e = std::min(n, b + batch_size);
    const Tensor p = detector_forward(d, slice_batch(images, b, e)).prob;
    const auto masks = tensor_to_masks(binarize(p, static_cast<float>(eps_p)));
    out.insert(out.end(), masks.begin(), masks.end());
  }
  return out;
}

double benign_fpr(const ImageFn<float>& detector, const Tensor& images, double eps_p, std::size_t batch_size) {
  NoGradGuard<float> guard;
  const std::size_t n = images.dim(0);
  std::uint64_t flagged = 0, total = 0;
  for (std::size_t b = 0; b < n; b += batch_size) {
    const std::size_t e = std::min(n, b + batch_size);
    const Tensor p = detector(slice_batch(images, b, e));
    for (float v : p.data()) flagged += !(v >= static_cast<float>(eps_p));
    total += p.numel();
  }
  return static_cast<double>(flagged) / static_cast<double>(total);
}

double TransferMatrix::max_offdiagonal_gap() const {
  double gap = 0.0;
  for (std::size_t col = 0; col < values.size(); ++col) {
    for (std::size_t row = 0; row < values.size(); ++row) {
      if (row != col) gap = std::max(gap, values[col][col] - values[row][col]);
    }
  }
  return gap;
}

void MetricsReport::add(std::string metric, std::string attack, std::string grad_mode, double fraction,
                        double value) {
  cells.push_back({std::move(metric), std::move(attack), std::move(grad_mode), fraction, value});
}

namespace {

const MetricCell* find_cell(const std::vector<MetricCell>& cells, const std::string& metric,
                            const std::string& attack, const std::string& grad_mode, double fraction) {
  for (const MetricCell& c : cells) {
    if (c.metric == metric && c.attack == attack && c.grad_mode == grad_mode &&
        std::abs(c.patch_fraction - fraction) < 1e-12) {
      return &c;
    }
  }
  return nullptr;
}

}  // namespace

double MetricsReport::get(const std::string& metric, const std::string& attack, const std::string& grad_mode,
                          double fraction) const {
  const MetricCell* c = find_cell(cells, metric, attack, grad_mode, fraction);
  if (!c) throw ValueError("report has no cell " + metric + "/" + attack + "/" + grad_mode);
  return c->value;
}

bool MetricsReport::has(const std::string& metric, const std::string& attack, const std::string& grad_mode,
                        double fraction) const {
  return find_cell(cells, metric, attack, grad_mode, fraction) != nullptr;
}

std::string report_to_json(const MetricsReport& r) {
  json j;
  j["cells"] = json::array();
  for (const MetricCell& c : r.cells) {
    j["cells"].push_back({{"metric", c.metric},
                          {"attack", c.attack},
                          {"grad_mode", c.grad_mode},
                          {"patch_fraction", c.patch_fraction},
                          {"value", c.value}});
  }
  j["transfer"] = {{"attacks", r.transfer.attacks}, {"values", r.transfer.values}};
  j["flags"] = r.flags;
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("report JSON: ") + e.what());
  }
  MetricsReport r;
  try {
    for (const json& c : j.at("cells")) {
      r.cells.push_back({c.at("metric").get<std::string>(), c.at("attack").get<std::string>(),
                         c.at("grad_mode").get<std::string>(), c.at("patch_fraction").get<double>(),
                         c.at("value").get<double>()});
    }
    r.transfer.attacks = j.at("transfer").at("attacks").get<std::vector<std::string>>();
    r.transfer.values = j.at("transfer").at("values").get<std::vector<std::vector<double>>>();
    r.flags = j.at("flags").get<std::map<std::string, bool>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("report JSON schema: ") + e.what());
  }
  return r;
}

std::string report_to_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << "metric,attack,grad_mode,patch_fraction,value\n";
  char buf[64];
  for (const MetricCell& c : r.cells) {
    std::snprintf(buf, sizeof buf, "%.4g,%.9g", c.patch_fraction, c.value);
    os << c.metric << ',' << c.attack << ',' << c.grad_mode << ',' << buf << '\n';
  }
  return os.str();
}

void emit_report(const MetricsReport& r, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const auto write = [](const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
  };
  write(std::filesystem::path(dir) / "report.json", report_to_json(r));
  write(std::filesystem::path(dir) / "tables.csv", report_to_csv(r));
  write(std::filesystem::path(dir) / "timings.json", json(r.wall_seconds).dump(2) + "\n");
}

MetricsReport load_report(const std::string& dir) {
  const auto read = [](const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("missing " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
  };
  MetricsReport r = report_from_json(read(std::filesystem::path(dir) / "report.json"));
  const std::filesystem::path timings = std::filesystem::path(dir) / "timings.json";
  if (std::filesystem::exists(timings)) {
    try {
      r.wall_seconds = json::parse(read(timings)).get<std::map<std::string, double>>();
    } catch (const json::exception& e) {
      throw FormatError(std::string("timings JSON: ") + e.what());
    }
  }
  return r;
}

OrderingCheck check_ordering(double benign, double gt, double pz_do, double pz_bpda, double undefended,
                             double first_link_slack) {
  OrderingCheck c;
  std::ostringstream os;
  const auto link = [&](const char* name, double hi, double lo, double slack) {
    if (hi + slack < lo) {
      c.holds = false;
      os << name << " violated (" << hi << " < " << lo << "); ";
    }
  };
  link("benign>=gt", benign, gt, first_link_slack);
  link("gt>=pz_do", gt, pz_do, 0.0);
  link("pz_do>=pz_bpda", pz_do, pz_bpda, 0.0);
  link("pz_bpda>=undefended", pz_bpda, undefended, 0.0);
  c.detail = os.str();
  return c;
}

TransferMatrix transfer_matrix(const ClassifierParams& classifier,
                               const std::vector<std::pair<AttackFamily, DetectorParams>>& detectors,
                               const Dataset& ds, const std::vector<std::size_t>& indices,
                               const DefenseConfig& defense, const PatchSampling& sampling,
                               std::size_t attack_iters, std::size_t restarts, std::uint64_t seed) {
  if (detectors.size() < 2) throw ValueError("transfer_matrix needs at least two attack families");
  TransferMatrix m;
  for (const auto& d : detectors) m.attacks.emplace_back(attack_family_name(d.first));
  m.values.assign(detectors.size(), std::vector<double>(detectors.size(), 0.0));
  const AttackTarget target = make_target(classifier, nullptr, nullptr);
  for (std::size_t col = 0; col < detectors.size(); ++col) {
    AttackConfig cfg = default_attack(detectors[col].first);
    cfg.iters = attack_iters;
    cfg.restarts = restarts;
    cfg.seed = mix_seed(seed, col);
    const AttackedSet set = make_attacked_set(target, ds, indices, cfg, sampling);
    for (std::size_t row = 0; row < detectors.size(); ++row) {
      m.values[row][col] =
          accuracy(defended_predictor(classifier, detectors[row].second, defense), set.x_adv, set.labels);
    }
  }
  return m;
}

std::vector<ShapeTransferRow> shape_transfer_eval(const ClassifierParams& classifier,
                                                  const DetectorParams& detector, const Dataset& ds,
                                                  const std::vector<std::size_t>& indices,
                                                  const DefenseConfig& defense,
                                                  const std::vector<PatchShape>& shapes,
                                                  const AttackConfig& attack, double fraction,
                                                  std::uint64_t seed) {
  const AttackTarget target = make_target(classifier, nullptr, nullptr);
  std::vector<ShapeTransferRow> rows;
  for (PatchShape shape : shapes) {
    PatchSampling sampling;
    sampling.fraction = fraction;
    sampling.shape = shape;
    sampling.seed = seed;
    const AttackedSet set = make_attacked_set(target, ds, indices, attack, sampling);
    ShapeTransferRow row;
    row.shape = shape;
    row.f1 = segmentation_metrics(predict_masks(detector, set.x_adv, defense.eps_p), set.masks).f1;
    row.defended_acc = accuracy(defended_predictor(classifier, detector, defense), set.x_adv, set.labels);
    row.undefended_acc = accuracy(classifier_predictor(classifier), set.x_adv, set.labels);
    rows.push_back(row);
  }
  return rows;
}

AttackConfig eval_attack(const AttackConfig& base, AttackFamily family) {
  AttackConfig cfg = default_attack(family);
  if (family == base.family) {
    cfg.eps = base.eps;
    cfg.alpha = base.alpha;
  }
  cfg.iters = base.iters;
  cfg.restarts = base.restarts;
  cfg.rho = base.rho;
  cfg.momentum = base.momentum;
  cfg.halving = base.halving;
  cfg.kappa = base.kappa;
  cfg.seed = base.seed;
  return cfg;
}

MetricsReport full_evaluation(const ClassifierParams& classifier, const DetectorParams& detector,
                              const Dataset& ds, const DefenseConfig& defense, const EvalPlan& plan) {
  const auto indices = first_indices(ds, plan.examples);
  const Tensor x = stack_images(ds, indices);
  const std::vector<int> labels = gather_labels(ds, indices);
  const Predictor bare = classifier_predictor(classifier);
  const Predictor defended = defended_predictor(classifier, detector, defense);

  MetricsReport r;
  const double benign = accuracy(bare, x, labels, plan.batch_size);
  r.add("benign_acc", "none", "none", 0.0, benign);
  r.add("benign_defended_acc", "none", "none", 0.0, accuracy(defended, x, labels, plan.batch_size));
  r.add("benign_fpr", "none", "none", 0.0, benign_fpr(detector_fn(detector), x, defense.eps_p, plan.batch_size));

  const AttackTarget do_target = make_target(classifier, nullptr, nullptr);
  const AttackTarget bpda_target = make_target(classifier, &detector, &defense);
  for (std::size_t fi = 0; fi < plan.patch_fractions.size(); ++fi) {
    const double f = plan.patch_fractions[fi];
    PatchSampling sampling;
    sampling.fraction = f;
    sampling.seed = mix_seed(plan.seed, 100 + fi);
    for (std::size_t ai = 0; ai < plan.attacks.size(); ++ai) {
      const AttackFamily family = plan.attacks[ai];
      const std::string fam = attack_family_name(family);
      std::map<GradMode, double> robust;
      double gt = 0.0, undefended_do = 0.0;
      for (GradMode mode : plan.grad_modes) {
        const std::string gm = grad_mode_name(mode);
        AttackConfig cfg = eval_attack(plan.base, family);
        cfg.grad_mode = mode;
        cfg.seed = mix_seed(mix_seed(plan.seed, 200 + fi), ai);
        const AttackedSet set = make_attacked_set(mode == GradMode::kDO ? do_target : bpda_target, ds, indices,
                                                  cfg, sampling, plan.batch_size);
        const double und = accuracy(bare, set.x_adv, set.labels, plan.batch_size);
        const double def = accuracy(defended, set.x_adv, set.labels, plan.batch_size);
        const double gtm = gt_mask_bound(classifier, set, defense);
        const SegMetrics seg =
            segmentation_metrics(predict_masks(detector, set.x_adv, defense.eps_p, plan.batch_size), set.masks);
        r.add("undefended_acc", fam, gm, f, und);
        r.add("defended_acc", fam, gm, f, def);
        r.add("gt_mask_acc", fam, gm, f, gtm);
        r.add("seg_precision", fam, gm, f, seg.precision);
        r.add("seg_recall", fam, gm, f, seg.recall);
        r.add("seg_accuracy", fam, gm, f, seg.accuracy);
        r.add("seg_f1", fam, gm, f, seg.f1);
        r.wall_seconds["attack/" + fam + "/" + gm + "/" + format_fraction(f)] = set.seconds;
        robust[mode] = def;
        if (mode == GradMode::kDO) {
          gt = gtm;
          undefended_do = und;
        }
      }
      if (robust.count(GradMode::kDO) && robust.count(GradMode::kBPDA)) {
        const OrderingCheck oc =
            check_ordering(benign, gt, robust[GradMode::kDO], robust[GradMode::kBPDA], undefended_do);
        r.flags["ordering/" + fam + "/" + format_fraction(f)] = oc.holds;
      }
    }
  }
  return r;
}

std::uint32_t params_checksum(const std::vector<Tensor>& tensors) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const Tensor& t : tensors) {
    if (!t.defined()) continue;
    auto d = t.data();
    crc = crc32(crc, reinterpret_cast<const Bytef*>(d.data()), static_cast<uInt>(d.size() * sizeof(float)));
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace pz
