#include "patchzero/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "patchzero/attack.hpp"
#include "patchzero/checkpoint.hpp"
#include "patchzero/config.hpp"
#include "patchzero/data.hpp"
#include "patchzero/eval.hpp"
#include "patchzero/rng.hpp"
#include "patchzero/train.hpp"

#ifndef PZ_VERSION
#define PZ_VERSION "0.1.0"
#endif

namespace pz {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* version_string() { return PZ_VERSION; }

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kMissingArtifact: return 2;
    case ErrorKind::kConfig: return 3;
    case ErrorKind::kFormat: return 4;
    case ErrorKind::kIo: return 5;
    case ErrorKind::kValue: return 6;
    case ErrorKind::kShape: return 7;
    case ErrorKind::kNumeric: return 8;
    case ErrorKind::kUsage: return 9;
  }
  return 1;
}

namespace {

using Clock = std::chrono::steady_clock;

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

// PZCK containers end with the CRC32 of everything before it, and a CRC32
// taken over such a file is the same constant for every file. Digests
// therefore cover the body only.
std::vector<std::uint8_t> digest_body(const std::vector<std::uint8_t>& bytes) {
  const bool sealed = bytes.size() >= 8 && std::equal(bytes.begin(), bytes.begin() + 4, "PZCK");
  return sealed ? std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 4) : bytes;
}

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::string> attack;
  std::optional<std::string> grad_mode;
  std::optional<double> patch_fraction;
  std::optional<std::string> patch_shape;
};

class RunDir {
 public:
  RunDir(fs::path root, std::string command, std::vector<std::string> args)
      : root_(std::move(root)), command_(std::move(command)), args_(std::move(args)), t0_(Clock::now()) {}

  fs::path path(const std::string& rel) const { return root_ / rel; }

  void require(const std::string& rel) const {
    if (!fs::exists(path(rel))) throw MissingArtifactError("missing artifact: " + path(rel).string());
  }

  // Append-only write: identical bytes are a no-op, different bytes refused.
  void write(const std::string& rel, const std::vector<std::uint8_t>& bytes) {
    const fs::path p = path(rel);
    fs::create_directories(p.parent_path());
    if (fs::exists(p)) {
      std::ifstream in(p, std::ios::binary);
      const std::vector<std::uint8_t> old{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
      if (old != bytes) throw IoError("refusing to overwrite existing artifact " + p.string());
    } else {
      const fs::path tmp = p.string() + ".tmp";
      {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed: " + tmp.string());
      }
      fs::rename(tmp, p);
    }
    artifacts_[rel] = hex32(crc32_of(digest_body(bytes)));
  }

  void write_text(const std::string& rel, const std::string& text) {
    write(rel, std::vector<std::uint8_t>(text.begin(), text.end()));
  }

  void append_log(const std::string& rel, const std::string& lines) {
    const fs::path p = path(rel);
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::app);
    if (!out) throw IoError("cannot append to " + p.string());
    out << lines;
  }

  void note_time(const std::string& key, double seconds) { wall_[key] = seconds; }
  void note(const std::string& key, json value) { extra_[key] = std::move(value); }

  void write_manifest(const RunConfig& cfg) {
    wall_["total"] = std::chrono::duration<double>(Clock::now() - t0_).count();
    json m;
    m["command"] = command_;
    m["args"] = args_;
    m["version"] = version_string();
    m["config"] = json::parse(serialize_config(cfg));
    m["seeds"] = {{"root", cfg.seed}, {"train", cfg.train.seed}, {"attack", cfg.attack.seed}};
    m["artifacts"] = artifacts_;
    m["wall_seconds"] = wall_;
    for (const auto& [k, v] : extra_.items()) m[k] = v;
    const fs::path dir = path("manifests");
    fs::create_directories(dir);
    for (std::size_t n = 1;; ++n) {
      const fs::path p = dir / (command_ + "-" + std::to_string(n) + ".json");
      if (fs::exists(p)) continue;
      std::ofstream out(p);
      if (!out) throw IoError("cannot write " + p.string());
      out << m.dump(2) << "\n";
      return;
    }
  }

 private:
  fs::path root_;
  std::string command_;
  std::vector<std::string> args_;
  Clock::time_point t0_;
  std::map<std::string, std::string> artifacts_;
  std::map<std::string, double> wall_;
  json extra_ = json::object();
};

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

RunConfig resolve_config(const Options& o) {
  RunConfig cfg;
  if (!o.config_path.empty()) {
    cfg = parse_config(o.config_path);
  } else if (!o.out.empty() && fs::exists(fs::path(o.out) / "config.json")) {
    cfg = parse_config((fs::path(o.out) / "config.json").string());
  }
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.train.seed = *o.seed;
    cfg.attack.seed = *o.seed;
  }
  if (!o.out.empty()) cfg.output_dir = o.out;
  try {
    if (o.attack) {
      const AttackFamily f = parse_attack_family(*o.attack);
      cfg.attack = eval_attack(cfg.attack, f);
      cfg.attack.family = f;
      cfg.train.attack.family = f;
      cfg.eval.attacks = {f};
    }
    if (o.grad_mode) {
      const GradMode m = parse_grad_mode(*o.grad_mode);
      cfg.attack.grad_mode = m;
      cfg.eval.grad_modes = {m};
    }
    if (o.patch_shape) cfg.train.patch_shape = parse_patch_shape(*o.patch_shape);
  } catch (const ValueError& e) {
    throw UsageError(e.what());
  }
  if (o.patch_fraction) cfg.eval.patch_fractions = {*o.patch_fraction};
  validate(cfg);
  return cfg;
}

// Splits the tail of an external training file off as validation data.
std::pair<Dataset, Dataset> split_validation(Dataset all, double val_fraction) {
  const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(val_fraction * all.size()));
  if (n_val >= all.size()) throw ValueError("training file too small for a validation split");
  Dataset val;
  val.class_names = all.class_names;
  val.split = Split::kVal;
  val.examples.assign(all.examples.end() - static_cast<std::ptrdiff_t>(n_val), all.examples.end());
  all.examples.resize(all.size() - n_val);
  all.split = Split::kTrain;
  return {std::move(all), std::move(val)};
}

ShapesSplits build_datasets(const RunConfig& cfg) {
  const DataConfig& d = cfg.data;
  if (d.source == DataSource::kShapes) {
    return gen_shapes_splits(d.train_per_class, d.val_per_class, d.test_per_class, d.image_size, cfg.seed);
  }
  Dataset train_all = d.source == DataSource::kIdx ? load_idx(d.train_images, d.train_labels)
                                                   : load_cifar_binary(d.cifar_train);
  Dataset test = d.source == DataSource::kIdx ? load_idx(d.test_images, d.test_labels)
                                              : load_cifar_binary(d.cifar_test);
  auto [train, val] = split_validation(std::move(train_all), d.val_fraction);
  train.mean = dataset_mean(train);
  val.mean = train.mean.clone();
  test.mean = train.mean.clone();
  test.split = Split::kTest;
  return {std::move(train), std::move(val), std::move(test)};
}

struct Data {
  Dataset train, val, test;
};

Data load_data(const RunDir& run) {
  for (const char* s : {"data/train.pzds", "data/val.pzds", "data/test.pzds"}) run.require(s);
  return {load_dataset(run.path("data/train.pzds").string()), load_dataset(run.path("data/val.pzds").string()),
          load_dataset(run.path("data/test.pzds").string())};
}

ClassifierParams load_classifier_in(const RunDir& run) {
  run.require("models/classifier.pzck");
  return load_classifier(run.path("models/classifier.pzck").string());
}

DetectorParams load_detector_in(const RunDir& run, const std::string& rel = "models/detector.pzck") {
  run.require(rel);
  return load_detector(run.path(rel).string());
}

DefenseConfig defense_for(const RunConfig& cfg, const Dataset& train) {
  DefenseConfig d = cfg.defense;
  d.mean = train.mean.defined() ? train.mean : dataset_mean(train);
  return d;
}

std::vector<std::uint8_t> checkpoint_bytes(CheckpointKind kind, std::vector<NamedTensor<float>> tensors) {
  return serialize_checkpoint({kind, std::move(tensors)});
}

// Datasets go through a temporary file so the PZCK writer stays the single
// source of the format.
std::vector<std::uint8_t> dataset_bytes(const Dataset& ds, const fs::path& scratch) {
  save_dataset(ds, scratch.string());
  auto bytes = file_bytes(scratch);
  fs::remove(scratch);
  return bytes;
}

std::string fraction_tag(double f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", f);
  return buf;
}

void cmd_gen_data(RunDir& run, const RunConfig& cfg) {
  const auto t0 = Clock::now();
  const ShapesSplits s = build_datasets(cfg);
  run.note_time("generate", std::chrono::duration<double>(Clock::now() - t0).count());
  fs::create_directories(run.path("data"));
  const fs::path scratch = run.path("data/.scratch");
  std::vector<std::uint8_t> all;
  for (const auto& [name, ds] : {std::pair<const char*, const Dataset*>{"train", &s.train},
                                 {"val", &s.val},
                                 {"test", &s.test}}) {
    auto bytes = dataset_bytes(*ds, scratch);
    const auto body = digest_body(bytes);
    all.insert(all.end(), body.begin(), body.end());
    run.write(std::string("data/") + name + ".pzds", bytes);
  }
  run.note("dataset_digest", hex32(crc32_of(all)));
  run.note("dataset_sizes", {{"train", s.train.size()}, {"val", s.val.size()}, {"test", s.test.size()}});
}

void cmd_train_classifier(RunDir& run, const RunConfig& cfg, bool adversarial) {
  const Data d = load_data(run);
  const ClassifierRun r = adversarial ? adversarial_train_classifier(d.train, d.val, cfg.train)
                                      : train_classifier(d.train, d.val, cfg.train);
  const std::string name = adversarial ? "classifier_adv" : "classifier";
  run.write("models/" + name + ".pzck", checkpoint_bytes(CheckpointKind::kClassifier, r.params.named()));
  run.append_log("logs/train-" + name + ".jsonl", r.log.to_jsonl());
  const double test_acc = accuracy(classifier_predictor(r.params), d.test);
  run.note("test_accuracy", test_acc);
  double attack_s = 0.0;
  for (const auto& e : r.log.epochs) attack_s += e.attack_seconds;
  run.note_time("attack_generation", attack_s);
}

TwoStageRun train_detector_for(const RunConfig& cfg, AttackFamily family, const ClassifierParams& clf,
                               const Data& d) {
  TrainConfig tc = cfg.train;
  tc.attack = eval_attack(tc.attack, family);
  tc.attack.iters = cfg.train.attack.iters;
  tc.attack.restarts = cfg.train.attack.restarts;
  tc.attack.family = family;
  return train_detector(clf, d.train, d.val, tc, defense_for(cfg, d.train));
}

void save_two_stage(RunDir& run, const TwoStageRun& r, const std::string& suffix) {
  run.write("models/detector_stage1" + suffix + ".pzck", checkpoint_bytes(CheckpointKind::kDetector, r.stage1.named()));
  run.write("models/detector" + suffix + ".pzck", checkpoint_bytes(CheckpointKind::kDetector, r.final.named()));
  run.append_log("logs/train-detector" + suffix + ".jsonl", r.log.to_jsonl());
}

void cmd_train_detector(RunDir& run, const RunConfig& cfg) {
  const Data d = load_data(run);
  const ClassifierParams clf = load_classifier_in(run);
  const TwoStageRun r = train_detector_for(cfg, cfg.train.attack.family, clf, d);
  save_two_stage(run, r, "");
  run.note("switch_epoch", r.switch_epoch);
}

void cmd_attack(RunDir& run, const RunConfig& cfg) {
  const Data d = load_data(run);
  const ClassifierParams clf = load_classifier_in(run);
  const DefenseConfig defense = defense_for(cfg, d.train);
  std::optional<DetectorParams> det;
  if (cfg.attack.grad_mode == GradMode::kBPDA) det = load_detector_in(run);
  const AttackTarget target = make_target(clf, det ? &*det : nullptr, det ? &defense : nullptr);
  PatchSampling sampling;
  sampling.fraction = cfg.eval.patch_fractions.front();
  sampling.shape = cfg.train.patch_shape;
  sampling.seed = mix_seed(cfg.seed, 100);
  const AttackedSet set =
      make_attacked_set(target, d.test, first_indices(d.test, cfg.eval.examples), cfg.attack, sampling,
                        cfg.eval.batch_size);
  std::vector<float> labels(set.labels.begin(), set.labels.end());
  std::vector<NamedTensor<float>> t = {
      {"images", set.x_adv},
      {"clean", set.x},
      {"labels", Tensor({set.labels.size()}, std::move(labels))},
      {"masks", masks_to_tensor(set.masks)},
      {"mean", defense.mean.clone()},
      {"split", Tensor::scalar(static_cast<float>(Split::kTest))}};
  for (std::size_t k = 0; k < d.test.class_names.size(); ++k) {
    t.push_back({"class:" + d.test.class_names[k], Tensor::scalar(static_cast<float>(k))});
  }
  const std::string name = std::string(attack_family_name(cfg.attack.family)) + "_" +
                           grad_mode_name(cfg.attack.grad_mode) + "_" + fraction_tag(sampling.fraction) + "_" +
                           patch_shape_name(sampling.shape);
  run.write("attack/" + name + ".pzds", checkpoint_bytes(CheckpointKind::kDataset, std::move(t)));
  run.note_time("attack", set.seconds);
  run.note("undefended_accuracy", accuracy(classifier_predictor(clf), set.x_adv, set.labels));
}

EvalPlan plan_for(const RunConfig& cfg) {
  EvalPlan p;
  p.examples = cfg.eval.examples;
  p.batch_size = cfg.eval.batch_size;
  p.patch_fractions = cfg.eval.patch_fractions;
  p.attacks = cfg.eval.attacks;
  p.grad_modes = cfg.eval.grad_modes;
  p.base = cfg.attack;
  p.seed = cfg.seed;
  return p;
}

void write_report(RunDir& run, const std::string& dir, const MetricsReport& r) {
  run.write_text(dir + "/report.json", report_to_json(r));
  run.write_text(dir + "/tables.csv", report_to_csv(r));
  for (const auto& [k, v] : r.wall_seconds) run.note_time(k, v);
}

void cmd_eval(RunDir& run, const RunConfig& cfg) {
  const ClassifierParams clf = load_classifier_in(run);
  const DetectorParams det = load_detector_in(run);
  const Data d = load_data(run);
  const std::uint32_t before = params_checksum(clf.tensors()) ^ params_checksum(det.tensors());
  const MetricsReport r = full_evaluation(clf, det, d.test, defense_for(cfg, d.train), plan_for(cfg));
  if ((params_checksum(clf.tensors()) ^ params_checksum(det.tensors())) != before) {
    throw ValueError("evaluation modified model parameters");
  }
  write_report(run, "eval", r);
  bool ordering = true;
  for (const auto& [k, v] : r.flags) ordering = ordering && v;
  run.note("ordering_holds", ordering);
}

void cmd_transfer(RunDir& run, const RunConfig& cfg) {
  const ClassifierParams clf = load_classifier_in(run);
  const Data d = load_data(run);
  std::vector<std::pair<AttackFamily, DetectorParams>> detectors;
  for (AttackFamily f : cfg.eval.transfer_attacks) {
    const std::string suffix = std::string("_") + attack_family_name(f);
    const std::string rel = "models/detector" + suffix + ".pzck";
    if (fs::exists(run.path(rel))) {
      detectors.push_back({f, load_detector_in(run, rel)});
    } else if (f == cfg.train.attack.family && fs::exists(run.path("models/detector.pzck"))) {
      detectors.push_back({f, load_detector_in(run)});
    } else {
      const TwoStageRun r = train_detector_for(cfg, f, clf, d);
      save_two_stage(run, r, suffix);
      detectors.push_back({f, r.final});
    }
  }
  PatchSampling sampling;
  sampling.fraction = cfg.eval.patch_fractions.back();
  sampling.seed = mix_seed(cfg.seed, 300);
  MetricsReport r;
  r.transfer = transfer_matrix(clf, detectors, d.test, first_indices(d.test, cfg.eval.examples),
                               defense_for(cfg, d.train), sampling, cfg.attack.iters, cfg.attack.restarts,
                               mix_seed(cfg.seed, 301));
  for (std::size_t i = 0; i < r.transfer.attacks.size(); ++i) {
    for (std::size_t j = 0; j < r.transfer.attacks.size(); ++j) {
      r.add("transfer_acc/" + r.transfer.attacks[i], r.transfer.attacks[j], "do", sampling.fraction,
            r.transfer.values[i][j]);
    }
  }
  write_report(run, "transfer", r);
  run.note("max_offdiagonal_gap", r.transfer.max_offdiagonal_gap());
}

void cmd_shape_transfer(RunDir& run, const RunConfig& cfg) {
  const ClassifierParams clf = load_classifier_in(run);
  const DetectorParams det = load_detector_in(run);
  const Data d = load_data(run);
  std::vector<PatchShape> shapes = {PatchShape::kSquare};
  for (PatchShape s : cfg.eval.shapes) {
    if (s != PatchShape::kSquare) shapes.push_back(s);
  }
  AttackConfig a = eval_attack(cfg.attack, AttackFamily::kMPGD);
  a.grad_mode = GradMode::kDO;
  const double fraction = cfg.eval.patch_fractions.back();
  const auto rows = shape_transfer_eval(clf, det, d.test, first_indices(d.test, cfg.eval.examples),
                                        defense_for(cfg, d.train), shapes, a, fraction, mix_seed(cfg.seed, 400));
  MetricsReport r;
  for (const ShapeTransferRow& row : rows) {
    const std::string s = patch_shape_name(row.shape);
    r.add("seg_f1/" + s, "mpgd", "do", fraction, row.f1);
    r.add("defended_acc/" + s, "mpgd", "do", fraction, row.defended_acc);
    r.add("undefended_acc/" + s, "mpgd", "do", fraction, row.undefended_acc);
  }
  write_report(run, "shape_transfer", r);
}

int dispatch(const std::string& command, const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  RunDir run(cfg.output_dir, command, args);
  fs::create_directories(cfg.output_dir);
  if (!fs::exists(run.path("config.json"))) run.write_text("config.json", serialize_config(cfg));

  if (command == "gen-data") cmd_gen_data(run, cfg);
  else if (command == "train-classifier") cmd_train_classifier(run, cfg, false);
  else if (command == "train-classifier-adv") cmd_train_classifier(run, cfg, true);
  else if (command == "train-detector") cmd_train_detector(run, cfg);
  else if (command == "attack") cmd_attack(run, cfg);
  else if (command == "eval") cmd_eval(run, cfg);
  else if (command == "transfer") cmd_transfer(run, cfg);
  else if (command == "shape-transfer") cmd_shape_transfer(run, cfg);
  else throw UsageError("unknown subcommand '" + command + "'");

  run.write_manifest(cfg);
  out << command << ": done (" << cfg.output_dir << ")\n";
  return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"PatchZero laboratory: patch attacks, detection and zero-out defense", "pz"};
  app.set_version_flag("--version", std::string(version_string()));
  app.require_subcommand(1, 1);
  Options o;
  std::uint64_t seed = 0;
  double fraction = 0.0;
  std::string attack, grad_mode, shape;

  const std::vector<std::pair<const char*, const char*>> commands = {
      {"gen-data", "Generate or import datasets into the run directory"},
      {"train-classifier", "Train the downstream classifier"},
      {"train-classifier-adv", "Adversarial-training baseline classifier"},
      {"train-detector", "Two-stage patch detector training"},
      {"attack", "Attack test examples and store them with their masks"},
      {"eval", "Full evaluation report"},
      {"transfer", "Cross-attack transfer matrix"},
      {"shape-transfer", "Patch-shape transfer of the square-trained detector"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config_path, "Run configuration JSON")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Seed (overrides the config)");
    sub->add_option("--out", o.out, "Run directory (overrides output_dir)");
    sub->add_option("--attack", attack, "Attack family")->check(CLI::IsMember({"mpgd", "mapgd", "mcw"}));
    sub->add_option("--grad-mode", grad_mode, "Gradient mode")->check(CLI::IsMember({"do", "bpda"}));
    sub->add_option("--patch-fraction", fraction, "Patch area fraction")->check(CLI::Range(0.0, 1.0));
    sub->add_option("--patch-shape", shape, "Patch shape")
        ->check(CLI::IsMember({"rectangle", "square", "diamond", "octagon"}));
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    // Help and version requests exit 0; everything else is a usage error.
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    app.exit(e, out, err);
    return exit_code(ErrorKind::kUsage);
  }

  CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--seed")) o.seed = seed;
  if (sub->count("--attack")) o.attack = attack;
  if (sub->count("--grad-mode")) o.grad_mode = grad_mode;
  if (sub->count("--patch-fraction")) o.patch_fraction = fraction;
  if (sub->count("--patch-shape")) o.patch_shape = shape;

  try {
    return dispatch(sub->get_name(), o, args, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "unexpected error: " << e.what() << "\n";
    return 1;
  }
}

int run_command(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_command(args, std::cout, std::cerr);
}

}  // namespace pz
