#include "patchzero/config.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "patchzero/error.hpp"

namespace pz {

using json = nlohmann::json;

const char* data_source_name(DataSource s) {
  switch (s) {
    case DataSource::kShapes: return "shapes";
    case DataSource::kIdx: return "idx";
    case DataSource::kCifar: return "cifar";
  }
  return "?";
}

std::pair<std::size_t, std::size_t> line_col(const std::string& text, std::size_t offset) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

namespace {

// Walks one JSON object, remembering which keys were read so that leftovers
// can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "must be an object");
  }

  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + key_path(key) + "'");
    }
  }

  const json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void number(const std::string& key, double& out) {
    if (const json* v = get(key)) {
      if (!v->is_number()) throw ConfigError(key_path(key) + " must be a number");
      out = v->get<double>();
    }
  }

  template <typename U>
  void count(const std::string& key, U& out) {
    if (const json* v = get(key)) {
      if (!v->is_number_integer() || v->get<std::int64_t>() < 0) {
        throw ConfigError(key_path(key) + " must be a non-negative integer");
      }
      out = static_cast<U>(v->get<std::uint64_t>());
    }
  }

  void flag(const std::string& key, bool& out) {
    if (const json* v = get(key)) {
      if (!v->is_boolean()) throw ConfigError(key_path(key) + " must be a boolean");
      out = v->get<bool>();
    }
  }

  void text(const std::string& key, std::string& out) {
    if (const json* v = get(key)) {
      if (!v->is_string()) throw ConfigError(key_path(key) + " must be a string");
      out = v->get<std::string>();
    }
  }

  // String value mapped through `parse`; parse errors become config errors.
  template <typename E, typename F>
  void choice(const std::string& key, E& out, F parse) {
    std::string s;
    if (!get(key)) return;
    text(key, s);
    try {
      out = parse(s);
    } catch (const Error& e) {
      throw ConfigError(key_path(key) + ": " + e.what());
    }
  }

  template <typename E, typename F>
  void choice_list(const std::string& key, std::vector<E>& out, F parse) {
    const json* v = get(key);
    if (!v) return;
    if (!v->is_array()) throw ConfigError(key_path(key) + " must be an array");
    out.clear();
    for (const json& item : *v) {
      if (!item.is_string()) throw ConfigError(key_path(key) + " entries must be strings");
      try {
        out.push_back(parse(item.get<std::string>()));
      } catch (const Error& e) {
        throw ConfigError(key_path(key) + ": " + e.what());
      }
    }
  }

  void number_list(const std::string& key, std::vector<double>& out) {
    const json* v = get(key);
    if (!v) return;
    if (!v->is_array()) throw ConfigError(key_path(key) + " must be an array");
    out.clear();
    for (const json& item : *v) {
      if (!item.is_number()) throw ConfigError(key_path(key) + " entries must be numbers");
      out.push_back(item.get<double>());
    }
  }

  const std::string& path() const { return path_; }
  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config " : path_ + " "; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_attack(Section& s, AttackConfig& a) {
  s.choice("family", a.family, parse_attack_family);
  s.number("eps", a.eps);
  s.number("alpha", a.alpha);
  s.count("iters", a.iters);
  s.count("restarts", a.restarts);
  s.choice("grad_mode", a.grad_mode, parse_grad_mode);
  s.number("rho", a.rho);
  s.number("momentum", a.momentum);
  s.flag("halving", a.halving);
  s.number("kappa", a.kappa);
}

json write_attack(const AttackConfig& a) {
  return {{"family", attack_family_name(a.family)},
          {"eps", a.eps},
          {"alpha", a.alpha},
          {"iters", a.iters},
          {"restarts", a.restarts},
          {"grad_mode", grad_mode_name(a.grad_mode)},
          {"rho", a.rho},
          {"momentum", a.momentum},
          {"halving", a.halving},
          {"kappa", a.kappa}};
}

DataSource parse_source(const std::string& s) {
  if (s == "shapes") return DataSource::kShapes;
  if (s == "idx") return DataSource::kIdx;
  if (s == "cifar") return DataSource::kCifar;
  throw ValueError("unknown data source '" + s + "' (expected shapes|idx|cifar)");
}

void require(bool ok, const std::string& path, const std::string& rule) {
  if (!ok) throw ConfigError(path + " " + rule);
}

void validate_attack(const AttackConfig& a, const std::string& p) {
  require(a.eps > 0.0 && a.eps <= 1.0, p + ".eps", "must lie in (0,1]");
  require(a.alpha > 0.0, p + ".alpha", "must be positive");
  require(a.iters >= 1, p + ".iters", "must be >= 1");
  require(a.restarts >= 1, p + ".restarts", "must be >= 1");
  require(a.rho >= 0.0 && a.rho <= 1.0, p + ".rho", "must lie in [0,1]");
  require(a.momentum >= 0.0 && a.momentum < 1.0, p + ".momentum", "must lie in [0,1)");
  require(a.kappa >= 0.0, p + ".kappa", "must be >= 0");
}

}  // namespace

void validate(const RunConfig& c) {
  const DataConfig& d = c.data;
  require(d.image_size >= 8 && d.image_size % 4 == 0, "data.image_size", "must be a multiple of 4 and >= 8");
  if (d.source == DataSource::kShapes) {
    require(d.train_per_class > 0, "data.train_per_class", "must be positive");
    require(d.val_per_class > 0, "data.val_per_class", "must be positive");
    require(d.test_per_class > 0, "data.test_per_class", "must be positive");
  } else if (d.source == DataSource::kIdx) {
    require(!d.train_images.empty() && !d.train_labels.empty(), "data.train_images", "and data.train_labels are required for idx");
    require(!d.test_images.empty() && !d.test_labels.empty(), "data.test_images", "and data.test_labels are required for idx");
  } else {
    require(!d.cifar_train.empty() && !d.cifar_test.empty(), "data.cifar_train", "and data.cifar_test are required for cifar");
  }
  require(d.val_fraction > 0.0 && d.val_fraction < 1.0, "data.val_fraction", "must lie in (0,1)");

  const TrainConfig& t = c.train;
  require(t.lr > 0.0 && std::isfinite(t.lr), "train.lr", "must be positive");
  require(t.batch_size > 0, "train.batch_size", "must be positive");
  require(t.epochs > 0, "train.classifier_epochs", "must be positive");
  require(t.mix_ratio >= 0.0 && t.mix_ratio <= 1.0, "train.mix_ratio", "must lie in [0,1]");
  require(t.min_fraction > 0.0 && t.min_fraction < 1.0, "train.min_fraction", "must lie in (0,1)");
  require(t.max_fraction >= t.min_fraction && t.max_fraction < 1.0, "train.max_fraction",
          "must lie in [train.min_fraction,1)");
  require(t.stage2_trigger.f1_tau >= 0.0 && t.stage2_trigger.f1_tau <= 1.0, "train.stage2_trigger.f1_tau",
          "must lie in [0,1]");
  require(!t.stage2_trigger.fixed_epoch || *t.stage2_trigger.fixed_epoch >= 1,
          "train.stage2_trigger.fixed_epoch", "must be >= 1");
  require(t.aux_weight >= 0.0, "train.aux_weight", "must be >= 0");
  require(t.occlusion_prob >= 0.0 && t.occlusion_prob <= 1.0, "train.occlusion_prob", "must lie in [0,1]");
  require(t.val_examples > 0, "train.val_examples", "must be positive");
  validate_attack(t.attack, "train.attack");
  validate_attack(c.attack, "attack");

  require(c.defense.eps_p > 0.0 && c.defense.eps_p < 1.0, "defense.eps_p", "must lie in (0,1)");
  require(c.defense.k > 0.0, "defense.k", "must be positive");

  const EvalConfig& e = c.eval;
  require(e.examples > 0, "eval.examples", "must be positive");
  require(e.batch_size > 0, "eval.batch_size", "must be positive");
  require(!e.patch_fractions.empty(), "eval.patch_fractions", "must not be empty");
  for (double f : e.patch_fractions) require(f > 0.0 && f < 1.0, "eval.patch_fractions", "entries must lie in (0,1)");
  require(!e.attacks.empty(), "eval.attacks", "must not be empty");
  require(!e.grad_modes.empty(), "eval.grad_modes", "must not be empty");
  require(e.transfer_attacks.size() >= 2, "eval.transfer_attacks", "needs at least two families");
  require(c.output_dir.size() > 0, "output_dir", "must not be empty");
}

RunConfig parse_config_text(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = line_col(text, e.byte > 0 ? e.byte - 1 : 0);
    throw ConfigError("config syntax error at line " + std::to_string(line) + ", column " +
                      std::to_string(col) + ": " + e.what());
  }
  RunConfig c;
  {
    Section s(root, "");
    s.count("seed", c.seed);
    s.text("output_dir", c.output_dir);
    if (const json* v = s.get("data")) {
      Section d(*v, "data");
      DataConfig& dc = c.data;
      d.choice("source", dc.source, parse_source);
      d.count("train_per_class", dc.train_per_class);
      d.count("val_per_class", dc.val_per_class);
      d.count("test_per_class", dc.test_per_class);
      d.count("image_size", dc.image_size);
      d.text("train_images", dc.train_images);
      d.text("train_labels", dc.train_labels);
      d.text("test_images", dc.test_images);
      d.text("test_labels", dc.test_labels);
      d.text("cifar_train", dc.cifar_train);
      d.text("cifar_test", dc.cifar_test);
      d.number("val_fraction", dc.val_fraction);
    }
    if (const json* v = s.get("train")) {
      Section t(*v, "train");
      TrainConfig& tc = c.train;
      t.number("lr", tc.lr);
      t.count("batch_size", tc.batch_size);
      t.count("classifier_epochs", tc.epochs);
      t.count("stage1_epochs", tc.stage1_epochs);
      t.count("stage2_epochs", tc.stage2_epochs);
      t.number("mix_ratio", tc.mix_ratio);
      t.number("aux_weight", tc.aux_weight);
      t.number("occlusion_prob", tc.occlusion_prob);
      t.number("min_fraction", tc.min_fraction);
      t.number("max_fraction", tc.max_fraction);
      t.choice("patch_shape", tc.patch_shape, parse_patch_shape);
      t.count("val_examples", tc.val_examples);
      if (const json* trig = t.get("stage2_trigger")) {
        Section g(*trig, "train.stage2_trigger");
        if (const json* fe = g.get("fixed_epoch"); fe && !fe->is_null()) {
          std::size_t n = 0;
          g.count("fixed_epoch", n);
          tc.stage2_trigger.fixed_epoch = n;
        }
        g.number("f1_tau", tc.stage2_trigger.f1_tau);
      }
      if (const json* a = t.get("attack")) {
        Section as(*a, "train.attack");
        read_attack(as, tc.attack);
      }
    }
    if (const json* v = s.get("attack")) {
      Section a(*v, "attack");
      read_attack(a, c.attack);
    }
    if (const json* v = s.get("defense")) {
      Section d(*v, "defense");
      d.number("eps_p", c.defense.eps_p);
      d.number("k", c.defense.k);
      d.count("dilation_radius", c.defense.dilation_radius);
      d.flag("soften_dilation", c.defense.soften_dilation);
    }
    if (const json* v = s.get("eval")) {
      Section e(*v, "eval");
      EvalConfig& ec = c.eval;
      e.count("examples", ec.examples);
      e.count("batch_size", ec.batch_size);
      e.number_list("patch_fractions", ec.patch_fractions);
      e.choice_list("attacks", ec.attacks, parse_attack_family);
      e.choice_list("grad_modes", ec.grad_modes, parse_grad_mode);
      e.choice_list("transfer_attacks", ec.transfer_attacks, parse_attack_family);
      e.choice_list("shapes", ec.shapes, parse_patch_shape);
    }
  }
  c.train.seed = c.seed;
  c.attack.seed = c.seed;
  validate(c);
  return c;
}

RunConfig parse_config(const std::string& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError("missing config: " + path);
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string serialize_config(const RunConfig& c) {
  json j;  // std::map-backed, so keys come out sorted
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  const DataConfig& d = c.data;
  j["data"] = {{"source", data_source_name(d.source)},
               {"train_per_class", d.train_per_class},
               {"val_per_class", d.val_per_class},
               {"test_per_class", d.test_per_class},
               {"image_size", d.image_size},
               {"train_images", d.train_images},
               {"train_labels", d.train_labels},
               {"test_images", d.test_images},
               {"test_labels", d.test_labels},
               {"cifar_train", d.cifar_train},
               {"cifar_test", d.cifar_test},
               {"val_fraction", d.val_fraction}};
  const TrainConfig& t = c.train;
  json trig = {{"f1_tau", t.stage2_trigger.f1_tau}, {"fixed_epoch", nullptr}};
  if (t.stage2_trigger.fixed_epoch) trig["fixed_epoch"] = *t.stage2_trigger.fixed_epoch;
  j["train"] = {{"lr", t.lr},
                {"batch_size", t.batch_size},
                {"classifier_epochs", t.epochs},
                {"stage1_epochs", t.stage1_epochs},
                {"stage2_epochs", t.stage2_epochs},
                {"mix_ratio", t.mix_ratio},
                {"aux_weight", t.aux_weight},
                {"occlusion_prob", t.occlusion_prob},
                {"min_fraction", t.min_fraction},
                {"max_fraction", t.max_fraction},
                {"patch_shape", patch_shape_name(t.patch_shape)},
                {"val_examples", t.val_examples},
                {"stage2_trigger", trig},
                {"attack", write_attack(t.attack)}};
  j["attack"] = write_attack(c.attack);
  j["defense"] = {{"eps_p", c.defense.eps_p},
                  {"k", c.defense.k},
                  {"dilation_radius", c.defense.dilation_radius},
                  {"soften_dilation", c.defense.soften_dilation}};
  const EvalConfig& e = c.eval;
  json attacks = json::array(), modes = json::array(), transfer = json::array(), shapes = json::array();
  for (auto f : e.attacks) attacks.push_back(attack_family_name(f));
  for (auto m : e.grad_modes) modes.push_back(grad_mode_name(m));
  for (auto f : e.transfer_attacks) transfer.push_back(attack_family_name(f));
  for (auto s : e.shapes) shapes.push_back(patch_shape_name(s));
  j["eval"] = {{"examples", e.examples},
               {"batch_size", e.batch_size},
               {"patch_fractions", e.patch_fractions},
               {"attacks", attacks},
               {"grad_modes", modes},
               {"transfer_attacks", transfer},
               {"shapes", shapes}};
  return j.dump(2) + "\n";
}

}  // namespace pz
