// Acceptance run: one PASS/FAIL line per criterion.
//
// The desk pipeline (gen-data, train-classifier, train-detector, eval,
// transfer, shape-transfer) runs through the CLI into <work>/run and is
// reused when its artifacts already exist. Timing gates read the wall times
// recorded in the manifests of the invocations that produced the models.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "patchzero/checkpoint.hpp"
#include "patchzero/cli.hpp"
#include "patchzero/config.hpp"
#include "patchzero/eval.hpp"
#include "support.hpp"

namespace pz {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<std::uint8_t> bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingArtifactError("missing " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string text_of(const fs::path& p) {
  const auto b = bytes_of(p);
  return {b.begin(), b.end()};
}

json json_of(const fs::path& p) { return json::parse(text_of(p)); }

struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    notes.push_back((ok ? "" : "!") + what);
  }
};

class Acceptance {
 public:
  Acceptance(fs::path work, std::string config) : work_(std::move(work)), config_(std::move(config)) {
    fs::create_directories(work_);
    cfg_ = parse_config(config_);
  }

  fs::path run_dir() const { return work_ / "run"; }

  void pz(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const auto t0 = Clock::now();
    const int code = run_command(args, out, err);
    std::fprintf(stderr, "[acceptance] pz %s -> %d (%.1fs)\n", args.front().c_str(), code, seconds_since(t0));
    if (code != 0) throw std::runtime_error("pz " + args.front() + " failed: " + err.str());
  }

  // Runs `command` into dir unless `artifact` is already there.
  void ensure(const std::string& command, const fs::path& dir, const std::string& artifact,
              const std::string& config) {
    if (fs::exists(dir / artifact)) return;
    pz({command, "--config", config, "--out", dir.string()});
  }

  void ensure_pipeline(const std::string& upto) {
    const std::vector<std::pair<std::string, std::string>> steps = {
        {"gen-data", "data/test.pzds"},
        {"train-classifier", "models/classifier.pzck"},
        {"train-detector", "models/detector.pzck"},
        {"eval", "eval/report.json"},
        {"transfer", "transfer/report.json"},
        {"shape-transfer", "shape_transfer/report.json"}};
    for (const auto& [cmd, artifact] : steps) {
      if (cmd == "eval" || cmd == "transfer" || cmd == "shape-transfer") {
        ensure("train-detector", run_dir(), "models/detector.pzck", config_);
      }
      ensure(cmd, run_dir(), artifact, config_);
      if (cmd == upto) return;
    }
  }

  struct Loaded {
    Dataset train, val, test;
    ClassifierParams classifier;
    DefenseConfig defense;
  };

  const Loaded& loaded() {
    if (!loaded_) {
      ensure_pipeline("train-classifier");
      Loaded l;
      l.train = load_dataset((run_dir() / "data/train.pzds").string());
      l.val = load_dataset((run_dir() / "data/val.pzds").string());
      l.test = load_dataset((run_dir() / "data/test.pzds").string());
      l.classifier = load_classifier((run_dir() / "models/classifier.pzck").string());
      l.defense = cfg_.defense;
      l.defense.mean = l.train.mean;
      loaded_ = std::move(l);
    }
    return *loaded_;
  }

  DetectorParams detector(const std::string& name) {
    ensure_pipeline("train-detector");
    return load_detector((run_dir() / "models" / name).string());
  }

  // Wall time of the first manifest written by `command`.
  double manifest_seconds(const std::string& command) {
    const json m = json_of(run_dir() / "manifests" / (command + "-1.json"));
    return m.at("wall_seconds").at("total").get<double>();
  }

  Verdict c1_gradients();
  Verdict c2_oracles();
  Verdict c3_classifier();
  Verdict c4_attacks();
  Verdict c5_gt_mask();
  Verdict c6_stage1();
  Verdict c7_stage2();
  Verdict c8_forward();
  Verdict c9_transfer();
  Verdict c10_shapes();
  Verdict c11_reproducibility();

 private:
  fs::path work_;
  std::string config_;
  RunConfig cfg_;
  std::optional<Loaded> loaded_;
};

// ---------------------------------------------------------------- 1

using Fn64 = std::function<Tensor64(const std::vector<Tensor64>&)>;

double fd1(const Fn64& f, std::vector<Tensor64> in) {
  return test::max_fd_error<double>(f, std::move(in));
}

Verdict Acceptance::c1_gradients() {
  const auto t0 = Clock::now();
  using test::random_tensor;
  using V = std::vector<Tensor64>;
  const std::vector<int> y{0, 2, 1};
  std::map<std::string, double> err;
  auto r = [](Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
    return random_tensor<double>(std::move(s), seed, lo, hi);
  };
  err["add"] = fd1([](const V& v) { return sum((v[0] + v[1]) * v[0]); }, {r({3, 4}, 1), r({4}, 2)});
  err["sub"] = fd1([](const V& v) { return sum((v[0] - v[1]) * v[0]); }, {r({2, 3, 4}, 3), r({3, 1}, 4)});
  err["mul"] = fd1([](const V& v) { return sum(v[0] * v[1]); }, {r({3, 4}, 5), r({1, 4}, 6)});
  err["div"] = fd1([](const V& v) { return sum(v[0] / v[1]); }, {r({3, 4}, 7), r({3, 4}, 8, 0.5, 2.0)});
  err["scalar ops"] = fd1([](const V& v) { return sum((2.0 - v[0]) * 3.0 / 1.5 + (-v[0])); }, {r({5}, 9)});
  err["relu"] = fd1([](const V& v) { return sum(relu(v[0]) * v[0]); }, {r({40}, 10)});
  err["sigmoid"] = fd1([](const V& v) { return sum(sigmoid(v[0] * 3.0)); }, {r({20}, 11)});
  err["exp"] = fd1([](const V& v) { return sum(unary(v[0], UnaryOp::kExp)); }, {r({20}, 12)});
  err["log"] = fd1([](const V& v) { return sum(unary(v[0], UnaryOp::kLog)); }, {r({20}, 13, 0.2, 2.0)});
  err["abs"] = fd1([](const V& v) { return sum(unary(v[0], UnaryOp::kAbs)); }, {r({20}, 14)});
  err["matmul"] = fd1([](const V& v) { return sum(matmul(v[0], v[1]) * matmul(v[0], v[1])); },
                      {r({3, 5}, 15), r({5, 4}, 16)});
  err["conv2d s1 p1"] = fd1([](const V& v) { return sum(relu(conv2d(v[0], v[1], v[2], 1, 1)) * 1.0); },
                            {r({2, 3, 6, 6}, 17), r({4, 3, 3, 3}, 18), r({4}, 19)});
  err["conv2d s2 p1"] = fd1([](const V& v) {
    auto c = conv2d(v[0], v[1], v[2], 2, 1);
    return sum(c * c);
  }, {r({1, 2, 7, 7}, 20), r({3, 2, 3, 3}, 21), r({3}, 22)});
  err["conv2d c16"] = fd1([](const V& v) {
    auto c = conv2d(v[0], v[1], v[2], 1, 1);
    return sum(c * c);
  }, {r({1, 16, 4, 4}, 23), r({2, 16, 3, 3}, 24), r({2}, 25)});
  err["avg_pool2x"] = fd1([](const V& v) { auto p = avg_pool2x(v[0]); return sum(p * p); }, {r({2, 2, 4, 6}, 26)});
  err["upsample"] = fd1([](const V& v) { auto p = upsample_nearest2x(v[0]); return sum(p * v[1]); },
                        {r({1, 2, 3, 3}, 27), r({1, 2, 6, 6}, 28)});
  err["reduce sum axis"] = fd1([](const V& v) { auto s = reduce(v[0], ReduceOp::kSum, {1}); return sum(s * s); },
                               {r({2, 3, 4}, 29)});
  err["reduce mean axes"] = fd1([](const V& v) {
    auto s = reduce(v[0], ReduceOp::kMean, {0, 2});
    return sum(s * s);
  }, {r({2, 3, 4}, 30)});
  err["reduce max"] = fd1([](const V& v) { return sum(reduce(v[0], ReduceOp::kMax, {1})); }, {r({3, 5}, 31)});
  err["clip"] = fd1([](const V& v) { return sum(clip(v[0], -0.5, 0.5) * v[0]); }, {r({30}, 32)});
  err["reshape/concat"] = fd1([](const V& v) {
    auto c = concat(std::vector<Tensor64>{reshape(v[0], {2, 3}), v[1]}, 0);
    return sum(c * c);
  }, {r({6}, 33), r({1, 3}, 34)});
  err["min_pool_window"] = fd1([](const V& v) { return sum(min_pool_window(v[0], 1) * 1.0); }, {r({1, 5, 5}, 35)});
  err["cross_entropy"] = fd1([&](const V& v) { return cross_entropy(v[0], y); }, {r({3, 4}, 36, -3, 3)});
  err["cw_margin"] = fd1([&](const V& v) { return cw_margin_loss(v[0], y, 10.0); }, {r({3, 4}, 37, -3, 3)});
  err["pixel_bce"] = fd1([](const V& v) {
    std::vector<double> g(2 * 4 * 4, 1.0);
    g[5] = g[6] = g[21] = 0.0;
    return pixel_bce(sigmoid(v[0]), Tensor64({2, 4, 4}, g), sigmoid(v[1]), 0.4);
  }, {r({2, 4, 4}, 38), r({2, 2, 2}, 39)});

  Verdict v;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, e] : err) {
    if (e > worst) {
      worst = e;
      worst_name = name;
    }
  }
  v.check(worst <= 1e-6, fmt("%zu primitives, worst %.2e (%s) <= 1e-6", err.size(), worst, worst_name.c_str()));

  auto cls = init_classifier<float>(41);
  cls.set_requires_grad(true);
  auto x32 = random_tensor<float>({3, 3, 32, 32}, 42, 0, 1);
  Tensor64 x64(x32.shape(), std::vector<double>(x32.data().begin(), x32.data().end()));
  const auto ce = test::end_to_end_fd(
      cls,
      [&](const auto& p) {
        using T = std::decay_t<decltype(p.fc_w.data()[0])>;
        if constexpr (std::is_same_v<T, float>) return cross_entropy(classifier_forward(p, x32), y);
        else return cross_entropy(classifier_forward(p, x64), y);
      },
      43);
  v.check(ce.worst64 <= 1e-6 && ce.worst32 <= 1e-4 && ce.redrawn <= 5,
          fmt("TinyCNN 64-bit %.2e <= 1e-6, 32-bit %.2e <= 1e-4, %zu kink redraws", ce.worst64, ce.worst32,
              ce.redrawn));

  auto det = init_detector<float>(44);
  det.set_requires_grad(true);
  auto d32 = random_tensor<float>({2, 3, 16, 16}, 45, 0, 1);
  Tensor64 d64(d32.shape(), std::vector<double>(d32.data().begin(), d32.data().end()));
  std::vector<double> g(2 * 16 * 16, 1.0);
  for (std::size_t i = 3; i < 9; ++i)
    for (std::size_t j = 4; j < 10; ++j) g[i * 16 + j] = 0.0;
  Tensor64 gt64({2, 16, 16}, g);
  Tensor gt32({2, 16, 16}, std::vector<float>(g.begin(), g.end()));
  const auto de = test::end_to_end_fd(
      det,
      [&](const auto& p) {
        using T = std::decay_t<decltype(p.head_w.data()[0])>;
        if constexpr (std::is_same_v<T, float>) {
          auto out = detector_forward(p, d32);
          return pixel_bce(out.prob, gt32, out.aux, 0.4f);
        } else {
          auto out = detector_forward(p, d64);
          return pixel_bce(out.prob, gt64, out.aux, 0.4);
        }
      },
      46);
  v.check(de.worst64 <= 1e-6 && de.worst32 <= 1e-4 && de.redrawn <= 5,
          fmt("TinyUNet 64-bit %.2e <= 1e-6, 32-bit %.2e <= 1e-4, %zu kink redraws", de.worst64, de.worst32,
              de.redrawn));
  const double s = seconds_since(t0);
  v.check(s <= 60.0, fmt("%.1fs <= 60s", s));
  return v;
}

// ---------------------------------------------------------------- 2

// Entries are multiples of 1/8 in [-2, 2], so every product and partial sum
// is exact in double and the result does not depend on summation order.
Tensor64 dyadic(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<double>(static_cast<int>(rng.below(33)) - 16) / 8.0;
  return Tensor64(std::move(shape), std::move(v));
}

bool conv_matches_direct(Rng& rng, std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::size_t o,
                         std::size_t k, std::size_t stride, std::size_t pad) {
  auto x = dyadic({n, c, h, w}, rng);
  auto kern = dyadic({o, c, k, k}, rng);
  auto b = dyadic({o}, rng);
  auto got = conv2d(x, kern, b, stride, pad);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (w + 2 * pad - k) / stride + 1;
  if (got.shape() != Shape{n, o, oh, ow}) return false;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t q = 0; q < o; ++q)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t s = 0; s < ow; ++s) {
          double acc = b.data()[q];
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t e = 0; e < k; ++e) {
                const long yy = static_cast<long>(r * stride + a) - static_cast<long>(pad);
                const long xx = static_cast<long>(s * stride + e) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
                acc += x.data()[((i * c + ch) * h + yy) * w + xx] * kern.data()[((q * c + ch) * k + a) * k + e];
              }
          const double g = got.data()[((i * o + q) * oh + r) * ow + s];
          if (std::memcmp(&g, &acc, sizeof g) != 0) return false;
        }
  return true;
}

Verdict Acceptance::c2_oracles() {
  const auto t0 = Clock::now();
  Verdict v;
  Rng rng(2024);
  bool conv = true;
  std::size_t cases = 0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t c = t % 5 == 0 ? 16 : 1 + rng.below(4);
    const std::size_t k = t % 4 == 3 ? 1 : 3;
    const std::size_t stride = t % 3 == 2 ? 2 : 1;
    const std::size_t pad = k == 3 ? 1 : 0;
    // Spatial sizes that the stride covers exactly.
    const std::size_t h = 5 + stride * rng.below(5), w = 5 + stride * rng.below(5);
    conv = conv && conv_matches_direct(rng, 1 + rng.below(3), c, h, w, 1 + rng.below(6), k, stride, pad);
    ++cases;
  }
  v.check(conv, fmt("conv2d == direct summation on %zu shapes", cases));

  bool zo = true, dil = true, bin = true;
  const Tensor mean({3}, {0.3f, 0.5f, 0.7f});
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng r(s);
    const std::size_t h = 4 + r.below(20), w = 4 + r.below(20);
    auto x = test::random_tensor<float>({2, 3, h, w}, 100 + s, 0, 1);
    std::vector<BinaryMask> ms;
    for (int i = 0; i < 2; ++i) {
      BinaryMask m{h, w, std::vector<std::uint8_t>(h * w)};
      for (auto& b : m.values) b = r.uniform() < 0.1 ? 0 : 1;
      ms.push_back(m);
    }
    auto out = zero_out(x, masks_to_tensor(ms), mean);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < h * w; ++p) {
          const std::size_t q = (i * 3 + c) * h * w + p;
          const float want = ms[i].values[p] ? x.data()[q] : mean.data()[c];
          zo = zo && std::memcmp(&want, &out.data()[q], sizeof want) == 0;
        }
    const std::size_t radius = r.below(4);
    for (const auto& m : ms) {
      const auto d = dilate_zero_region(m, radius);
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          std::uint8_t want = 1;
          for (std::size_t a = (i >= radius ? i - radius : 0); a <= std::min(h - 1, i + radius); ++a)
            for (std::size_t b = (j >= radius ? j - radius : 0); b <= std::min(w - 1, j + radius); ++b)
              if (m.values[a * w + b] == 0) want = 0;
          dil = dil && d.values[i * w + j] == want;
        }
    }
    auto p = test::random_tensor<float>({2, h, w}, 200 + s, 0, 1);
    const float eps = static_cast<float>(r.uniform(0.05, 0.95));
    auto hb = binarize(p, eps);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const float want = p.data()[i] >= eps ? 1.0f : 0.0f;
      bin = bin && std::memcmp(&want, &hb.data()[i], sizeof want) == 0;
    }
  }
  v.check(zo, "zero_out == per-pixel branch");
  v.check(dil, "dilation == window scan");
  v.check(bin, "binarize == comparison");
  const double s = seconds_since(t0);
  v.check(s <= 60.0, fmt("%.1fs <= 60s", s));
  return v;
}

// ---------------------------------------------------------------- 3

Verdict Acceptance::c3_classifier() {
  const Loaded& l = loaded();
  Verdict v;
  const double acc = accuracy(classifier_predictor(l.classifier), l.test);
  v.check(acc >= 0.95, fmt("test accuracy %.4f >= 0.95", acc));
  std::size_t epochs = 0;
  {
    std::ifstream in(run_dir() / "logs/train-classifier.jsonl");
    std::string line;
    while (std::getline(in, line)) epochs += !line.empty();
  }
  v.check(epochs >= 1 && epochs <= 10, fmt("%zu epochs <= 10", epochs));
  const double s = manifest_seconds("train-classifier");
  v.check(s <= 180.0, fmt("%.0fs <= 180s", s));
  return v;
}

// ---------------------------------------------------------------- 4

double mean_ce(const std::vector<double>& l) {
  double s = 0;
  for (double x : l) s += x;
  return l.empty() ? 0.0 : s / l.size();
}

Verdict Acceptance::c4_attacks() {
  const Loaded& l = loaded();
  Verdict v;
  const auto idx = first_indices(l.test, cfg_.eval.examples);
  const Tensor x = stack_images(l.test, idx);
  const auto labels = gather_labels(l.test, idx);
  const Predictor bare = classifier_predictor(l.classifier);
  const double clean = accuracy(bare, x, labels);
  const AttackTarget target = make_target(l.classifier, nullptr, nullptr);
  PatchSampling sampling;
  sampling.fraction = 0.09;
  sampling.seed = mix_seed(cfg_.seed, 900);

  AttackConfig pgd = default_attack(AttackFamily::kMPGD);  // eps 1, alpha 0.01, 100 iterations
  pgd.restarts = cfg_.attack.restarts;
  pgd.seed = mix_seed(cfg_.seed, 901);
  const AttackedSet sp = make_attacked_set(target, l.test, idx, pgd, sampling, cfg_.eval.batch_size);
  const double acc_pgd = accuracy(bare, sp.x_adv, sp.labels);
  v.check(clean >= 0.95 && acc_pgd <= 0.30, fmt("MPGD-DO 9%%: %.3f -> %.3f (need >= 0.95 -> <= 0.30)", clean, acc_pgd));

  AttackConfig apgd = default_attack(AttackFamily::kMAPGD);
  apgd.eps = pgd.eps;
  apgd.iters = pgd.iters;
  apgd.restarts = pgd.restarts;
  apgd.seed = pgd.seed;
  const AttackedSet sa = make_attacked_set(target, l.test, idx, apgd, sampling, cfg_.eval.batch_size);
  std::size_t wins = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) wins += sa.loss[i] >= sp.loss[i];
  const double frac = static_cast<double>(wins) / idx.size();
  v.check(frac >= 0.60, fmt("MAPGD loss >= MPGD on %.3f of examples >= 0.60 (mean CE %.2f vs %.2f)", frac,
                            mean_ce(sa.loss), mean_ce(sp.loss)));

  AttackConfig cw = default_attack(AttackFamily::kMCW);
  cw.seed = pgd.seed;
  const AttackedSet sc = make_attacked_set(target, l.test, idx, cw, sampling, cfg_.eval.batch_size);
  const double acc_cw = accuracy(bare, sc.x_adv, sc.labels);
  v.check(clean - acc_cw < clean - acc_pgd,
          fmt("MCW drop %.3f < MPGD drop %.3f", clean - acc_cw, clean - acc_pgd));
  return v;
}

// ---------------------------------------------------------------- 5

Verdict Acceptance::c5_gt_mask() {
  ensure_pipeline("eval");
  const MetricsReport r = load_report((run_dir() / "eval").string());
  Verdict v;
  const double benign = r.get("benign_acc");
  for (double f : cfg_.eval.patch_fractions) {
    const double allowance = f <= 0.05 ? 0.05 : 0.10;
    const double gt = r.get("gt_mask_acc", "mpgd", "do", f);
    v.check(gt >= benign - allowance, fmt("%g%%: GT-mask %.3f within %.0f points of benign %.3f", f * 100, gt,
                                          allowance * 100, benign));
  }
  std::size_t held = 0;
  std::string broken;
  for (const auto& [k, ok] : r.flags) {
    if (k.rfind("ordering/", 0) != 0) continue;
    if (ok) ++held;
    else broken += " " + k;
  }
  v.check(broken.empty() && held > 0, fmt("ordering chain holds on %zu evaluations%s", held,
                                          broken.empty() ? "" : (", broken:" + broken).c_str()));
  for (const auto& family : cfg_.eval.attacks) {
    const std::string fam = attack_family_name(family);
    for (double f : cfg_.eval.patch_fractions) {
      if (!r.has("defended_acc", fam, "bpda", f)) continue;
      v.notes.push_back(fmt("%s %g: benign %.3f gt %.3f do %.3f bpda %.3f und %.3f", fam.c_str(), f, benign,
                            r.get("gt_mask_acc", fam, "do", f), r.get("defended_acc", fam, "do", f),
                            r.get("defended_acc", fam, "bpda", f), r.get("undefended_acc", fam, "do", f)));
    }
  }
  return v;
}

// ---------------------------------------------------------------- 6

Verdict Acceptance::c6_stage1() {
  const Loaded& l = loaded();
  const DetectorParams s1 = detector("detector_stage1.pzck");
  const DetectorParams fin = detector("detector.pzck");
  Verdict v;
  const auto idx = first_indices(l.val, cfg_.eval.examples);
  PatchSampling sampling;
  sampling.fraction = cfg_.train.min_fraction;
  sampling.max_fraction = cfg_.train.max_fraction;
  sampling.seed = mix_seed(cfg_.seed, 902);
  AttackConfig pgd = default_attack(AttackFamily::kMPGD);
  pgd.restarts = cfg_.attack.restarts;
  pgd.seed = mix_seed(cfg_.seed, 903);
  const AttackedSet set = make_attacked_set(make_target(l.classifier, nullptr, nullptr), l.val, idx, pgd, sampling,
                                            cfg_.eval.batch_size);
  const SegMetrics m = segmentation_metrics(predict_masks(s1, set.x_adv, cfg_.defense.eps_p), set.masks);
  v.check(m.f1 >= 0.95, fmt("stage-1 DO val F1 %.4f >= 0.95 (P %.4f R %.4f)", m.f1, m.precision, m.recall));
  const Tensor benign = stack_images(l.val, first_indices(l.val, l.val.size()));
  const double fpr1 = benign_fpr(detector_fn(s1), benign, cfg_.defense.eps_p);
  v.check(fpr1 <= 1e-3, fmt("stage-1 benign FPR %.2e <= 1e-3", fpr1));
  const double fpr2 = benign_fpr(detector_fn(fin), benign, cfg_.defense.eps_p);
  v.notes.push_back(fmt("final detector benign FPR %.2e", fpr2));
  const double s = manifest_seconds("train-detector");
  v.check(s <= 1200.0, fmt("two-stage training %.0fs <= 1200s", s));
  return v;
}

// ---------------------------------------------------------------- 7

Verdict Acceptance::c7_stage2() {
  ensure_pipeline("eval");
  const Loaded& l = loaded();
  const MetricsReport r = load_report((run_dir() / "eval").string());
  const DetectorParams s1 = detector("detector_stage1.pzck");
  Verdict v;
  const auto idx = first_indices(l.test, cfg_.eval.examples);
  for (std::size_t fi = 0; fi < cfg_.eval.patch_fractions.size(); ++fi) {
    const double f = cfg_.eval.patch_fractions[fi];
    const double rec_do = r.get("seg_recall", "mpgd", "do", f), rec_bpda = r.get("seg_recall", "mpgd", "bpda", f);
    v.check(std::abs(rec_do - rec_bpda) <= 0.03,
            fmt("%g%%: BPDA recall %.4f within 3 points of DO recall %.4f", f * 100, rec_bpda, rec_do));
    const double def = r.get("defended_acc", "mpgd", "bpda", f), und = r.get("undefended_acc", "mpgd", "do", f);
    v.check(def >= und + 0.40, fmt("%g%%: defended BPDA %.3f >= undefended %.3f + 0.40", f * 100, def, und));

    // Stage-1-only detector under a BPDA attack on its own pipeline, with
    // the evaluation's sampling and attack settings.
    PatchSampling sampling;
    sampling.fraction = f;
    sampling.seed = mix_seed(cfg_.seed, 100 + fi);
    AttackConfig cfg = eval_attack(cfg_.attack, AttackFamily::kMPGD);
    cfg.grad_mode = GradMode::kBPDA;
    cfg.seed = mix_seed(mix_seed(cfg_.seed, 200 + fi), 0);
    const AttackedSet set =
        make_attacked_set(make_target(l.classifier, &s1, &l.defense), l.test, idx, cfg, sampling, cfg_.eval.batch_size);
    const double def1 = accuracy(defended_predictor(l.classifier, s1, l.defense), set.x_adv, set.labels);
    v.check(def > def1, fmt("%g%%: two-stage BPDA %.3f > stage-1-only BPDA %.3f", f * 100, def, def1));
  }
  return v;
}

// ---------------------------------------------------------------- 8

Verdict Acceptance::c8_forward() {
  const Loaded& l = loaded();
  const DetectorParams det = detector("detector.pzck");
  const ImageFn<float> d = detector_fn(det), c = classifier_fn(l.classifier);
  Verdict v;
  std::size_t equal = 0, total = 0;
  const std::size_t size = l.test.height();
  for (std::size_t b = 0; b < 20; ++b) {
    auto x = test::random_tensor<float>({50, 3, size, size}, 8000 + b, 0, 1);
    auto hard = pipeline_forward(d, c, x, l.defense);
    auto bpda = pipeline_forward_bpda(d, c, x, l.defense);
    const std::size_t per_logit = hard.logits.numel() / 50, per_mask = hard.mask.numel() / 50;
    const std::size_t per_img = x.numel() / 50;
    for (std::size_t i = 0; i < 50; ++i) {
      const bool same =
          std::memcmp(hard.logits.data().data() + i * per_logit, bpda.logits.data().data() + i * per_logit,
                      per_logit * sizeof(float)) == 0 &&
          std::memcmp(hard.mask.data().data() + i * per_mask, bpda.mask.data().data() + i * per_mask,
                      per_mask * sizeof(float)) == 0 &&
          std::memcmp(hard.sanitized.data().data() + i * per_img, bpda.sanitized.data().data() + i * per_img,
                      per_img * sizeof(float)) == 0 &&
          hard.prediction[i] == bpda.prediction[i];
      equal += same;
      ++total;
    }
  }
  v.check(equal == total && total == 1000, fmt("%zu/%zu inputs bitwise equal", equal, total));
  return v;
}

// ---------------------------------------------------------------- 9

Verdict Acceptance::c9_transfer() {
  ensure_pipeline("transfer");
  const MetricsReport r = load_report((run_dir() / "transfer").string());
  Verdict v;
  const auto& t = r.transfer;
  const std::set<std::string> want{"mpgd", "mapgd"};
  v.check(std::set<std::string>(t.attacks.begin(), t.attacks.end()) == want, "matrix over {mpgd, mapgd}");
  for (std::size_t j = 0; j < t.attacks.size(); ++j)
    for (std::size_t i = 0; i < t.attacks.size(); ++i) {
      if (i == j) continue;
      const double gap = std::abs(t.values[j][j] - t.values[i][j]);
      v.check(gap <= 0.10, fmt("trained %s / tested %s: %.3f vs diagonal %.3f (gap %.3f <= 0.10)",
                               t.attacks[i].c_str(), t.attacks[j].c_str(), t.values[i][j], t.values[j][j], gap));
    }
  return v;
}

// ---------------------------------------------------------------- 10

Verdict Acceptance::c10_shapes() {
  ensure_pipeline("shape-transfer");
  const MetricsReport r = load_report((run_dir() / "shape_transfer").string());
  Verdict v;
  const double f = cfg_.eval.patch_fractions.back();
  const double sq = r.get("seg_f1/square", "mpgd", "do", f);
  for (const char* s : {"diamond", "octagon", "rectangle"}) {
    const double f1 = r.get(std::string("seg_f1/") + s, "mpgd", "do", f);
    const double def = r.get(std::string("defended_acc/") + s, "mpgd", "do", f);
    const double und = r.get(std::string("undefended_acc/") + s, "mpgd", "do", f);
    v.check(f1 >= sq - 0.05, fmt("%s F1 %.4f >= square %.4f - 0.05", s, f1, sq));
    v.check(def >= und + 0.30, fmt("%s defended %.3f >= undefended %.3f + 0.30", s, def, und));
  }
  return v;
}

// ---------------------------------------------------------------- 11

std::vector<std::string> artifact_files(const fs::path& dir) {
  std::vector<std::string> out;
  for (const char* sub : {"data", "models", "eval", "attack"}) {
    if (!fs::exists(dir / sub)) continue;
    for (const auto& e : fs::recursive_directory_iterator(dir / sub)) {
      if (e.is_regular_file() && e.path().filename() != "timings.json") {
        out.push_back(fs::relative(e.path(), dir).string());
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

Verdict Acceptance::c11_reproducibility() {
  Verdict v;
  // A small end-to-end pipeline, run twice from scratch.
  RunConfig tiny = cfg_;
  tiny.data.train_per_class = 40;
  tiny.data.val_per_class = 10;
  tiny.data.test_per_class = 10;
  tiny.data.image_size = 16;
  tiny.train.epochs = 2;
  tiny.train.stage1_epochs = 1;
  tiny.train.stage2_epochs = 1;
  tiny.train.attack.iters = 3;
  tiny.train.val_examples = 16;
  tiny.attack.iters = 5;
  tiny.eval.examples = 16;
  tiny.eval.attacks = {AttackFamily::kMPGD, AttackFamily::kMAPGD};
  const fs::path tiny_cfg = work_ / "tiny.json";
  std::ofstream(tiny_cfg) << serialize_config(tiny);
  std::vector<std::vector<std::string>> listings;
  for (const char* name : {"repro_a", "repro_b"}) {
    const fs::path dir = work_ / name;
    fs::remove_all(dir);
    for (const char* cmd : {"gen-data", "train-classifier", "train-detector", "eval", "attack"}) {
      pz({cmd, "--config", tiny_cfg.string(), "--out", dir.string()});
    }
    listings.push_back(artifact_files(dir));
  }
  bool same = listings[0] == listings[1] && !listings[0].empty();
  for (const auto& rel : listings[0]) {
    same = same && bytes_of(work_ / "repro_a" / rel) == bytes_of(work_ / "repro_b" / rel);
  }
  v.check(same, fmt("small pipeline twice: %zu artifacts bitwise equal", listings[0].size()));

  // The desk classifier, retrained from its config and seed.
  ensure_pipeline("train-classifier");
  const fs::path desk = work_ / "repro_desk";
  fs::remove_all(desk);
  pz({"gen-data", "--config", config_, "--out", desk.string()});
  pz({"train-classifier", "--config", config_, "--out", desk.string()});
  bool desk_same = true;
  for (const char* rel : {"data/train.pzds", "data/val.pzds", "data/test.pzds", "models/classifier.pzck"}) {
    desk_same = desk_same && bytes_of(desk / rel) == bytes_of(run_dir() / rel);
  }
  v.check(desk_same, "desk datasets and classifier retrained bitwise equal");
  fs::remove_all(desk);

  bool lossless = true;
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(work_ / "repro_a" / "models")) {
    const auto bytes = bytes_of(e.path());
    lossless = lossless && serialize_checkpoint(parse_checkpoint(bytes)) == bytes;
    ++n;
  }
  for (const char* rel : {"models/classifier.pzck", "models/detector.pzck"}) {
    if (!fs::exists(run_dir() / rel)) continue;
    const auto bytes = bytes_of(run_dir() / rel);
    lossless = lossless && serialize_checkpoint(parse_checkpoint(bytes)) == bytes;
    ++n;
  }
  const auto dbytes = bytes_of(run_dir() / "data/test.pzds");
  const Dataset ds = load_dataset((run_dir() / "data/test.pzds").string());
  const fs::path re = work_ / "resaved.pzds";
  save_dataset(ds, re.string());
  lossless = lossless && bytes_of(re) == dbytes;
  fs::remove(re);
  v.check(lossless, fmt("checkpoint round trip lossless (%zu files + dataset)", n));

  bool stable = true;
  for (const fs::path& p : {run_dir() / "config.json", work_ / "repro_a" / "config.json"}) {
    const std::string text = text_of(p);
    stable = stable && serialize_config(parse_config_text(text)) == text;
  }
  for (const fs::path& p : {work_ / "repro_a" / "eval", run_dir() / "eval"}) {
    if (!fs::exists(p / "report.json")) continue;
    const MetricsReport r = load_report(p.string());
    stable = stable && report_to_json(r) == text_of(p / "report.json") && report_to_csv(r) == text_of(p / "tables.csv");
  }
  v.check(stable, "config and report round trips byte-stable");
  return v;
}

}  // namespace
}  // namespace pz

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-11"};
  std::string work = "acceptance-work";
  std::string config = PZ_DESK_CONFIG;
  std::vector<int> only;
  app.add_option("--work", work, "Work directory (artifacts are reused)");
  app.add_option("--config", config, "Desk configuration")->check(CLI::ExistingFile);
  app.add_option("--only", only, "Criteria to run (default: all)");
  CLI11_PARSE(app, argc, argv);

  pz::Acceptance acc(work, config);
  const std::vector<std::pair<int, std::function<pz::Verdict()>>> criteria = {
      {1, [&] { return acc.c1_gradients(); }},     {2, [&] { return acc.c2_oracles(); }},
      {3, [&] { return acc.c3_classifier(); }},    {4, [&] { return acc.c4_attacks(); }},
      {5, [&] { return acc.c5_gt_mask(); }},       {6, [&] { return acc.c6_stage1(); }},
      {7, [&] { return acc.c7_stage2(); }},        {8, [&] { return acc.c8_forward(); }},
      {9, [&] { return acc.c9_transfer(); }},      {10, [&] { return acc.c10_shapes(); }},
      {11, [&] { return acc.c11_reproducibility(); }}};

  int failed = 0;
  for (const auto& [id, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    pz::Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      v = run();
    } catch (const std::exception& e) {
      v.check(false, std::string("error: ") + e.what());
    }
    std::string detail;
    for (const auto& n : v.notes) detail += (detail.empty() ? "" : "; ") + n;
    std::printf("criterion %2d: %s  [%.0fs] %s\n", id, v.pass ? "PASS" : "FAIL",
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), detail.c_str());
    std::fflush(stdout);
    failed += !v.pass;
  }
  return failed == 0 ? 0 : 1;
}
