#include <cmath>
#include <numeric>

#include "patchzero/attack.hpp"
#include "patchzero/nn.hpp"
#include "support.hpp"

namespace pz {
namespace {

using test::random_tensor;

constexpr std::size_t kSize = 16;

struct Toy {
  ClassifierParams cls = init_classifier<float>(101, 3, kSize, 4);
  DetectorParams det = init_detector<float>(102);
  DefenseConfig defense;
  AttackTarget target;

  Toy() {
    defense.mean = Tensor({3}, {0.4f, 0.5f, 0.6f});
    target.classifier = [this](const Tensor& x) { return classifier_forward(cls, x); };
    target.detector = [this](const Tensor& x) { return detector_forward(det, x).prob; };
    target.defense = &defense;
  }
};

AttackBatch make_batch(std::size_t n, std::uint64_t seed, double fraction = 0.09,
                       PatchShape shape = PatchShape::kSquare) {
  AttackBatch b;
  b.x = random_tensor<float>({n, 3, kSize, kSize}, seed, 0, 1);
  Rng rng(seed + 1);
  for (std::size_t i = 0; i < n; ++i) {
    b.labels.push_back(static_cast<int>(i % 4));
    b.specs.push_back(sample_patch_spec(rng, kSize, kSize, fraction, shape));
  }
  return b;
}

AttackConfig short_config(AttackFamily family, GradMode mode, std::size_t iters = 6) {
  AttackConfig c = default_attack(family);
  c.iters = iters;
  c.grad_mode = mode;
  c.seed = 77;
  return c;
}

TEST(Config, FamilyDefaultsFollowReportedSettings) {
  const auto pgd = default_attack(AttackFamily::kMPGD);
  EXPECT_EQ(pgd.eps, 1.0);
  EXPECT_EQ(pgd.alpha, 0.01);
  EXPECT_EQ(pgd.iters, 100u);
  const auto apgd = default_attack(AttackFamily::kMAPGD);
  EXPECT_EQ(apgd.eps, 0.3);
  EXPECT_EQ(apgd.alpha, 0.1);
  EXPECT_EQ(apgd.iters, 100u);
  EXPECT_EQ(default_attack(AttackFamily::kMCW).kappa, 0.0);
  EXPECT_EQ(parse_attack_family("mapgd"), AttackFamily::kMAPGD);
  EXPECT_EQ(parse_grad_mode("bpda"), GradMode::kBPDA);
  EXPECT_THROW(parse_attack_family("fgsm"), ValueError);
  AttackConfig bad = pgd;
  bad.eps = 0.0;
  EXPECT_THROW(validate(bad), ValueError);
  bad = pgd;
  bad.restarts = 0;
  EXPECT_THROW(validate(bad), ValueError);
}

TEST(PatchUpdate, OneStepArithmetic) {
  Tensor x = Tensor::full({1, 3, 8, 8}, 0.5f);
  std::vector<BinaryMask> masks{rasterize_mask({2, 3, 3, 4, PatchShape::kRectangle}, 8, 8)};
  std::vector<float> grad(x.numel(), 1.0f);
  auto next = apply_patch_update(x, grad, masks, 0.1, 1.0, x);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 64; ++p) {
      const float v = next.data()[c * 64 + p];
      if (masks[0].values[p] == 0) EXPECT_FLOAT_EQ(v, 0.6f);
      else EXPECT_EQ(v, 0.5f);
    }
}

TEST(PatchUpdate, ZeroGradientAndConfinement) {
  auto b = make_batch(3, 5);
  auto masks = std::vector<BinaryMask>{};
  for (const auto& s : b.specs) masks.push_back(rasterize_mask(s, kSize, kSize));
  std::vector<float> zero(b.x.numel(), 0.0f);
  EXPECT_TRUE(test::same_bits(apply_patch_update(b.x, zero, masks, 0.1, 1.0, b.x).data(), b.x.data()));
  auto g = random_tensor<float>(b.x.shape(), 6).to_vector();
  auto x_adv = random_tensor<float>(b.x.shape(), 7, 0, 1);
  auto next = apply_patch_update(x_adv, g, masks, 0.3, 0.2, b.x);
  const std::size_t plane = kSize * kSize;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t q = (i * 3 + c) * plane + p;
        if (masks[i].values[p]) {
          EXPECT_EQ(next.data()[q], x_adv.data()[q]);
        } else {
          EXPECT_LE(std::abs(next.data()[q] - b.x.data()[q]), 0.2f + 1e-7f);
          EXPECT_GE(next.data()[q], 0.0f);
          EXPECT_LE(next.data()[q], 1.0f);
        }
      }
}

TEST(Gradient, DownstreamOnlyMatchesLinearSoftmaxClosedForm) {
  const std::size_t n = 2, d = 3 * 4 * 4, k = 4;
  auto w = random_tensor<float>({d, k}, 8);
  AttackTarget t;
  t.classifier = [&](const Tensor& x) { return matmul(reshape(x, {x.dim(0), d}), w); };
  auto x = random_tensor<float>({n, 3, 4, 4}, 9, 0, 1);
  const std::vector<int> y{1, 3};
  auto g = attack_gradient(GradMode::kDO, t, x, y);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> z(k, 0.0);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t p = 0; p < d; ++p) z[j] += double(x.data()[i * d + p]) * w.data()[p * k + j];
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    std::vector<double> delta(k);
    for (std::size_t j = 0; j < k; ++j) delta[j] = std::exp(z[j] - mx) / s - (static_cast<int>(j) == y[i] ? 1.0 : 0.0);
    for (std::size_t p = 0; p < d; ++p) {
      double want = 0.0;
      for (std::size_t j = 0; j < k; ++j) want += delta[j] * w.data()[p * k + j];
      EXPECT_NEAR(g.grad[i * d + p], want, 1e-5 * std::max(1.0, std::abs(want)));
    }
    EXPECT_NEAR(g.loss[i], std::log(s) + mx - z[static_cast<std::size_t>(y[i])], 1e-5);
  }
}

TEST(Gradient, BpdaNeedsDetector) {
  AttackTarget t;
  t.classifier = [](const Tensor& x) { return reshape(x, {x.dim(0), x.numel() / x.dim(0)}); };
  const std::vector<int> y{0};
  EXPECT_THROW(attack_gradient(GradMode::kBPDA, t, Tensor::zeros({1, 1, 2, 2}), y), ValueError);
}

TEST(Gradient, BpdaForwardEqualsHardPipeline) {
  Toy toy;
  auto b = make_batch(4, 10);
  auto g = attack_gradient(GradMode::kBPDA, toy.target, b.x, b.labels);
  auto hard = pipeline_forward<float>(toy.target.detector, toy.target.classifier, b.x, toy.defense);
  EXPECT_TRUE(test::same_bits(g.logits.data(), hard.logits.data()));
}

// Detector whose benign probability depends on the channel sum of each
// pixel; inputs are drawn so that every pixel sits far from the threshold.
template <typename T>
BasicTensor<T> toy_detector(const BasicTensor<T>& x) {
  return sigmoid((reduce(x, ReduceOp::kSum, {1}) - T(1.5)) * T(8));
}

template <typename T>
BasicTensor<T> toy_classifier(const BasicTensor<T>& x, const BasicTensor<T>& w) {
  return matmul(reshape(x, {x.dim(0), w.dim(0)}), w);
}

TEST(Gradient, BpdaMatchesSoftPipelineDifferencesWhenSaturated) {
  const std::size_t n = 2, side = 4, d = 3 * side * side;
  Rng rng(11);
  std::vector<double> xv(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < side * side; ++p) {
      const bool bright = rng.uniform() < 0.5;
      for (std::size_t c = 0; c < 3; ++c)
        xv[(i * 3 + c) * side * side + p] = bright ? rng.uniform(0.75, 1.0) : rng.uniform(0.0, 0.25);
    }
  auto w64 = random_tensor<double>({d, 4}, 12);
  Tensor w32(w64.shape(), std::vector<float>(w64.data().begin(), w64.data().end()));
  Tensor x32({n, 3, side, side}, std::vector<float>(xv.begin(), xv.end()));
  Tensor64 x64({n, 3, side, side}, std::vector<double>(x32.data().begin(), x32.data().end()));

  DefenseConfig cfg;
  cfg.k = 200.0;
  cfg.dilation_radius = 0;
  cfg.mean = Tensor({3}, {0.3f, 0.5f, 0.7f});
  const std::vector<int> y{0, 2};

  // Precondition: hard and surrogate binarization agree to 1e-6 here.
  auto p = toy_detector(x64);
  auto hard = binarize(p, cfg.eps_p).to_vector();
  auto soft = sigmoid_surrogate(p, cfg.eps_p, cfg.k).to_vector();
  for (std::size_t i = 0; i < hard.size(); ++i) ASSERT_LT(std::abs(hard[i] - soft[i]), 1e-6);

  AttackTarget t;
  t.classifier = [&](const Tensor& x) { return toy_classifier(x, w32); };
  t.detector = [](const Tensor& x) { return toy_detector(x); };
  t.defense = &cfg;
  auto g = attack_gradient(GradMode::kBPDA, t, x32, y);

  ImageFn<double> det64 = [](const Tensor64& x) { return toy_detector(x); };
  ImageFn<double> cls64 = [&](const Tensor64& x) { return toy_classifier(x, w64); };
  DefenseConfig cfg64 = cfg;
  NoGradGuard<double> guard;
  auto loss = [&] {
    return cross_entropy(pipeline_soft_logits(det64, cls64, x64, cfg64), y, Reduction::kSum).item();
  };
  const double h = 1e-5;
  auto xd = x64.mutable_data();
  double worst = 0.0;
  for (std::size_t q = 0; q < xd.size(); ++q) {
    const double saved = xd[q];
    xd[q] = saved + h;
    const double up = loss();
    xd[q] = saved - h;
    const double down = loss();
    xd[q] = saved;
    const double fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(g.grad[q] - fd) / std::max(1.0, std::abs(fd)));
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(Checkpoints, ScheduleForHundredSteps) {
  // ceil(22), then windows 19, 16, 13, 10, 7, 6, 6 (floor at ceil(6)).
  EXPECT_EQ(autopgd_checkpoints(100), (std::vector<std::size_t>{22, 41, 57, 70, 80, 87, 93, 99}));
  EXPECT_EQ(autopgd_checkpoints(10), (std::vector<std::size_t>{3, 5, 6, 7, 8, 9, 10}));
}

class AttackProperty : public ::testing::TestWithParam<std::tuple<AttackFamily, GradMode>> {};

TEST_P(AttackProperty, ConfinementBudgetDeterminism) {
  const auto [family, mode] = GetParam();
  Toy toy;
  auto b = make_batch(3, 13, 0.09, PatchShape::kDiamond);
  auto cfg = short_config(family, mode);
  cfg.eps = 0.25;
  cfg.restarts = 2;
  auto r1 = run_attack(toy.target, b, cfg);
  auto r2 = run_attack(toy.target, b, cfg);
  EXPECT_TRUE(test::same_bits(r1.x_adv.data(), r2.x_adv.data()));
  const std::size_t plane = kSize * kSize;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t q = (i * 3 + c) * plane + p;
        const float a = r1.x_adv.data()[q], x = b.x.data()[q];
        if (r1.masks[i].values[p]) {
          EXPECT_EQ(a, x);
        } else {
          EXPECT_LE(std::abs(a - x), 0.25f + 1e-7f);
          EXPECT_GE(a, 0.0f);
          EXPECT_LE(a, 1.0f);
        }
      }
}

TEST_P(AttackProperty, BatchSplitIndependence) {
  const auto [family, mode] = GetParam();
  Toy toy;
  auto b = make_batch(3, 14);
  b.stream_ids = {40, 41, 42};
  auto cfg = short_config(family, mode, 4);
  auto whole = run_attack(toy.target, b, cfg);
  const std::size_t per = 3 * kSize * kSize;
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<float> xi(b.x.data().begin() + i * per, b.x.data().begin() + (i + 1) * per);
    auto single = attack_example(toy.target, Tensor({3, kSize, kSize}, xi), b.labels[i], b.specs[i], cfg,
                                 b.stream_ids[i]);
    EXPECT_TRUE(std::equal(single.x_adv.data().begin(), single.x_adv.data().end(),
                           whole.x_adv.data().begin() + i * per));
    EXPECT_EQ(single.gt_mask, whole.masks[i]);
  }
}

INSTANTIATE_TEST_SUITE_P(AllFamilies, AttackProperty,
                         ::testing::Combine(::testing::Values(AttackFamily::kMPGD, AttackFamily::kMAPGD,
                                                              AttackFamily::kMCW),
                                            ::testing::Values(GradMode::kDO, GradMode::kBPDA)));

TEST(Pgd, RestartDominance) {
  Toy toy;
  auto b = make_batch(6, 15);
  for (AttackFamily family : {AttackFamily::kMPGD, AttackFamily::kMAPGD}) {
    auto cfg = short_config(family, GradMode::kDO, 5);
    auto one = run_attack(toy.target, b, cfg);
    cfg.restarts = 3;
    auto three = run_attack(toy.target, b, cfg);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_GE(three.loss[i], one.loss[i]);
  }
}

TEST(Pgd, WrongFamilyRejected) {
  Toy toy;
  auto b = make_batch(1, 16);
  EXPECT_THROW(masked_pgd(toy.target, b, short_config(AttackFamily::kMCW, GradMode::kDO)), ValueError);
}

TEST(AutoPgd, DegeneratesToPgdWithoutHalvingOrMomentum) {
  Toy toy;
  auto b = make_batch(3, 17);
  auto pgd = short_config(AttackFamily::kMPGD, GradMode::kDO, 8);
  pgd.eps = 0.3;
  pgd.alpha = 0.05;
  auto apgd = pgd;
  apgd.family = AttackFamily::kMAPGD;
  apgd.halving = false;
  apgd.momentum = 0.0;
  std::vector<std::vector<float>> a, c;
  masked_pgd(toy.target, b, pgd, [&](std::size_t, std::size_t, const Tensor& x, std::span<const double>) {
    a.push_back(x.to_vector());
  });
  masked_autopgd(toy.target, b, apgd, [&](std::size_t, std::size_t, const Tensor& x, std::span<const double>) {
    c.push_back(x.to_vector());
  });
  ASSERT_EQ(a.size(), c.size());
  for (std::size_t t = 0; t < a.size(); ++t) EXPECT_TRUE(test::same_bits(a[t], c[t])) << "iteration " << t;
}

TEST(AutoPgd, ReturnsBestIterate) {
  Toy toy;
  auto b = make_batch(4, 18);
  auto cfg = short_config(AttackFamily::kMAPGD, GradMode::kDO, 20);
  std::vector<double> best(4, -INFINITY);
  std::vector<double> running_prev(4, -INFINITY);
  auto res = masked_autopgd(toy.target, b, cfg,
                            [&](std::size_t, std::size_t, const Tensor&, std::span<const double> loss) {
                              for (std::size_t i = 0; i < 4; ++i) {
                                best[i] = std::max(best[i], loss[i]);
                                EXPECT_GE(best[i], running_prev[i]);
                                running_prev[i] = best[i];
                              }
                            });
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(res.loss[i], best[i]);
  // The stored loss is the loss of the returned iterate.
  auto check = attack_gradient(GradMode::kDO, toy.target, res.x_adv, b.labels);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(check.loss[i], res.loss[i]);
}

TEST(Cw, AlreadyMisclassifiedReturnsStart) {
  Toy toy;
  auto b = make_batch(2, 19);
  auto logits = toy.target.classifier(b.x);
  auto pred = argmax_rows(logits);
  for (std::size_t i = 0; i < 2; ++i) b.labels[i] = (pred[i] + 1) % 4;
  std::size_t calls = 0;
  auto res = masked_cw(toy.target, b, short_config(AttackFamily::kMCW, GradMode::kDO, 10),
                       [&](std::size_t, std::size_t, const Tensor&, std::span<const double>) { ++calls; });
  EXPECT_EQ(calls, 1u);
  EXPECT_TRUE(test::same_bits(res.x_adv.data(), b.x.data()));
  for (double l : res.loss) EXPECT_LE(l, 0.0);
}

TEST(Cw, ReturnsLowestMargin) {
  Toy toy;
  auto b = make_batch(3, 20);
  auto logits = toy.target.classifier(b.x);
  b.labels = argmax_rows(logits);
  std::vector<double> lowest(3, INFINITY);
  auto cfg = short_config(AttackFamily::kMCW, GradMode::kDO, 15);
  auto res = masked_cw(toy.target, b, cfg, [&](std::size_t, std::size_t, const Tensor&, std::span<const double> l) {
    for (std::size_t i = 0; i < 3; ++i) lowest[i] = std::min(lowest[i], l[i]);
  });
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(res.loss[i], lowest[i]);
}

TEST(Parity, DefendedPredictionsIgnoreSurrogate) {
  Toy toy;
  auto b = make_batch(4, 21);
  auto cfg = short_config(AttackFamily::kMPGD, GradMode::kBPDA, 3);
  masked_pgd(toy.target, b, cfg, [&](std::size_t, std::size_t, const Tensor& x, std::span<const double>) {
    auto hard = pipeline_forward<float>(toy.target.detector, toy.target.classifier, x, toy.defense);
    auto bpda = pipeline_forward_bpda<float>(toy.target.detector, toy.target.classifier, x, toy.defense);
    EXPECT_EQ(hard.prediction, bpda.prediction);
    EXPECT_TRUE(test::same_bits(hard.logits.data(), bpda.logits.data()));
  });
}

TEST(Pgd, UntrainedClassifierAccuracyStaysNearChance) {
  // A random network has no learned class signal: its clean accuracy is
  // near 1/4, and an attack can only move it down from there.
  auto cls = init_classifier<float>(103, 3, kSize, 4);
  AttackTarget t;
  t.classifier = [&](const Tensor& x) { return classifier_forward(cls, x); };
  auto ds = gen_shapes_dataset(25, {ShapeClass::kCircle, ShapeClass::kSquare, ShapeClass::kTriangle, ShapeClass::kCross},
                               kSize, 22);
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  AttackBatch b;
  b.x = stack_images(ds, idx);
  b.labels = gather_labels(ds, idx);
  Rng rng(23);
  for (std::size_t i = 0; i < idx.size(); ++i) b.specs.push_back(sample_patch_spec(rng, kSize, kSize, 0.09, PatchShape::kSquare));
  auto accuracy = [&](const Tensor& x) {
    auto pred = argmax_rows(classifier_forward(cls, x));
    double hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == b.labels[i];
    return hit / static_cast<double>(pred.size());
  };
  const double clean = accuracy(b.x);
  auto res = masked_pgd(t, b, short_config(AttackFamily::kMPGD, GradMode::kDO, 10));
  const double attacked = accuracy(res.x_adv);
  const double sigma = std::sqrt(0.25 * 0.75 / 100.0);
  EXPECT_LE(std::abs(clean - 0.25), 3 * sigma + 0.25 / 4) << clean;
  EXPECT_LE(attacked, clean + 1e-12);
}

}  // namespace
}  // namespace pz
