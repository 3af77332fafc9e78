#include "patchzero/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "patchzero/nn.hpp"
#include "patchzero/rng.hpp"

namespace pz {

const char* attack_family_name(AttackFamily f) {
  switch (f) {
    case AttackFamily::kMPGD: return "mpgd";
    case AttackFamily::kMAPGD: return "mapgd";
    case AttackFamily::kMCW: return "mcw";
  }
  return "?";
}

AttackFamily parse_attack_family(const std::string& name) {
  for (AttackFamily f : {AttackFamily::kMPGD, AttackFamily::kMAPGD, AttackFamily::kMCW}) {
    if (name == attack_family_name(f)) return f;
  }
  throw ValueError("unknown attack '" + name + "' (expected mpgd, mapgd or mcw)");
}

const char* grad_mode_name(GradMode m) { return m == GradMode::kDO ? "do" : "bpda"; }

GradMode parse_grad_mode(const std::string& name) {
  if (name == "do") return GradMode::kDO;
  if (name == "bpda") return GradMode::kBPDA;
  throw ValueError("unknown gradient mode '" + name + "' (expected do or bpda)");
}

void validate(const AttackConfig& cfg) {
  if (!(cfg.eps > 0.0 && cfg.eps <= 1.0)) throw ValueError("attack eps must lie in (0,1]");
  if (!(cfg.alpha > 0.0)) throw ValueError("attack alpha must be positive");
  if (cfg.iters < 1) throw ValueError("attack iters must be >= 1");
  if (cfg.restarts < 1) throw ValueError("attack restarts must be >= 1");
  if (!(cfg.rho >= 0.0 && cfg.rho <= 1.0)) throw ValueError("attack rho must lie in [0,1]");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ValueError("attack momentum must lie in [0,1)");
  if (!(cfg.kappa >= 0.0)) throw ValueError("attack kappa must be >= 0");
}

AttackConfig default_attack(AttackFamily family) {
  AttackConfig cfg;
  cfg.family = family;
  if (family == AttackFamily::kMAPGD) {
    cfg.eps = 0.3;
    cfg.alpha = 0.1;
  }
  return cfg;
}

std::vector<double> cross_entropy_per_example(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> out(n);
  auto z = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = z[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(z[i * k + j]));
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z[i * k + j] - mx);
    out[i] = mx + std::log(s) - z[i * k + static_cast<std::size_t>(labels[i])];
  }
  return out;
}

std::vector<double> cw_margin_per_example(const Tensor& logits, std::span<const int> labels,
                                          double kappa) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> out(n);
  auto z = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = static_cast<std::size_t>(labels[i]);
    double other = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      if (j != y) other = std::max(other, static_cast<double>(z[i * k + j]));
    }
    out[i] = std::max(static_cast<double>(z[i * k + y]) - other, -kappa);
  }
  return out;
}

GradientResult attack_gradient(GradMode mode, const AttackTarget& target, const Tensor& x,
                               std::span<const int> labels, AttackLoss loss, double kappa) {
  if (x.rank() != 4 || x.dim(0) != labels.size()) {
    throw ShapeError("attack_gradient: batch " + shape_str(x.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (mode == GradMode::kBPDA && (!target.detector || !target.defense)) {
    throw ValueError("BPDA gradients need a detector and a defense config");
  }
  Tape tape;
  Tensor xv = x.clone();
  xv.set_requires_grad(true);
  Tensor logits = mode == GradMode::kDO
                      ? target.classifier(xv)
                      : pipeline_forward_bpda(target.detector, target.classifier, xv, *target.defense).logits;
  Tensor objective = loss == AttackLoss::kCrossEntropy
                         ? cross_entropy(logits, labels, Reduction::kSum)
                         : cw_margin_loss(logits, labels, static_cast<float>(kappa), Reduction::kSum);
  tape.backward(objective);
  GradientResult out;
  out.grad = xv.has_grad() ? std::vector<float>(xv.grad().begin(), xv.grad().end())
                           : std::vector<float>(x.numel(), 0.0f);
  out.logits = logits.detach();
  out.loss = loss == AttackLoss::kCrossEntropy ? cross_entropy_per_example(out.logits, labels)
                                               : cw_margin_per_example(out.logits, labels, kappa);
  return out;
}

namespace {

struct Layout {
  std::size_t n, c, plane;
};

Layout layout_of(const Tensor& x, const std::vector<BinaryMask>& masks) {
  if (x.rank() != 4) throw ShapeError("attack batch must be [N,C,H,W]");
  const Layout l{x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  if (masks.size() != l.n) throw ShapeError("one patch mask per example is required");
  for (const BinaryMask& m : masks) {
    if (m.height != x.dim(2) || m.width != x.dim(3)) throw ShapeError("patch mask size mismatch");
  }
  return l;
}

float project(float v, float orig, float eps) {
  v = std::min(std::max(v, orig - eps), orig + eps);
  return std::min(std::max(v, 0.0f), 1.0f);
}

float sign_of(float g) { return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f); }

// Signed step with a per-example step size.
Tensor patch_step(const Tensor& x_adv, std::span<const float> grad, const std::vector<BinaryMask>& masks,
                  std::span<const double> alpha, double eps, const Tensor& x_orig) {
  const Layout l = layout_of(x_adv, masks);
  if (grad.size() != x_adv.numel() || x_orig.shape() != x_adv.shape()) {
    throw ShapeError("apply_patch_update: gradient/original shape mismatch");
  }
  Tensor out = x_adv.clone();
  auto o = out.mutable_data();
  auto xo = x_orig.data();
  const float e = static_cast<float>(eps);
  for (std::size_t i = 0; i < l.n; ++i) {
    const float a = static_cast<float>(alpha[i]);
    const auto& mv = masks[i].values;
    for (std::size_t ch = 0; ch < l.c; ++ch) {
      const std::size_t base = (i * l.c + ch) * l.plane;
      for (std::size_t p = 0; p < l.plane; ++p) {
        if (mv[p]) continue;
        const std::size_t q = base + p;
        o[q] = project(o[q] + a * sign_of(grad[q]), xo[q], e);
      }
    }
  }
  return out;
}

std::vector<BinaryMask> rasterize_all(const AttackBatch& batch) {
  if (batch.x.rank() != 4) throw ShapeError("attack batch must be [N,C,H,W]");
  const std::size_t n = batch.x.dim(0);
  if (batch.labels.size() != n || batch.specs.size() != n) {
    throw ShapeError("attack batch needs one label and one patch spec per example");
  }
  if (!batch.stream_ids.empty() && batch.stream_ids.size() != n) {
    throw ShapeError("attack batch stream ids must match the batch size");
  }
  std::vector<BinaryMask> masks;
  masks.reserve(n);
  for (const PatchSpec& s : batch.specs) masks.push_back(rasterize_mask(s, batch.x.dim(2), batch.x.dim(3)));
  return masks;
}

std::uint64_t stream_of(const AttackBatch& batch, std::size_t i) {
  return batch.stream_ids.empty() ? i : batch.stream_ids[i];
}

// Uniform start inside the feasible box, patch pixels only.
Tensor random_start(const AttackBatch& batch, const std::vector<BinaryMask>& masks, const AttackConfig& cfg,
                    std::size_t restart) {
  const Layout l = layout_of(batch.x, masks);
  Tensor x = batch.x.clone();
  auto o = x.mutable_data();
  const float e = static_cast<float>(cfg.eps);
  for (std::size_t i = 0; i < l.n; ++i) {
    Rng rng(mix_seed(mix_seed(cfg.seed, stream_of(batch, i)), restart));
    const auto& mv = masks[i].values;
    for (std::size_t ch = 0; ch < l.c; ++ch) {
      const std::size_t base = (i * l.c + ch) * l.plane;
      for (std::size_t p = 0; p < l.plane; ++p) {
        if (mv[p]) continue;
        const float v = o[base + p];
        const float lo = std::max(0.0f, v - e), hi = std::min(1.0f, v + e);
        o[base + p] = static_cast<float>(rng.uniform(lo, hi));
      }
    }
  }
  return x;
}

void copy_example(Tensor& dst, const Tensor& src, std::size_t i) {
  const std::size_t per = src.numel() / src.dim(0);
  auto s = src.data();
  auto d = dst.mutable_data();
  std::copy(s.begin() + i * per, s.begin() + (i + 1) * per, d.begin() + i * per);
}

void copy_example(std::vector<float>& dst, const std::vector<float>& src, std::size_t i, std::size_t per) {
  std::copy(src.begin() + i * per, src.begin() + (i + 1) * per, dst.begin() + i * per);
}

void require_family(const AttackConfig& cfg, AttackFamily f) {
  validate(cfg);
  if (cfg.family != f) {
    throw ValueError(std::string("attack config family is ") + attack_family_name(cfg.family) +
                     ", expected " + attack_family_name(f));
  }
}

}  // namespace

Tensor apply_patch_update(const Tensor& x_adv, std::span<const float> grad,
                          const std::vector<BinaryMask>& masks, double alpha, double eps,
                          const Tensor& x_orig) {
  const std::vector<double> a(x_adv.rank() == 4 ? x_adv.dim(0) : 0, alpha);
  return patch_step(x_adv, grad, masks, a, eps, x_orig);
}

AttackResult masked_pgd(const AttackTarget& target, const AttackBatch& batch, const AttackConfig& cfg,
                        const AttackObserver& observer) {
  require_family(cfg, AttackFamily::kMPGD);
  AttackResult res;
  res.masks = rasterize_all(batch);
  const std::size_t n = batch.x.dim(0);
  const std::vector<double> alpha(n, cfg.alpha);
  res.x_adv = batch.x.clone();
  res.loss.assign(n, -std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < cfg.restarts; ++r) {
    Tensor x = random_start(batch, res.masks, cfg, r);
    GradientResult g = attack_gradient(cfg.grad_mode, target, x, batch.labels);
    if (observer) observer(r, 0, x, g.loss);
    for (std::size_t t = 1; t <= cfg.iters; ++t) {
      x = patch_step(x, g.grad, res.masks, alpha, cfg.eps, batch.x);
      g = attack_gradient(cfg.grad_mode, target, x, batch.labels);
      if (observer) observer(r, t, x, g.loss);
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (r == 0 || g.loss[i] > res.loss[i]) {
        res.loss[i] = g.loss[i];
        copy_example(res.x_adv, x, i);
      }
    }
  }
  return res;
}

std::vector<std::size_t> autopgd_checkpoints(std::size_t iters) {
  const auto ceil_frac = [iters](double f) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(f * static_cast<double>(iters))));
  };
  const std::size_t decr = ceil_frac(0.03), floor_len = ceil_frac(0.06);
  std::vector<std::size_t> out;
  std::size_t window = ceil_frac(0.22), at = window;
  while (at <= iters) {
    out.push_back(at);
    window = std::max(window > decr ? window - decr : 0, floor_len);
    at += window;
  }
  return out;
}

AttackResult masked_autopgd(const AttackTarget& target, const AttackBatch& batch, const AttackConfig& cfg,
                            const AttackObserver& observer) {
  require_family(cfg, AttackFamily::kMAPGD);
  AttackResult res;
  res.masks = rasterize_all(batch);
  const Layout l = layout_of(batch.x, res.masks);
  const std::size_t n = l.n, per = l.c * l.plane;
  const float e = static_cast<float>(cfg.eps);
  const std::vector<std::size_t> checks = autopgd_checkpoints(cfg.iters);
  res.x_adv = batch.x.clone();
  res.loss.assign(n, -std::numeric_limits<double>::infinity());

  for (std::size_t r = 0; r < cfg.restarts; ++r) {
    std::vector<double> eta(n, cfg.alpha);
    Tensor x = random_start(batch, res.masks, cfg, r);
    GradientResult g = attack_gradient(cfg.grad_mode, target, x, batch.labels);
    if (observer) observer(r, 0, x, g.loss);

    Tensor x_best = x.clone();
    std::vector<float> grad_best = g.grad;
    std::vector<double> loss_best = g.loss, loss_prev = g.loss;
    std::vector<double> loss_best_at_check = loss_best;
    std::vector<char> reduced_at_check(n, 1);
    std::vector<std::size_t> increases(n, 0);
    Tensor x_old = x.clone();
    std::size_t next_check = 0, window_start = 0;

    for (std::size_t t = 0; t < cfg.iters; ++t) {
      const Tensor z = patch_step(x, g.grad, res.masks, eta, cfg.eps, batch.x);
      Tensor x_next = z;
      if (t > 0 && cfg.momentum > 0.0) {
        // x + a (z - x) + (1 - a)(x - x_old), projected, with a = 1 - momentum.
        const float a = static_cast<float>(1.0 - cfg.momentum);
        x_next = x.clone();
        auto o = x_next.mutable_data();
        auto xc = x.data(), xz = z.data(), xp = x_old.data(), xo = batch.x.data();
        for (std::size_t i = 0; i < n; ++i) {
          const auto& mv = res.masks[i].values;
          for (std::size_t ch = 0; ch < l.c; ++ch) {
            const std::size_t base = (i * l.c + ch) * l.plane;
            for (std::size_t p = 0; p < l.plane; ++p) {
              if (mv[p]) continue;
              const std::size_t q = base + p;
              const float v = xc[q] + (xz[q] - xc[q]) * a + (xc[q] - xp[q]) * (1.0f - a);
              o[q] = project(v, xo[q], e);
            }
          }
        }
      }
      x_old = x;
      x = x_next;
      g = attack_gradient(cfg.grad_mode, target, x, batch.labels);
      if (observer) observer(r, t + 1, x, g.loss);

      for (std::size_t i = 0; i < n; ++i) {
        if (g.loss[i] > loss_prev[i]) ++increases[i];
        loss_prev[i] = g.loss[i];
        if (g.loss[i] > loss_best[i]) {
          loss_best[i] = g.loss[i];
          copy_example(x_best, x, i);
          copy_example(grad_best, g.grad, i, per);
        }
      }

      if (next_check < checks.size() && t + 1 == checks[next_check]) {
        const double window = static_cast<double>(checks[next_check] - window_start);
        bool any_reset = false;
        for (std::size_t i = 0; i < n; ++i) {
          const bool oscillating = static_cast<double>(increases[i]) <= cfg.rho * window;
          const bool stalled = !reduced_at_check[i] && loss_best_at_check[i] >= loss_best[i];
          const bool halve = cfg.halving && (oscillating || stalled);
          reduced_at_check[i] = halve;
          loss_best_at_check[i] = loss_best[i];
          increases[i] = 0;
          if (halve) {
            eta[i] *= 0.5;
            any_reset = true;
          }
        }
        if (any_reset) {
          x = x.clone();
          for (std::size_t i = 0; i < n; ++i) {
            if (!reduced_at_check[i]) continue;
            copy_example(x, x_best, i);
            copy_example(g.grad, grad_best, i, per);
          }
        }
        window_start = checks[next_check];
        ++next_check;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (r == 0 || loss_best[i] > res.loss[i]) {
        res.loss[i] = loss_best[i];
        copy_example(res.x_adv, x_best, i);
      }
    }
  }
  return res;
}

AttackResult masked_cw(const AttackTarget& target, const AttackBatch& batch, const AttackConfig& cfg,
                       const AttackObserver& observer) {
  require_family(cfg, AttackFamily::kMCW);
  AttackResult res;
  res.masks = rasterize_all(batch);
  const Layout l = layout_of(batch.x, res.masks);
  const std::size_t n = l.n, per = l.c * l.plane;
  const float e = static_cast<float>(cfg.eps);
  const double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;

  Tensor x = batch.x.clone();
  GradientResult g = attack_gradient(cfg.grad_mode, target, x, batch.labels, AttackLoss::kCwMargin, cfg.kappa);
  if (observer) observer(0, 0, x, g.loss);
  res.x_adv = x.clone();
  res.loss = g.loss;
  std::vector<char> done(n);
  for (std::size_t i = 0; i < n; ++i) done[i] = g.loss[i] <= -cfg.kappa;

  std::vector<double> m(x.numel(), 0.0), v(x.numel(), 0.0);
  for (std::size_t t = 1; t <= cfg.iters; ++t) {
    if (std::all_of(done.begin(), done.end(), [](char d) { return d != 0; })) break;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    auto o = x.mutable_data();
    auto xo = batch.x.data();
    for (std::size_t i = 0; i < n; ++i) {
      if (done[i]) continue;
      const auto& mv = res.masks[i].values;
      for (std::size_t ch = 0; ch < l.c; ++ch) {
        const std::size_t base = i * per + ch * l.plane;
        for (std::size_t p = 0; p < l.plane; ++p) {
          if (mv[p]) continue;
          const std::size_t q = base + p;
          const double gq = g.grad[q];
          m[q] = b1 * m[q] + (1.0 - b1) * gq;
          v[q] = b2 * v[q] + (1.0 - b2) * gq * gq;
          const double step = cfg.alpha * (m[q] / c1) / (std::sqrt(v[q] / c2) + adam_eps);
          o[q] = project(static_cast<float>(o[q] - step), xo[q], e);
        }
      }
    }
    g = attack_gradient(cfg.grad_mode, target, x, batch.labels, AttackLoss::kCwMargin, cfg.kappa);
    if (observer) observer(0, t, x, g.loss);
    for (std::size_t i = 0; i < n; ++i) {
      if (done[i]) continue;
      if (g.loss[i] < res.loss[i]) {
        res.loss[i] = g.loss[i];
        copy_example(res.x_adv, x, i);
      }
      if (g.loss[i] <= -cfg.kappa) done[i] = 1;
    }
  }
  return res;
}

AttackResult run_attack(const AttackTarget& target, const AttackBatch& batch, const AttackConfig& cfg,
                        const AttackObserver& observer) {
  switch (cfg.family) {
    case AttackFamily::kMPGD: return masked_pgd(target, batch, cfg, observer);
    case AttackFamily::kMAPGD: return masked_autopgd(target, batch, cfg, observer);
    case AttackFamily::kMCW: return masked_cw(target, batch, cfg, observer);
  }
  throw ValueError("unknown attack family");
}

MaskedExample attack_example(const AttackTarget& target, const Tensor& x, int label,
                             const PatchSpec& spec, const AttackConfig& cfg, std::uint64_t stream_id) {
  if (x.rank() != 3) throw ShapeError("attack_example expects an image [C,H,W]");
  AttackBatch batch;
  batch.x = reshape(x.detach(), {1, x.dim(0), x.dim(1), x.dim(2)}).clone();
  batch.labels = {label};
  batch.specs = {spec};
  batch.stream_ids = {stream_id};
  AttackResult r = run_attack(target, batch, cfg);
  MaskedExample out;
  out.x = x.clone();
  out.x_adv = reshape(r.x_adv, x.shape()).clone();
  out.spec = spec;
  out.gt_mask = r.masks[0];
  out.label = label;
  return out;
}

}  // namespace pz
