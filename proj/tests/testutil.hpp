#pragma once

// Shared test helpers: tiny models that exercise the real layer and loss
// machinery at gradient-checkable size, a central-difference harness, and
// independent oracles (quadrature, pixel-loop metrics).

#include <cmath>
#include <functional>
#include <vector>

#include "fv2ic/fv2ic.hpp"

namespace fv2ic::testing {

// Small VAE on 8x8 inputs: one strided conv, D=2 heads, transposed-conv
// decoder. ~257 parameters.
class ToyVae {
 public:
  explicit ToyVae(Rng& rng) {
    enc_ = Conv2dLayer(reg_, "vae.enc0", 1, 2, 3, 2, 1, rng);
    mu_ = LinearLayer(reg_, "vae.mu", 32, 2, rng);
    logvar_ = LinearLayer(reg_, "vae.logvar", 32, 2, rng);
    dec_fc_ = LinearLayer(reg_, "vae.dec_fc", 2, 32, rng);
    dec_ = ConvTranspose2dLayer(reg_, "vae.dec0", 2, 1, 2, 2, 0, rng);
  }

  std::pair<Var, Var> encode(const Var& x) const {
    Var h = relu(enc_(x));
    h = reshape(h, {x->value.dim(0), 32});
    return {mu_(h), logvar_(h)};
  }

  Var decode(const Var& z) const {
    Var h = relu(dec_fc_(z));
    h = reshape(h, {z->value.dim(0), 2, 4, 4});
    return sigmoid(dec_(h));
  }

  const ParamRegistry& params() const { return reg_; }
  ParamRegistry& params() { return reg_; }
  int latent_dim() const { return 2; }

 private:
  ParamRegistry reg_;
  Conv2dLayer enc_;
  LinearLayer mu_, logvar_, dec_fc_;
  ConvTranspose2dLayer dec_;
};

// Small skip-connected segmentation net on 8x8 inputs with the same latent
// injection mechanism as the production network. ~205 parameters, C=2.
class ToySeg {
 public:
  explicit ToySeg(Rng& rng) {
    enc_ = Conv2dLayer(reg_, "unet.enc0", 1, 2, 3, 1, 1, rng);
    bott_ = Conv2dLayer(reg_, "unet.bott", 2, 3, 3, 1, 1, rng);
    inject_ = LinearLayer(reg_, "unet.inject", 2, 2, rng);
    up_ = ConvTranspose2dLayer(reg_, "unet.up0", 5, 2, 2, 2, 0, rng);
    dec_ = Conv2dLayer(reg_, "unet.dec0", 4, 2, 3, 1, 1, rng);
    head_ = Conv2dLayer(reg_, "unet.head", 2, 2, 1, 1, 0, rng);
  }

  Var forward(const Var& images, const Var& z) const {
    Var e = relu(enc_(images));
    Var h = relu(bott_(maxpool2(e)));
    if (z) h = concat_channels(h, broadcast_maps(inject_(z), 4, 4));
    h = up_(h);
    h = relu(dec_(concat_channels(e, h)));
    return head_(h);
  }

  struct Arch {
    bool latent_injection = true;
    int num_classes = 2;
  };
  Arch arch() const { return {}; }

  const ParamRegistry& params() const { return reg_; }
  ParamRegistry& params() { return reg_; }

 private:
  ParamRegistry reg_;
  Conv2dLayer enc_, bott_;
  LinearLayer inject_;
  ConvTranspose2dLayer up_;
  Conv2dLayer dec_, head_;
};

// Central finite differences (step h, 64-bit) against the analytic
// gradients of a scalar loss. make_loss must rebuild the same graph on every
// call (fix any rng seed inside). Relative error per entry:
//   |a - n| / max(1e-6, |a| + |n|).
struct GradCheckResult {
  double max_rel_err = 0.0;
  int checked = 0;
};

inline GradCheckResult gradcheck(const std::vector<Var>& params,
                                 const std::function<Var()>& make_loss, double h = 1e-5) {
  Var loss = make_loss();
  backward(loss);
  std::vector<Tensor> analytic;
  for (const Var& p : params) {
    // A parameter that never entered the graph keeps an empty grad; that is
    // an error for a gradient check, which must only see live parameters.
    if (p->grad.empty()) throw ContractViolation("gradcheck: parameter outside the loss graph");
    analytic.push_back(p->grad);
  }

  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Var p = params[k];
    for (int i = 0; i < p->value.size(); ++i) {
      const double v = p->value[i];
      p->value[i] = v + h;
      const double lp = make_loss()->value[0];
      p->value[i] = v - h;
      const double lm = make_loss()->value[0];
      p->value[i] = v;
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / std::max(1e-6, std::abs(a) + std::abs(numeric));
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.checked;
    }
  }
  return res;
}

inline int param_count(const ParamRegistry& reg) { return reg.total_scalars(); }

// Numeric oracle for KL(N(mu, sigma^2) || N(0,1)) by Simpson integration of
// q(x) log(q(x)/p(x)).
inline double kl_quadrature(double mu, double sigma) {
  const double lo = std::min(mu - 14.0 * sigma, -14.0);
  const double hi = std::max(mu + 14.0 * sigma, 14.0);
  const int n = 40000;  // even
  const double step = (hi - lo) / n;
  const double inv2pi = 0.3989422804014326779399460599344;
  auto integrand = [&](double x) {
    const double q = inv2pi / sigma * std::exp(-0.5 * (x - mu) * (x - mu) / (sigma * sigma));
    if (q < 1e-300) return 0.0;
    const double p = inv2pi * std::exp(-0.5 * x * x);
    return q * (std::log(q) - std::log(p));
  };
  double acc = integrand(lo) + integrand(hi);
  for (int i = 1; i < n; ++i) acc += integrand(lo + i * step) * (i % 2 ? 4.0 : 2.0);
  return acc * step / 3.0;
}

// Brute-force pixel-loop metrics, independent of the metrics module.
struct BruteClassMetrics {
  double dice, jaccard, sensitivity, accuracy;
};

inline BruteClassMetrics brute_metrics(const std::vector<std::uint8_t>& pred,
                                       const std::vector<std::uint8_t>& truth, int cls) {
  long tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == cls, t = truth[i] == cls;
    if (p && t) ++tp;
    if (p && !t) ++fp;
    if (!p && t) ++fn;
    if (!p && !t) ++tn;
  }
  BruteClassMetrics m{};
  m.dice = (tp + fp + fn == 0) ? 1.0 : 2.0 * tp / double(2 * tp + fp + fn);
  m.jaccard = (tp + fp + fn == 0) ? 1.0 : tp / double(tp + fp + fn);
  m.sensitivity = (tp + fn == 0) ? 1.0 : tp / double(tp + fn);
  m.accuracy = (tp + tn) / double(tp + fp + fn + tn);
  return m;
}

// Tiny experiment configuration that trains in well under a second.
inline ExperimentConfig micro_config() {
  ExperimentConfig cfg;
  cfg.seed = 3;
  cfg.dataset.image_size = 16;
  cfg.dataset.num_classes = 3;
  cfg.dataset.num_clients = 2;
  cfg.dataset.samples_per_client = 8;
  cfg.dataset.labeled_ratio = 0.25;
  cfg.dataset.val_samples = 4;
  cfg.dataset.test_samples = 4;
  cfg.model.latent_dim = 4;
  cfg.model.unet_depth = 2;
  cfg.model.unet_width = 4;
  cfg.model.vae_levels = 2;
  cfg.model.vae_width = 4;
  cfg.model.inject_channels = 4;
  cfg.federation.rounds = 2;
  cfg.federation.batch_labeled = 1;
  cfg.federation.batch_unlabeled = 3;
  cfg.federation.iters_vae = 1;
  cfg.federation.iters_seg = 1;
  cfg.federation.iters_distill = 1;
  cfg.federation.distill_batch = 2;
  cfg.output.checkpoint_every = 0;
  return cfg;
}

}  // namespace fv2ic::testing
