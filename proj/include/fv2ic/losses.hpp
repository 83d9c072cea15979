#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fv2ic/autodiff.hpp"
#include "fv2ic/models.hpp"
#include "fv2ic/rng.hpp"
#include "fv2ic/synthdata.hpp"

namespace fv2ic {

enum class ConsistencyMode { vae, gaussian, off };

struct LossConfig {
  double omega = 0.5;        // CE weight in the supervised loss
  double lambda_max = 0.1;   // consistency weight after the ramp
  double ramp_rounds = 24;   // rounds to reach lambda_max
  ConsistencyMode consistency = ConsistencyMode::vae;
  double sigma_noise = 0.1;  // gaussian-augmentation noise level
  double dice_smooth = 1e-5;
  double prob_clamp = 1e-8;
  bool cons_on_logits = false;   // compare logits instead of probabilities
  bool distill_reverse = false;  // KL(global || ensemble) instead of the default
  bool use_latent = true;        // feed z into the segmentation network
  bool sample_z = true;          // sampled z during training (mu otherwise)
};

struct LossBreakdown {
  double kl = 0.0;
  double mse = 0.0;
  double dice = 0.0;
  double ce = 0.0;
  double cons = 0.0;
  double total = 0.0;
  double lambda_t = 0.0;
  double omega = 0.0;
};

// lambda(t) = lambda_max * exp(-5 (1 - min(t,Tr)/Tr)^2); nondecreasing,
// e^-5 * lambda_max at t=0, lambda_max from t >= Tr.
inline double ramp_weight(double t, double lambda_max, double ramp_rounds) {
  if (ramp_rounds <= 0.0) return lambda_max;
  const double r = std::min(t, ramp_rounds) / ramp_rounds;
  return lambda_max * std::exp(-5.0 * (1.0 - r) * (1.0 - r));
}

// Mean over the batch of sum_d 0.5 (mu^2 + exp(logvar) - logvar - 1).
inline Var gaussian_kl(const Var& mu, const Var& logvar) {
  check_same_shape(mu, logvar, "gaussian_kl");
  const int n = mu->value.dim(0);
  Var inner = vsquare(mu) + vexp(logvar) + affine_scalar(logvar, -1.0, -1.0);
  return scale(sum_all(inner), 0.5 / static_cast<double>(n));
}

// Mean squared error over pixels and batch.
inline Var recon_mse(const Var& x, const Var& x_hat) {
  check_same_shape(x, x_hat, "recon_mse");
  return mse_mean(x, x_hat);
}

template <class VaeT>
struct VaeLossGraph {
  Var total, kl, mse;

  LossBreakdown values() const {
    LossBreakdown b;
    b.kl = kl->value[0];
    b.mse = mse->value[0];
    b.total = total->value[0];
    return b;
  }
};

// Eq-style VAE objective through encode -> reparameterize -> decode.
template <class VaeT>
VaeLossGraph<VaeT> vae_loss(const VaeT& vae, const Tensor& images, Rng& rng, bool sample_z = true) {
  Var x = constant(images);
  auto [mu, logvar] = vae.encode(x);
  Var z = reparameterize(mu, logvar, rng, sample_z);
  Var x_hat = vae.decode(z);
  VaeLossGraph<VaeT> g;
  g.kl = gaussian_kl(mu, logvar);
  g.mse = recon_mse(x, x_hat);
  g.total = g.kl + g.mse;
  ensure_finite(g.total->value, "vae_loss");
  return g;
}

// One-hot (N,C,H,W) matching the probability tensor's shape.
inline Tensor one_hot_like(const std::vector<std::uint8_t>& masks, const Tensor& probs) {
  const int n = probs.dim(0), c = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
  if (masks.size() != static_cast<std::size_t>(n) * h * w) {
    throw ContractViolation("one_hot_like: mask size mismatch");
  }
  Tensor out({n, c, h, w});
  const int hw = h * w;
  for (int in = 0; in < n; ++in)
    for (int px = 0; px < hw; ++px) {
      const int cls = masks[static_cast<std::size_t>(in) * hw + px];
      if (cls >= c) throw ContractViolation("one_hot_like: class id out of range");
      out[(in * c + cls) * hw + px] = 1.0;
    }
  return out;
}

// Soft multi-class dice: 1 - mean over classes present in the mask of
// (2 sum(p g) + s) / (sum p + sum g + s). Class sums pool batch and pixels.
inline Var dice_loss(const Var& probs, const Tensor& mask_onehot, double smooth = 1e-5) {
  if (!probs->value.same_shape(mask_onehot)) throw ContractViolation("dice_loss: shape mismatch");
  const int c = probs->value.dim(1);
  Var g = constant(mask_onehot);
  Var inter = sum_nhw(probs * g);
  Var psum = sum_nhw(probs);
  Var gsum = sum_nhw(g);
  Var num = affine_scalar(inter, 2.0, smooth);
  Var den = affine_scalar(psum + gsum, 1.0, smooth);
  Var dice = vdiv(num, den);
  // Average only classes that appear in the mask.
  Tensor weights({c});
  int present = 0;
  for (int ic = 0; ic < c; ++ic)
    if (gsum->value[ic] > 0.0) ++present;
  for (int ic = 0; ic < c; ++ic)
    weights[ic] = gsum->value[ic] > 0.0 ? 1.0 / present : 0.0;
  return affine_scalar(sum_all(dice * constant(weights)), -1.0, 1.0);
}

// Mean over pixels of -log p[true class], probabilities clamped from below.
inline Var ce_loss(const Var& probs, const Tensor& mask_onehot, double clamp = 1e-8) {
  if (!probs->value.same_shape(mask_onehot)) throw ContractViolation("ce_loss: shape mismatch");
  const int n = probs->value.dim(0);
  const int hw = probs->value.dim(2) * probs->value.dim(3);
  Var picked = constant(mask_onehot) * vlog(clamp_min(probs, clamp));
  return scale(sum_all(picked), -1.0 / (static_cast<double>(n) * hw));
}

// x + N(0, sigma^2) clipped back into [0,1].
inline Tensor add_noise_clipped(const Tensor& x, double sigma, Rng& rng) {
  Tensor out = x;
  for (int i = 0; i < out.size(); ++i) {
    out[i] = std::min(1.0, std::max(0.0, out[i] + sigma * rng.normal()));
  }
  return out;
}

namespace detail {

// Both branches flow through f; `second_input` is a constant tensor.
template <class SegT>
Var two_branch_consistency(const SegT& f, const Var& x, const Tensor& second_input, const Var& z,
                           bool on_logits) {
  Var la = f.forward(x, z);
  Var lb = f.forward(constant(second_input), z);
  if (on_logits) return mse_mean(la, lb);
  return mse_mean(softmax_channels(la), softmax_channels(lb));
}

}  // namespace detail

// Prediction agreement between an image and its VAE reconstruction. The
// reconstruction enters as a constant target input: no gradient reaches the
// decoder through this branch, while both f evaluations backpropagate.
template <class SegT, class VaeT>
Var consistency_loss(const SegT& f, const VaeT& vae, const Tensor& images, Rng& rng,
                     const LossConfig& cfg) {
  Var x = constant(images);
  auto [mu, logvar] = vae.encode(x);
  Var z = reparameterize(mu, logvar, rng, cfg.sample_z);
  Tensor recon = detach(vae.decode(z))->value;
  return detail::two_branch_consistency(f, x, recon, cfg.use_latent ? z : Var(),
                                        cfg.cons_on_logits);
}

// Baseline augmentation variant: the second branch sees the image plus
// clipped Gaussian noise. z is optional (empty when injection is off).
template <class SegT>
Var gaussian_aug_consistency(const SegT& f, const Tensor& images, double sigma_noise, Rng& rng,
                             const Var& z = Var(), bool on_logits = false) {
  if (!(sigma_noise > 0.0)) throw ContractViolation("gaussian_aug_consistency: sigma must be > 0");
  Var x = constant(images);
  Tensor noisy = add_noise_clipped(images, sigma_noise, rng);
  return detail::two_branch_consistency(f, x, noisy, z, on_logits);
}

struct SegLossGraph {
  Var total, dice, ce, cons;  // cons may be empty when disabled
  double lambda_t = 0.0;
  double omega = 0.0;

  LossBreakdown values() const {
    LossBreakdown b;
    b.dice = dice->value[0];
    b.ce = ce->value[0];
    b.cons = cons ? cons->value[0] : 0.0;
    b.total = total->value[0];
    b.lambda_t = lambda_t;
    b.omega = omega;
    return b;
  }
};

// Supervised dice + omega * CE over labeled data plus lambda(t) * consistency
// over the full batch.
template <class SegT, class VaeT>
SegLossGraph seg_loss(const SegT& f, const VaeT& vae, const Tensor& labeled_images,
                      const std::vector<std::uint8_t>& labeled_masks, const Tensor& all_images,
                      double t, const LossConfig& cfg, Rng& rng) {
  if (labeled_images.empty()) throw ContractViolation("seg_loss: labeled batch empty");
  SegLossGraph g;
  g.omega = cfg.omega;
  g.lambda_t = ramp_weight(t, cfg.lambda_max, cfg.ramp_rounds);

  Var xl = constant(labeled_images);
  Var zl;
  if (cfg.use_latent) {
    auto [mu, logvar] = vae.encode(xl);
    zl = reparameterize(mu, logvar, rng, cfg.sample_z);
  }
  Var probs_l = softmax_channels(f.forward(xl, zl));
  Tensor onehot = one_hot_like(labeled_masks, probs_l->value);
  g.dice = dice_loss(probs_l, onehot, cfg.dice_smooth);
  g.ce = ce_loss(probs_l, onehot, cfg.prob_clamp);
  g.total = g.dice + scale(g.ce, cfg.omega);

  const bool want_cons = cfg.consistency != ConsistencyMode::off && g.lambda_t > 0.0;
  if (want_cons) {
    if (cfg.consistency == ConsistencyMode::vae) {
      g.cons = consistency_loss(f, vae, all_images, rng, cfg);
    } else {
      Var za;
      if (cfg.use_latent) {
        Var xa = constant(all_images);
        auto [mu, logvar] = vae.encode(xa);
        za = reparameterize(mu, logvar, rng, cfg.sample_z);
      }
      g.cons = gaussian_aug_consistency(f, all_images, cfg.sigma_noise, rng, za,
                                        cfg.cons_on_logits);
    }
    g.total = g.total + scale(g.cons, g.lambda_t);
  }
  ensure_finite(g.total->value, "seg_loss");
  return g;
}

// KL(ensemble || global) on per-pixel distributions, averaged over pixels;
// the ensemble is a constant target, so gradients flow only into the global
// branch. For the training path on logits see kl_vs_softmax.
inline Var distill_kl(const Var& ensemble_probs, const Var& global_probs, double clamp = 1e-8,
                      bool reverse = false) {
  check_same_shape(ensemble_probs, global_probs, "distill_kl");
  const Tensor& shape = ensemble_probs->value;
  const double npix = static_cast<double>(shape.dim(0)) * shape.dim(2) * shape.dim(3);
  Var t = detach(ensemble_probs);
  Var log_t = vlog(clamp_min(t, clamp));
  Var log_p = vlog(clamp_min(global_probs, clamp));
  Var term = reverse ? global_probs * (log_p - log_t) : t * (log_t - log_p);
  return scale(sum_all(term), 1.0 / npix);
}

}  // namespace fv2ic
