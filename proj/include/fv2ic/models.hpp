#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fv2ic/autodiff.hpp"
#include "fv2ic/layers.hpp"
#include "fv2ic/params.hpp"
#include "fv2ic/rng.hpp"

namespace fv2ic {

// Architecture knobs shared by the VAE and the segmentation network.
struct ArchConfig {
  int image_size = 32;      // square inputs
  int num_classes = 4;      // C, includes background
  int latent_dim = 16;      // D
  int unet_depth = 3;       // pooling stages
  int unet_width = 8;       // channels at the top level
  int vae_levels = 3;       // strided conv stages in the VAE encoder
  int vae_width = 8;
  int inject_channels = 16; // latent projection width at the bottleneck
  bool latent_injection = true;
  bool sample_z_in_training = true;  // false: feed mu to the UNet while training

  void validate() const {
    if (num_classes < 2) throw ConfigError("model.num_classes", "must be >= 2");
    if (latent_dim < 2) throw ConfigError("model.latent_dim", "must be >= 2");
    if (unet_depth < 2) throw ConfigError("model.unet_depth", "must be >= 2");
    if (unet_width < 4) throw ConfigError("model.unet_width", "must be >= 4");
    if (vae_levels < 1) throw ConfigError("model.vae_levels", "must be >= 1");
    if (vae_width < 2) throw ConfigError("model.vae_width", "must be >= 2");
    if (inject_channels < 1) throw ConfigError("model.inject_channels", "must be >= 1");
    if (image_size < 16) throw ConfigError("model.image_size", "must be >= 16");
    if (image_size % (1 << unet_depth) != 0) {
      throw ConfigError("model.unet_depth", "image size " + std::to_string(image_size) +
                                                " not divisible by 2^depth");
    }
    if (image_size % (1 << vae_levels) != 0) {
      throw ConfigError("model.vae_levels", "image size " + std::to_string(image_size) +
                                                " not divisible by 2^levels");
    }
  }
};

// Convolutional VAE: strided encoder ending in mu / logvar heads, decoder
// projecting the latent back to an image squashed into [0,1].
class VaeModel {
 public:
  VaeModel(const ArchConfig& arch, Rng& rng) : arch_(arch) {
    arch.validate();
    const int L = arch.vae_levels;
    int cin = 1;
    for (int l = 0; l < L; ++l) {
      const int cout = arch.vae_width << l;
      enc_.emplace_back(reg_, "vae.enc" + std::to_string(l), cin, cout, 3, 2, 1, rng);
      cin = cout;
    }
    bottom_hw_ = arch.image_size >> L;
    feat_ = cin * bottom_hw_ * bottom_hw_;
    mu_head_ = LinearLayer(reg_, "vae.mu", feat_, arch.latent_dim, rng);
    logvar_head_ = LinearLayer(reg_, "vae.logvar", feat_, arch.latent_dim, rng);
    dec_fc_ = LinearLayer(reg_, "vae.dec_fc", arch.latent_dim, feat_, rng);
    for (int l = L - 1; l >= 0; --l) {
      const int ci = arch.vae_width << l;
      const int co = l == 0 ? 1 : (arch.vae_width << (l - 1));
      dec_.emplace_back(reg_, "vae.dec" + std::to_string(l), ci, co, 4, 2, 1, rng);
    }
  }

  // (N,1,H,W) -> ((N,D), (N,D))
  std::pair<Var, Var> encode(const Var& x) const {
    Var h = x;
    for (const auto& c : enc_) h = relu(c(h));
    h = reshape(h, {x->value.dim(0), feat_});
    return {mu_head_(h), logvar_head_(h)};
  }

  // (N,D) -> (N,1,H,W) in [0,1]
  Var decode(const Var& z) const {
    const int n = z->value.dim(0);
    const int cbot = arch_.vae_width << (arch_.vae_levels - 1);
    Var h = relu(dec_fc_(z));
    h = reshape(h, {n, cbot, bottom_hw_, bottom_hw_});
    for (std::size_t i = 0; i < dec_.size(); ++i) {
      h = dec_[i](h);
      if (i + 1 < dec_.size()) h = relu(h);
    }
    return sigmoid(h);
  }

  const ParamRegistry& params() const { return reg_; }
  ParamRegistry& params() { return reg_; }
  const ArchConfig& arch() const { return arch_; }
  int latent_dim() const { return arch_.latent_dim; }

  std::vector<Var> encoder_vars() const {
    std::vector<Var> v;
    for (const auto& c : enc_) {
      v.push_back(c.w);
      v.push_back(c.b);
    }
    v.insert(v.end(), {mu_head_.w, mu_head_.b, logvar_head_.w, logvar_head_.b});
    return v;
  }

  std::vector<Var> decoder_vars() const {
    std::vector<Var> v{dec_fc_.w, dec_fc_.b};
    for (const auto& c : dec_) {
      v.push_back(c.w);
      v.push_back(c.b);
    }
    return v;
  }

 private:
  ArchConfig arch_;
  ParamRegistry reg_;
  std::vector<Conv2dLayer> enc_;
  LinearLayer mu_head_, logvar_head_, dec_fc_;
  std::vector<ConvTranspose2dLayer> dec_;
  int bottom_hw_ = 0;
  int feat_ = 0;
};

// z = mu + exp(logvar/2) * eps with eps drawn from the stream. With
// sample=false this returns mu itself (deterministic evaluation path).
inline Var reparameterize(const Var& mu, const Var& logvar, Rng& rng, bool sample = true) {
  if (!mu->value.same_shape(logvar->value)) {
    throw ContractViolation("reparameterize: mu/logvar shape mismatch");
  }
  if (!sample) return mu;
  Var eps = constant(Tensor::randn(mu->value.shape(), rng));
  return mu + vexp(scale(logvar, 0.5)) * eps;
}

// Encoder/decoder segmentation network with skip connections. The latent
// code is projected, broadcast over the bottleneck grid and concatenated
// channel-wise before the decoder path.
class UnetModel {
 public:
  UnetModel(const ArchConfig& arch, Rng& rng) : arch_(arch) {
    arch.validate();
    const int L = arch.unet_depth;
    int cin = 1;
    for (int l = 0; l < L; ++l) {
      const int cout = arch.unet_width << l;
      enc1_.emplace_back(reg_, "unet.enc" + std::to_string(l) + ".c1", cin, cout, 3, 1, 1, rng);
      enc2_.emplace_back(reg_, "unet.enc" + std::to_string(l) + ".c2", cout, cout, 3, 1, 1, rng);
      cin = cout;
    }
    const int cbot = arch.unet_width << L;
    bott1_ = Conv2dLayer(reg_, "unet.bott.c1", cin, cbot, 3, 1, 1, rng);
    bott2_ = Conv2dLayer(reg_, "unet.bott.c2", cbot, cbot, 3, 1, 1, rng);
    if (arch.latent_injection) {
      inject_ = LinearLayer(reg_, "unet.inject", arch.latent_dim, arch.inject_channels, rng);
    }
    int up_in = cbot + (arch.latent_injection ? arch.inject_channels : 0);
    for (int l = L - 1; l >= 0; --l) {
      const int cw = arch.unet_width << l;
      up_.emplace_back(reg_, "unet.up" + std::to_string(l), up_in, cw, 2, 2, 0, rng);
      dec1_.emplace_back(reg_, "unet.dec" + std::to_string(l) + ".c1", 2 * cw, cw, 3, 1, 1, rng);
      dec2_.emplace_back(reg_, "unet.dec" + std::to_string(l) + ".c2", cw, cw, 3, 1, 1, rng);
      up_in = cw;
    }
    head_ = Conv2dLayer(reg_, "unet.head", arch.unet_width, arch.num_classes, 1, 1, 0, rng);
  }

  // images (N,1,H,W), z (N,D) -> logits (N,C,H,W). z may be null when the
  // injection block is disabled.
  Var forward(const Var& images, const Var& z) const {
    const int L = arch_.unet_depth;
    std::vector<Var> skips;
    Var h = images;
    for (int l = 0; l < L; ++l) {
      h = relu(enc2_[static_cast<std::size_t>(l)](relu(enc1_[static_cast<std::size_t>(l)](h))));
      skips.push_back(h);
      h = maxpool2(h);
    }
    h = relu(bott2_(relu(bott1_(h))));
    if (arch_.latent_injection) {
      if (!z) throw ContractViolation("unet.forward: latent injection enabled but z missing");
      const int hw = arch_.image_size >> L;
      h = concat_channels(h, broadcast_maps(inject_(z), hw, hw));
    }
    for (int i = 0; i < L; ++i) {
      const auto l = static_cast<std::size_t>(i);
      h = up_[l](h);
      h = concat_channels(skips[static_cast<std::size_t>(L - 1 - i)], h);
      h = relu(dec2_[l](relu(dec1_[l](h))));
    }
    return head_(h);
  }

  const ParamRegistry& params() const { return reg_; }
  ParamRegistry& params() { return reg_; }
  const ArchConfig& arch() const { return arch_; }

 private:
  ArchConfig arch_;
  ParamRegistry reg_;
  std::vector<Conv2dLayer> enc1_, enc2_;
  Conv2dLayer bott1_, bott2_;
  LinearLayer inject_;
  std::vector<ConvTranspose2dLayer> up_;
  std::vector<Conv2dLayer> dec1_, dec2_;
  Conv2dLayer head_;
};

// Per-pixel class distribution from logits.
inline Var predict_probs(const Var& logits) { return softmax_channels(logits); }

// Builds the (VAE, UNet) pair from one stream; construction order is fixed
// so the same stream always yields the same parameters.
inline std::pair<VaeModel, UnetModel> init_models(const ArchConfig& arch, Rng& rng) {
  VaeModel vae(arch, rng);
  UnetModel unet(arch, rng);
  return {std::move(vae), std::move(unet)};
}

// Combined parameter collection: vae.* entries then unet.* entries.
inline ModelParams combined_snapshot(const VaeModel& vae, const UnetModel& unet) {
  ModelParams p = vae.params().snapshot();
  ModelParams u = unet.params().snapshot();
  p.names.insert(p.names.end(), u.names.begin(), u.names.end());
  p.tensors.insert(p.tensors.end(), u.tensors.begin(), u.tensors.end());
  return p;
}

inline void load_combined(VaeModel& vae, UnetModel& unet, const ModelParams& p) {
  const std::size_t nv = vae.params().entries().size();
  if (p.names.size() != nv + unet.params().entries().size()) {
    throw ProtocolError("combined params: manifest size mismatch");
  }
  ModelParams pv, pu;
  pv.names.assign(p.names.begin(), p.names.begin() + static_cast<std::ptrdiff_t>(nv));
  pv.tensors.assign(p.tensors.begin(), p.tensors.begin() + static_cast<std::ptrdiff_t>(nv));
  pu.names.assign(p.names.begin() + static_cast<std::ptrdiff_t>(nv), p.names.end());
  pu.tensors.assign(p.tensors.begin() + static_cast<std::ptrdiff_t>(nv), p.tensors.end());
  vae.params().load(pv);
  unet.params().load(pu);
}

}  // namespace fv2ic
