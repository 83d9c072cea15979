#pragma once

#include <cmath>
#include <string>

#include "fv2ic/autodiff.hpp"
#include "fv2ic/params.hpp"
#include "fv2ic/rng.hpp"

namespace fv2ic {

// Fan-in-scaled normal init (He), zero bias.
inline Tensor he_init(std::vector<int> shape, int fan_in, Rng& rng) {
  return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

struct Conv2dLayer {
  Var w, b;
  int stride = 1, pad = 1;
  std::string name;

  Conv2dLayer() = default;
  Conv2dLayer(ParamRegistry& reg, const std::string& nm, int cin, int cout, int k, int stride_,
              int pad_, Rng& rng)
      : stride(stride_), pad(pad_), name(nm) {
    w = reg.add(nm + ".w", he_init({cout, cin, k, k}, cin * k * k, rng));
    b = reg.add(nm + ".b", Tensor({cout}));
  }

  Var operator()(const Var& x) const {
    Var y = conv2d(x, w, b, stride, pad);
    ensure_finite(y->value, name);
    return y;
  }
};

struct ConvTranspose2dLayer {
  Var w, b;
  int stride = 2, pad = 0;
  std::string name;

  ConvTranspose2dLayer() = default;
  ConvTranspose2dLayer(ParamRegistry& reg, const std::string& nm, int cin, int cout, int k,
                       int stride_, int pad_, Rng& rng)
      : stride(stride_), pad(pad_), name(nm) {
    w = reg.add(nm + ".w", he_init({cin, cout, k, k}, cin * k * k, rng));
    b = reg.add(nm + ".b", Tensor({cout}));
  }

  Var operator()(const Var& x) const {
    Var y = conv_transpose2d(x, w, b, stride, pad);
    ensure_finite(y->value, name);
    return y;
  }
};

struct LinearLayer {
  Var w, b;
  std::string name;

  LinearLayer() = default;
  LinearLayer(ParamRegistry& reg, const std::string& nm, int in, int out, Rng& rng) : name(nm) {
    w = reg.add(nm + ".w", he_init({out, in}, in, rng));
    b = reg.add(nm + ".b", Tensor({out}));
  }

  Var operator()(const Var& x) const {
    Var y = linear(x, w, b);
    ensure_finite(y->value, name);
    return y;
  }
};

}  // namespace fv2ic
