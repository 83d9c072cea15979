#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "fv2ic/autodiff.hpp"
#include "fv2ic/tensor.hpp"

namespace fv2ic {

// Adam over one or more parameter groups, each with its own learning rate.
// A parameter whose gradient was never produced this step (it did not appear
// in the loss graph) is treated as having gradient zero and keeps zero
// moments, so it is left untouched.
class Adam {
 public:
  struct Group {
    std::vector<Var> params;
    double lr;
  };

  explicit Adam(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const Group& g : groups_) {
      for (const Var& p : g.params) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
      }
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    std::size_t slot = 0;
    for (const Group& g : groups_) {
      for (const Var& p : g.params) {
        Tensor& m = m_[slot];
        Tensor& v = v_[slot];
        ++slot;
        if (p->grad.empty()) continue;  // not part of this step's graph
        for (int i = 0; i < p->value.size(); ++i) {
          const double gr = p->grad[i];
          if (gr == 0.0 && m[i] == 0.0 && v[i] == 0.0) continue;
          m[i] = beta1_ * m[i] + (1.0 - beta1_) * gr;
          v[i] = beta2_ * v[i] + (1.0 - beta2_) * gr * gr;
          p->value[i] -= g.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        }
      }
    }
  }

 private:
  std::vector<Group> groups_;
  double beta1_, beta2_, eps_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

}  // namespace fv2ic
