#pragma once

#include <cstdint>
#include <vector>

#include "fv2ic/errors.hpp"
#include "fv2ic/tensor.hpp"

namespace fv2ic {

// One-vs-rest pixel counts per class, from hard (argmax) masks.
struct ConfusionCounts {
  struct PerClass {
    long tp = 0, fp = 0, fn = 0, tn = 0;
  };
  std::vector<PerClass> classes;

  int num_classes() const { return static_cast<int>(classes.size()); }
};

inline ConfusionCounts confusion(const std::vector<std::uint8_t>& pred,
                                 const std::vector<std::uint8_t>& truth, int num_classes) {
  if (pred.size() != truth.size()) throw ContractViolation("confusion: shape mismatch");
  ConfusionCounts cc;
  cc.classes.resize(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i];
    const int t = truth[i];
    if (p >= num_classes || t >= num_classes) {
      throw ContractViolation("confusion: class id out of range");
    }
    for (int c = 0; c < num_classes; ++c) {
      auto& k = cc.classes[static_cast<std::size_t>(c)];
      const bool pp = p == c, tt = t == c;
      if (pp && tt) ++k.tp;
      else if (pp && !tt) ++k.fp;
      else if (!pp && tt) ++k.fn;
      else ++k.tn;
    }
  }
  return cc;
}

// Convention for a class absent from both prediction and truth
// (tp+fp+fn == 0): either score it 1 or skip it in macro averages.
enum class EmptyClassPolicy { score_one, skip };

inline double dice_coef(const ConfusionCounts::PerClass& k) {
  if (k.tp + k.fp + k.fn == 0) return 1.0;
  return 2.0 * k.tp / static_cast<double>(2 * k.tp + k.fp + k.fn);
}

inline double jaccard(const ConfusionCounts::PerClass& k) {
  if (k.tp + k.fp + k.fn == 0) return 1.0;
  return k.tp / static_cast<double>(k.tp + k.fp + k.fn);
}

inline double sensitivity(const ConfusionCounts::PerClass& k) {
  if (k.tp + k.fn == 0) return 1.0;
  return k.tp / static_cast<double>(k.tp + k.fn);
}

inline double accuracy(const ConfusionCounts::PerClass& k) {
  return (k.tp + k.tn) / static_cast<double>(k.tp + k.fp + k.fn + k.tn);
}

// Unweighted mean over classes, background (class 0) excluded by default.
inline double macro_average(const std::vector<double>& per_class, bool foreground_only = true) {
  if (per_class.size() < 2) throw ContractViolation("macro_average: need >= 2 classes");
  double s = 0.0;
  int n = 0;
  for (std::size_t c = foreground_only ? 1 : 0; c < per_class.size(); ++c) {
    s += per_class[c];
    ++n;
  }
  return s / n;
}

struct SegMetrics {
  double dice = 0.0, jaccard = 0.0, sensitivity = 0.0, accuracy = 0.0;

  SegMetrics& operator+=(const SegMetrics& o) {
    dice += o.dice;
    jaccard += o.jaccard;
    sensitivity += o.sensitivity;
    accuracy += o.accuracy;
    return *this;
  }
  SegMetrics scaled(double f) const { return {dice * f, jaccard * f, sensitivity * f, accuracy * f}; }
};

// Macro metrics of one prediction/truth pair over foreground classes.
inline SegMetrics macro_metrics(const ConfusionCounts& cc, bool foreground_only = true,
                                EmptyClassPolicy empty = EmptyClassPolicy::score_one) {
  SegMetrics m;
  int n = 0;
  for (int c = foreground_only ? 1 : 0; c < cc.num_classes(); ++c) {
    const auto& k = cc.classes[static_cast<std::size_t>(c)];
    if (empty == EmptyClassPolicy::skip && k.tp + k.fp + k.fn == 0) continue;
    m.dice += dice_coef(k);
    m.jaccard += jaccard(k);
    m.sensitivity += sensitivity(k);
    m.accuracy += accuracy(k);
    ++n;
  }
  if (n == 0) return {1.0, 1.0, 1.0, 1.0};
  return m.scaled(1.0 / n);
}

// Hard mask from (C,H,W) or (1,C,H,W) scores; ties resolve to the lower id.
inline std::vector<std::uint8_t> argmax_mask(const Tensor& scores) {
  const int rank = scores.rank();
  const int c = rank == 4 ? scores.dim(1) : scores.dim(0);
  const int hw = rank == 4 ? scores.dim(2) * scores.dim(3) : scores.dim(1) * scores.dim(2);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(hw));
  for (int px = 0; px < hw; ++px) {
    int best = 0;
    double bv = scores[px];
    for (int ic = 1; ic < c; ++ic) {
      const double v = scores[ic * hw + px];
      if (v > bv) {
        bv = v;
        best = ic;
      }
    }
    mask[static_cast<std::size_t>(px)] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

}  // namespace fv2ic
