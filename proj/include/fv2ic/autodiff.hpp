#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fv2ic/errors.hpp"
#include "fv2ic/tensor.hpp"

// Reverse-mode autodiff on Tensor. Every operation returns a new graph node;
// backward(root) accumulates gradients into each reachable node's grad
// field. Graphs are rebuilt per training step and freed when the last Var
// goes out of scope.
//
// Layout conventions:
//   feature maps  (N, C, H, W)   row-major
//   vectors       (N, D)
//   conv weight   (Cout, Cin, kh, kw)
//   convT weight  (Cin, Cout, kh, kw)
//   linear weight (Out, In), y = x W^T + b

namespace fv2ic {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated by backward()
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, adds to parents
  bool requires_grad = false;
};

inline Var leaf(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  return n;
}

inline Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = false;
  return n;
}

namespace detail {

inline Var make_op(Tensor value, std::vector<Var> parents,
                   std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const Var& p : n->parents) {
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

}  // namespace detail

// Runs reverse-mode accumulation from a scalar root.
inline void backward(const Var& root) {
  if (root->value.size() != 1) throw ContractViolation("backward: root must be scalar");
  // Topological order by iterative DFS.
  std::vector<Node*> topo;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : topo) n->grad = Tensor(n->value.shape());
  root->grad[0] = 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value)) {
    throw ContractViolation(std::string(op) + ": shape mismatch " + a->value.shape_str() +
                            " vs " + b->value.shape_str());
  }
}

inline Var operator+(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& n) {
    for (int k = 0; k < 2; ++k) {
      Node& p = *n.parents[static_cast<std::size_t>(k)];
      if (!p.requires_grad) continue;
      for (int i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    }
  });
}

inline Var operator-(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad)
      for (int i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
    if (pb.requires_grad)
      for (int i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
  });
}

inline Var operator*(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad)
      for (int i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * pb.value[i];
    if (pb.requires_grad)
      for (int i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i] * pa.value[i];
  });
}

inline Var vdiv(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] /= b->value[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad)
      for (int i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] / pb.value[i];
    if (pb.requires_grad)
      for (int i = 0; i < n.grad.size(); ++i)
        pb.grad[i] -= n.grad[i] * pa.value[i] / (pb.value[i] * pb.value[i]);
  });
}

// a*x + b elementwise with scalar coefficients.
inline Var affine_scalar(const Var& x, double a, double b) {
  Tensor out = x->value;
  for (int i = 0; i < out.size(); ++i) out[i] = a * out[i] + b;
  return detail::make_op(std::move(out), {x}, [a](Node& n) {
    Node& p = *n.parents[0];
    for (int i = 0; i < n.grad.size(); ++i) p.grad[i] += a * n.grad[i];
  });
}

inline Var scale(const Var& x, double a) { return affine_scalar(x, a, 0.0); }

inline Var relu(const Var& x) {
  Tensor out = x->value;
  for (int i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return detail::make_op(std::move(out), {x}, [](Node& n) {
    Node& p = *n.parents[0];
    for (int i = 0; i < n.grad.size(); ++i)
      if (n.value[i] > 0.0) p.grad[i] += n.grad[i];
  });
}

inline Var sigmoid(const Var& x) {
  Tensor out = x->value;
  for (int i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  return detail::make_op(std::move(out), {x}, [](Node& n) {
    Node& p = *n.parents[0];
    for (int i = 0; i < n.grad.size(); ++i)
      p.grad[i] += n.grad[i] * n.value[i] * (1.0 - n.value[i]);
  });
}

inline Var vexp(const Var& x) {
  Tensor out = x->value;
  for (int i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  return detail::make_op(std::move(out), {x}, [](Node& n) {
    Node& p = *n.parents[0];
    for (int i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * n.value[i];
  });
}

inline Var vlog(const Var& x) {
  Tensor out = x->value;
  for (int i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
  return detail::make_op(std::move(out), {x}, [](Node& n) {
    Node& p = *n.parents[0];
    for (int i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] / p.value[i];
  });
}

inline Var vsquare(const Var& x) {
  Tensor out = x->value;
  for (int i = 0; i < out.size(); ++i) out[i] *= out[i];
  return detail::make_op(std::move(out), {x}, [](Node& n) {
    Node& p = *n.parents[0];
    for (int i = 0; i < n.grad.size(); ++i) p.grad[i] += 2.0 * n.grad[i] * p.value[i];
  });
}

// Gradient is zero on the clamped side.
inline Var clamp_min(const Var& x, double lo) {
  Tensor out = x->value;
  for (int i = 0; i < out.size(); ++i) out[i] = std::max(out[i], lo);
  return detail::make_op(std::move(out), {x}, [lo](Node& n) {
    Node& p = *n.parents[0];
    for (int i = 0; i < n.grad.size(); ++i)
      if (p.value[i] > lo) p.grad[i] += n.grad[i];
  });
}

// Cuts the tape: value flows, gradient does not.
inline Var detach(const Var& x) { return constant(x->value); }

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& x) {
  double s = 0.0;
  for (int i = 0; i < x->value.size(); ++i) s += x->value[i];
  return detail::make_op(Tensor::scalar(s), {x}, [](Node& n) {
    Node& p = *n.parents[0];
    const double g = n.grad[0];
    for (int i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
  });
}

inline Var mean_all(const Var& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x->value.size()));
}

// (N,C,H,W) -> (C): sum over batch and spatial dims.
inline Var sum_nhw(const Var& x) {
  if (x->value.rank() != 4) throw ContractViolation("sum_nhw expects NCHW");
  const int n = x->value.dim(0), c = x->value.dim(1), hw = x->value.dim(2) * x->value.dim(3);
  Tensor out({c});
  const double* v = x->value.data();
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      double s = 0.0;
      const double* row = v + (static_cast<std::ptrdiff_t>(in) * c + ic) * hw;
      for (int i = 0; i < hw; ++i) s += row[i];
      out[ic] += s;
    }
  return detail::make_op(std::move(out), {x}, [n, c, hw](Node& nd) {
    Node& p = *nd.parents[0];
    double* g = p.grad.data();
    for (int in = 0; in < n; ++in)
      for (int ic = 0; ic < c; ++ic) {
        const double gc = nd.grad[ic];
        double* row = g + (static_cast<std::ptrdiff_t>(in) * c + ic) * hw;
        for (int i = 0; i < hw; ++i) row[i] += gc;
      }
  });
}

inline Var reshape(const Var& x, std::vector<int> shape) {
  Tensor out = x->value.reshaped(std::move(shape));
  return detail::make_op(std::move(out), {x}, [](Node& n) {
    Node& p = *n.parents[0];
    for (int i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
  });
}

inline Var concat_channels(const Var& a, const Var& b) {
  const Tensor& ta = a->value;
  const Tensor& tb = b->value;
  if (ta.rank() != 4 || tb.rank() != 4 || ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(2) ||
      ta.dim(3) != tb.dim(3)) {
    throw ContractViolation("concat_channels: incompatible shapes");
  }
  const int n = ta.dim(0), ca = ta.dim(1), cb = tb.dim(1), hw = ta.dim(2) * ta.dim(3);
  Tensor out({n, ca + cb, ta.dim(2), ta.dim(3)});
  for (int in = 0; in < n; ++in) {
    std::memcpy(out.data() + static_cast<std::ptrdiff_t>(in) * (ca + cb) * hw,
                ta.data() + static_cast<std::ptrdiff_t>(in) * ca * hw,
                sizeof(double) * static_cast<std::size_t>(ca * hw));
    std::memcpy(out.data() + (static_cast<std::ptrdiff_t>(in) * (ca + cb) + ca) * hw,
                tb.data() + static_cast<std::ptrdiff_t>(in) * cb * hw,
                sizeof(double) * static_cast<std::size_t>(cb * hw));
  }
  return detail::make_op(std::move(out), {a, b}, [n, ca, cb, hw](Node& nd) {
    Node& pa = *nd.parents[0];
    Node& pb = *nd.parents[1];
    for (int in = 0; in < n; ++in) {
      const double* g = nd.grad.data() + static_cast<std::ptrdiff_t>(in) * (ca + cb) * hw;
      if (pa.requires_grad) {
        double* ga = pa.grad.data() + static_cast<std::ptrdiff_t>(in) * ca * hw;
        for (int i = 0; i < ca * hw; ++i) ga[i] += g[i];
      }
      if (pb.requires_grad) {
        double* gb = pb.grad.data() + static_cast<std::ptrdiff_t>(in) * cb * hw;
        for (int i = 0; i < cb * hw; ++i) gb[i] += g[ca * hw + i];
      }
    }
  });
}

// (N,K) -> (N,K,H,W), each scalar repeated over the spatial grid.
inline Var broadcast_maps(const Var& v, int h, int w) {
  if (v->value.rank() != 2) throw ContractViolation("broadcast_maps expects (N,K)");
  const int n = v->value.dim(0), k = v->value.dim(1), hw = h * w;
  Tensor out({n, k, h, w});
  for (int i = 0; i < n * k; ++i) {
    double* row = out.data() + static_cast<std::ptrdiff_t>(i) * hw;
    std::fill(row, row + hw, v->value[i]);
  }
  return detail::make_op(std::move(out), {v}, [n, k, hw](Node& nd) {
    Node& p = *nd.parents[0];
    for (int i = 0; i < n * k; ++i) {
      const double* row = nd.grad.data() + static_cast<std::ptrdiff_t>(i) * hw;
      double s = 0.0;
      for (int j = 0; j < hw; ++j) s += row[j];
      p.grad[i] += s;
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// y = x W^T + b, x:(N,F) w:(O,F) b:(O) -> (N,O)
inline Var linear(const Var& x, const Var& w, const Var& b) {
  const int n = x->value.dim(0), f = x->value.dim(1), o = w->value.dim(0);
  if (w->value.dim(1) != f || b->value.size() != o) {
    throw ContractViolation("linear: shape mismatch");
  }
  Tensor out({n, o});
  {
    detail::CMapRM X(x->value.data(), n, f);
    detail::CMapRM W(w->value.data(), o, f);
    detail::MapRM Y(out.data(), n, o);
    Y.noalias() = X * W.transpose();
    for (int in = 0; in < n; ++in)
      for (int io = 0; io < o; ++io) out[in * o + io] += b->value[io];
  }
  return detail::make_op(std::move(out), {x, w, b}, [n, f, o](Node& nd) {
    Node& px = *nd.parents[0];
    Node& pw = *nd.parents[1];
    Node& pb = *nd.parents[2];
    detail::CMapRM G(nd.grad.data(), n, o);
    if (px.requires_grad) {
      detail::CMapRM W(pw.value.data(), o, f);
      detail::MapRM GX(px.grad.data(), n, f);
      GX.noalias() += G * W;
    }
    if (pw.requires_grad) {
      detail::CMapRM X(px.value.data(), n, f);
      detail::MapRM GW(pw.grad.data(), o, f);
      GW.noalias() += G.transpose() * X;
    }
    if (pb.requires_grad) {
      for (int in = 0; in < n; ++in)
        for (int io = 0; io < o; ++io) pb.grad[io] += nd.grad[in * o + io];
    }
  });
}

namespace detail {

struct ConvGeom {
  int n, cin, h, w;     // input
  int kh, kw, stride, pad;
  int oh, ow;           // output spatial
};

// In-bounds output-column range for one kernel column offset: j such that
// 0 <= j*stride + off < w.
inline std::pair<int, int> col_range(int off, int stride, int w, int ow) {
  int j0 = off < 0 ? (-off + stride - 1) / stride : 0;
  int j1 = off < w ? (w - off + stride - 1) / stride : 0;
  j0 = std::min(j0, ow);
  j1 = std::min(j1, ow);
  return {j0, std::max(j0, j1)};
}

// col has rows cin*kh*kw, cols n*oh*ow; conv sampling geometry. Inner loops
// are branch-free: the valid range per row is precomputed.
inline void im2col(const double* x, const ConvGeom& g, double* col) {
  const int ohw = g.oh * g.ow;
  const int cols = g.n * ohw;
  for (int c = 0; c < g.cin; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        double* crow = col + (static_cast<std::ptrdiff_t>((c * g.kh + ki) * g.kw + kj)) * cols;
        const auto [j0, j1] = col_range(kj - g.pad, g.stride, g.w, g.ow);
        for (int in = 0; in < g.n; ++in) {
          const double* xi = x + (static_cast<std::ptrdiff_t>(in) * g.cin + c) * g.h * g.w;
          double* dst = crow + static_cast<std::ptrdiff_t>(in) * ohw;
          for (int i = 0; i < g.oh; ++i) {
            const int ih = i * g.stride - g.pad + ki;
            double* drow = dst + static_cast<std::ptrdiff_t>(i) * g.ow;
            if (ih < 0 || ih >= g.h) {
              std::fill(drow, drow + g.ow, 0.0);
              continue;
            }
            const double* xrow = xi + static_cast<std::ptrdiff_t>(ih) * g.w + (kj - g.pad);
            std::fill(drow, drow + j0, 0.0);
            if (g.stride == 1) {
              std::memcpy(drow + j0, xrow + j0, sizeof(double) * static_cast<std::size_t>(j1 - j0));
            } else {
              for (int j = j0; j < j1; ++j) drow[j] = xrow[static_cast<std::ptrdiff_t>(j) * g.stride];
            }
            std::fill(drow + j1, drow + g.ow, 0.0);
          }
        }
      }
    }
  }
}

// Scatter-add of a col matrix back onto the input grid (adjoint of im2col).
inline void col2im(const double* col, const ConvGeom& g, double* x) {
  const int ohw = g.oh * g.ow;
  const int cols = g.n * ohw;
  for (int c = 0; c < g.cin; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const double* crow = col + (static_cast<std::ptrdiff_t>((c * g.kh + ki) * g.kw + kj)) * cols;
        const auto [j0, j1] = col_range(kj - g.pad, g.stride, g.w, g.ow);
        for (int in = 0; in < g.n; ++in) {
          double* xi = x + (static_cast<std::ptrdiff_t>(in) * g.cin + c) * g.h * g.w;
          const double* src = crow + static_cast<std::ptrdiff_t>(in) * ohw;
          for (int i = 0; i < g.oh; ++i) {
            const int ih = i * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.h) continue;
            double* xrow = xi + static_cast<std::ptrdiff_t>(ih) * g.w + (kj - g.pad);
            const double* srow = src + static_cast<std::ptrdiff_t>(i) * g.ow;
            if (g.stride == 1) {
              for (int j = j0; j < j1; ++j) xrow[j] += srow[j];
            } else {
              for (int j = j0; j < j1; ++j) xrow[static_cast<std::ptrdiff_t>(j) * g.stride] += srow[j];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// x:(N,Cin,H,W) w:(Cout,Cin,kh,kw) b:(Cout); stride/pad symmetric.
// Work proceeds in sample chunks sized to keep the unrolled patch matrix in
// cache; the backward pass rebuilds those chunks instead of caching them.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& tx = x->value;
  const Tensor& tw = w->value;
  if (tx.rank() != 4 || tw.rank() != 4 || tw.dim(1) != tx.dim(1)) {
    throw ContractViolation("conv2d: shape mismatch");
  }
  detail::ConvGeom g{tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3),
                     tw.dim(2), tw.dim(3), stride,    pad,
                     0,         0};
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  if (g.oh <= 0 || g.ow <= 0) throw ContractViolation("conv2d: empty output");
  const int cout = tw.dim(0);
  const int krows = g.cin * g.kh * g.kw;
  const int ohw = g.oh * g.ow;
  const int ihw = g.h * g.w;
  const int chunk = std::max(1, 2048 / ohw);  // samples per chunk

  Tensor out = Tensor::uninit({g.n, cout, g.oh, g.ow});
  {
    Tensor col = Tensor::uninit({krows, std::min(chunk, g.n) * ohw});
    Tensor prod = Tensor::uninit({cout, std::min(chunk, g.n) * ohw});
    detail::CMapRM W(tw.data(), cout, krows);
    for (int n0 = 0; n0 < g.n; n0 += chunk) {
      const int nn = std::min(chunk, g.n - n0);
      detail::ConvGeom gc = g;
      gc.n = nn;
      detail::im2col(tx.data() + static_cast<std::ptrdiff_t>(n0) * g.cin * ihw, gc, col.data());
      detail::CMapRM C(col.data(), krows, nn * ohw);
      detail::MapRM P(prod.data(), cout, nn * ohw);
      P.noalias() = W * C;
      for (int in = 0; in < nn; ++in)
        for (int co = 0; co < cout; ++co) {
          const double bias = b->value[co];
          const double* src = prod.data() + static_cast<std::ptrdiff_t>(co) * nn * ohw + in * ohw;
          double* dst = out.data() + (static_cast<std::ptrdiff_t>(n0 + in) * cout + co) * ohw;
          for (int i = 0; i < ohw; ++i) dst[i] = src[i] + bias;
        }
    }
  }

  return detail::make_op(std::move(out), {x, w, b}, [g, cout, krows, ohw, ihw, chunk](Node& nd) {
    Node& px = *nd.parents[0];
    Node& pw = *nd.parents[1];
    Node& pb = *nd.parents[2];
    const int cc = std::min(chunk, g.n);
    Tensor gmat = Tensor::uninit({cout, cc * ohw});
    Tensor col = Tensor::uninit({krows, cc * ohw});
    Tensor gcol = Tensor::uninit({krows, cc * ohw});
    detail::CMapRM W(pw.value.data(), cout, krows);
    for (int n0 = 0; n0 < g.n; n0 += chunk) {
      const int nn = std::min(chunk, g.n - n0);
      detail::ConvGeom gc = g;
      gc.n = nn;
      // Chunk gradient regrouped to (Cout, nn*ohw).
      for (int in = 0; in < nn; ++in)
        for (int co = 0; co < cout; ++co) {
          const double* src =
              nd.grad.data() + (static_cast<std::ptrdiff_t>(n0 + in) * cout + co) * ohw;
          double* dst = gmat.data() + static_cast<std::ptrdiff_t>(co) * nn * ohw + in * ohw;
          std::memcpy(dst, src, sizeof(double) * static_cast<std::size_t>(ohw));
        }
      detail::CMapRM G(gmat.data(), cout, nn * ohw);
      if (pb.requires_grad) {
        for (int co = 0; co < cout; ++co) pb.grad[co] += G.row(co).sum();
      }
      if (pw.requires_grad) {
        detail::im2col(px.value.data() + static_cast<std::ptrdiff_t>(n0) * g.cin * ihw, gc,
                       col.data());
        detail::CMapRM C(col.data(), krows, nn * ohw);
        detail::MapRM GW(pw.grad.data(), cout, krows);
        GW.noalias() += G * C.transpose();
      }
      if (px.requires_grad) {
        detail::MapRM GC(gcol.data(), krows, nn * ohw);
        GC.noalias() = W.transpose() * G;
        detail::col2im(gcol.data(), gc,
                       px.grad.data() + static_cast<std::ptrdiff_t>(n0) * g.cin * ihw);
      }
    }
  });
}

// x:(N,Cin,H,W) w:(Cin,Cout,kh,kw) b:(Cout); out spatial (H-1)*s - 2p + k.
// Forward is the adjoint of conv2d: per chunk, col = W^T x, then col2im.
inline Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& tx = x->value;
  const Tensor& tw = w->value;
  if (tx.rank() != 4 || tw.rank() != 4 || tw.dim(0) != tx.dim(1)) {
    throw ContractViolation("conv_transpose2d: shape mismatch");
  }
  const int n = tx.dim(0), cin = tx.dim(1), ih = tx.dim(2), iw = tx.dim(3);
  const int cout = tw.dim(1), kh = tw.dim(2), kw = tw.dim(3);
  const int oh = (ih - 1) * stride - 2 * pad + kh;
  const int ow = (iw - 1) * stride - 2 * pad + kw;
  if (oh <= 0 || ow <= 0) throw ContractViolation("conv_transpose2d: empty output");
  // Conv geometry whose "output" grid is this op's input grid.
  detail::ConvGeom g{n, cout, oh, ow, kh, kw, stride, pad, ih, iw};
  const int krows = cout * kh * kw;
  const int ihw = ih * iw;
  const int ohw = oh * ow;
  const int chunk = std::max(1, 2048 / ihw);

  Tensor out({n, cout, oh, ow});  // zero-filled: col2im accumulates
  {
    Tensor xmat = Tensor::uninit({cin, std::min(chunk, n) * ihw});
    Tensor colm = Tensor::uninit({krows, std::min(chunk, n) * ihw});
    detail::CMapRM W(tw.data(), cin, krows);
    for (int n0 = 0; n0 < n; n0 += chunk) {
      const int nn = std::min(chunk, n - n0);
      for (int in = 0; in < nn; ++in)
        for (int ci = 0; ci < cin; ++ci) {
          std::memcpy(xmat.data() + static_cast<std::ptrdiff_t>(ci) * nn * ihw + in * ihw,
                      tx.data() + (static_cast<std::ptrdiff_t>(n0 + in) * cin + ci) * ihw,
                      sizeof(double) * static_cast<std::size_t>(ihw));
        }
      detail::CMapRM X(xmat.data(), cin, nn * ihw);
      detail::MapRM CM(colm.data(), krows, nn * ihw);
      CM.noalias() = W.transpose() * X;
      detail::ConvGeom gc = g;
      gc.n = nn;
      detail::col2im(colm.data(), gc, out.data() + static_cast<std::ptrdiff_t>(n0) * cout * ohw);
    }
    for (int in = 0; in < n; ++in)
      for (int co = 0; co < cout; ++co) {
        double* dst = out.data() + (static_cast<std::ptrdiff_t>(in) * cout + co) * ohw;
        const double bias = b->value[co];
        for (int i = 0; i < ohw; ++i) dst[i] += bias;
      }
  }

  return detail::make_op(std::move(out), {x, w, b},
                         [g, n, cin, cout, krows, ihw, ohw, chunk](Node& nd) {
    Node& px = *nd.parents[0];
    Node& pw = *nd.parents[1];
    Node& pb = *nd.parents[2];
    if (pb.requires_grad) {
      for (int in = 0; in < n; ++in)
        for (int co = 0; co < cout; ++co) {
          const double* src = nd.grad.data() + (static_cast<std::ptrdiff_t>(in) * cout + co) * ohw;
          double s = 0.0;
          for (int i = 0; i < ohw; ++i) s += src[i];
          pb.grad[co] += s;
        }
    }
    const bool need_x = px.requires_grad;
    const bool need_w = pw.requires_grad;
    if (!need_x && !need_w) return;
    const int cc = std::min(chunk, n);
    Tensor gcol = Tensor::uninit({krows, cc * ihw});
    Tensor xmat = Tensor::uninit({cin, cc * ihw});
    Tensor gx = Tensor::uninit({cin, cc * ihw});
    detail::CMapRM W(pw.value.data(), cin, krows);
    for (int n0 = 0; n0 < n; n0 += chunk) {
      const int nn = std::min(chunk, n - n0);
      detail::ConvGeom gc = g;
      gc.n = nn;
      detail::im2col(nd.grad.data() + static_cast<std::ptrdiff_t>(n0) * cout * ohw, gc,
                     gcol.data());
      detail::CMapRM GC(gcol.data(), krows, nn * ihw);
      if (need_w) {
        for (int in = 0; in < nn; ++in)
          for (int ci = 0; ci < cin; ++ci) {
            std::memcpy(xmat.data() + static_cast<std::ptrdiff_t>(ci) * nn * ihw + in * ihw,
                        px.value.data() + (static_cast<std::ptrdiff_t>(n0 + in) * cin + ci) * ihw,
                        sizeof(double) * static_cast<std::size_t>(ihw));
          }
        detail::CMapRM X(xmat.data(), cin, nn * ihw);
        detail::MapRM GW(pw.grad.data(), cin, krows);
        GW.noalias() += X * GC.transpose();
      }
      if (need_x) {
        detail::MapRM GX(gx.data(), cin, nn * ihw);
        GX.noalias() = W * GC;
        for (int in = 0; in < nn; ++in)
          for (int ci = 0; ci < cin; ++ci) {
            const double* src = gx.data() + static_cast<std::ptrdiff_t>(ci) * nn * ihw + in * ihw;
            double* dst =
                px.grad.data() + (static_cast<std::ptrdiff_t>(n0 + in) * cin + ci) * ihw;
            for (int i = 0; i < ihw; ++i) dst[i] += src[i];
          }
      }
    }
  });
}

// 2x2 max pooling, stride 2. Spatial dims must be even.
inline Var maxpool2(const Var& x) {
  const Tensor& tx = x->value;
  if (tx.rank() != 4 || tx.dim(2) % 2 || tx.dim(3) % 2) {
    throw ContractViolation("maxpool2 expects NCHW with even spatial dims");
  }
  const int n = tx.dim(0), c = tx.dim(1), h = tx.dim(2), w = tx.dim(3);
  const int oh = h / 2, ow = w / 2;
  Tensor out({n, c, oh, ow});
  auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(out.size()));
  for (int nc = 0; nc < n * c; ++nc) {
    const double* src = tx.data() + static_cast<std::ptrdiff_t>(nc) * h * w;
    double* dst = out.data() + static_cast<std::ptrdiff_t>(nc) * oh * ow;
    int* am = arg->data() + static_cast<std::ptrdiff_t>(nc) * oh * ow;
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const int base = (2 * i) * w + 2 * j;
        int best = base;
        double bv = src[base];
        const int cand[3] = {base + 1, base + w, base + w + 1};
        for (int k = 0; k < 3; ++k)
          if (src[cand[k]] > bv) {
            bv = src[cand[k]];
            best = cand[k];
          }
        dst[i * ow + j] = bv;
        am[i * ow + j] = best;
      }
  }
  return detail::make_op(std::move(out), {x}, [n, c, h, w, oh, ow, arg](Node& nd) {
    Node& p = *nd.parents[0];
    for (int nc = 0; nc < n * c; ++nc) {
      double* g = p.grad.data() + static_cast<std::ptrdiff_t>(nc) * h * w;
      const double* go = nd.grad.data() + static_cast<std::ptrdiff_t>(nc) * oh * ow;
      const int* am = arg->data() + static_cast<std::ptrdiff_t>(nc) * oh * ow;
      for (int i = 0; i < oh * ow; ++i) g[am[i]] += go[i];
    }
  });
}

// Per-pixel softmax across the channel dim of (N,C,H,W).
inline Var softmax_channels(const Var& x) {
  const Tensor& tx = x->value;
  if (tx.rank() != 4) throw ContractViolation("softmax_channels expects NCHW");
  const int n = tx.dim(0), c = tx.dim(1), hw = tx.dim(2) * tx.dim(3);
  Tensor out = tx;
  for (int in = 0; in < n; ++in) {
    double* base = out.data() + static_cast<std::ptrdiff_t>(in) * c * hw;
    for (int px = 0; px < hw; ++px) {
      double m = base[px];
      for (int ic = 1; ic < c; ++ic) m = std::max(m, base[ic * hw + px]);
      double s = 0.0;
      for (int ic = 0; ic < c; ++ic) {
        double e = std::exp(base[ic * hw + px] - m);
        base[ic * hw + px] = e;
        s += e;
      }
      for (int ic = 0; ic < c; ++ic) base[ic * hw + px] /= s;
    }
  }
  return detail::make_op(std::move(out), {x}, [n, c, hw](Node& nd) {
    Node& p = *nd.parents[0];
    for (int in = 0; in < n; ++in) {
      const double* pv = nd.value.data() + static_cast<std::ptrdiff_t>(in) * c * hw;
      const double* g = nd.grad.data() + static_cast<std::ptrdiff_t>(in) * c * hw;
      double* gx = p.grad.data() + static_cast<std::ptrdiff_t>(in) * c * hw;
      for (int px = 0; px < hw; ++px) {
        double dot = 0.0;
        for (int ic = 0; ic < c; ++ic) dot += g[ic * hw + px] * pv[ic * hw + px];
        for (int ic = 0; ic < c; ++ic)
          gx[ic * hw + px] += pv[ic * hw + px] * (g[ic * hw + px] - dot);
      }
    }
  });
}

// Mean squared difference over all elements.
inline Var mse_mean(const Var& a, const Var& b) {
  return mean_all(vsquare(a - b));
}

// KL between a constant per-pixel target distribution and the softmax of
// `logits`, averaged over pixels. Fused so the logit gradient is exactly
// softmax(logits) - target: when the two branches coincide bitwise the
// gradient (and the value) are exact zeros, which federation no-op
// invariants rely on. `reverse` swaps the direction to KL(softmax || target).
inline Var kl_vs_softmax(const Tensor& target, const Var& logits, double clamp, bool reverse) {
  const Tensor& tz = logits->value;
  if (!target.same_shape(tz)) throw ContractViolation("kl_vs_softmax: shape mismatch");
  const int n = tz.dim(0), c = tz.dim(1), hw = tz.dim(2) * tz.dim(3);
  const double npix = static_cast<double>(n) * hw;
  auto probs = std::make_shared<Tensor>(tz);
  {
    double* base = probs->data();
    for (int in = 0; in < n; ++in) {
      double* bb = base + static_cast<std::ptrdiff_t>(in) * c * hw;
      for (int px = 0; px < hw; ++px) {
        double m = bb[px];
        for (int ic = 1; ic < c; ++ic) m = std::max(m, bb[ic * hw + px]);
        double s = 0.0;
        for (int ic = 0; ic < c; ++ic) {
          double e = std::exp(bb[ic * hw + px] - m);
          bb[ic * hw + px] = e;
          s += e;
        }
        for (int ic = 0; ic < c; ++ic) bb[ic * hw + px] /= s;
      }
    }
  }
  double total = 0.0;
  for (int i = 0; i < target.size(); ++i) {
    const double t = target[i];
    const double p = (*probs)[i];
    const double lt = std::log(std::max(t, clamp));
    const double lp = std::log(std::max(p, clamp));
    total += reverse ? p * (lp - lt) : t * (lt - lp);
  }
  total /= npix;

  auto target_copy = std::make_shared<Tensor>(target);
  return detail::make_op(Tensor::scalar(total), {logits},
                         [probs, target_copy, n, c, hw, npix, clamp, reverse](Node& nd) {
    Node& p = *nd.parents[0];
    const double g = nd.grad[0] / npix;
    const double* pv = probs->data();
    const double* tv = target_copy->data();
    double* gx = p.grad.data();
    if (!reverse) {
      for (int i = 0; i < p.grad.size(); ++i) gx[i] += g * (pv[i] - tv[i]);
    } else {
      for (int in = 0; in < n; ++in)
        for (int px = 0; px < hw; ++px) {
          double klpix = 0.0;
          for (int ic = 0; ic < c; ++ic) {
            const std::ptrdiff_t idx = (static_cast<std::ptrdiff_t>(in) * c + ic) * hw + px;
            klpix += pv[idx] * (std::log(std::max(pv[idx], clamp)) -
                                std::log(std::max(tv[idx], clamp)));
          }
          for (int ic = 0; ic < c; ++ic) {
            const std::ptrdiff_t idx = (static_cast<std::ptrdiff_t>(in) * c + ic) * hw + px;
            gx[idx] += g * pv[idx] *
                       (std::log(std::max(pv[idx], clamp)) - std::log(std::max(tv[idx], clamp)) -
                        klpix);
          }
        }
    }
  });
}

inline void ensure_finite(const Tensor& t, const std::string& where) {
  if (!t.all_finite()) throw NumericFault(where);
}

}  // namespace fv2ic
