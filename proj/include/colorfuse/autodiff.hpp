#pragma once

#include <Eigen/Core>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "colorfuse/tensor.hpp"

namespace colorfuse {

// Reverse-mode automatic differentiation over Tensor values. Ops build an
// eager graph of shared Node pointers; backward() replays it in reverse
// creation order. Ops whose inputs all have requires_grad=false fold to
// constants (no closure, no graph retention).
struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void()> backprop;
  long seq = 0;

  void ensure_grad() {
    if (grad.empty()) grad = Tensor::zeros_like(value);
  }
};

using Var = std::shared_ptr<Node>;

namespace detail {
inline long next_seq() {
  static std::atomic<long> counter{0};
  return ++counter;
}
}  // namespace detail

inline Var make_leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->seq = detail::next_seq();
  return n;
}

inline Var leaf(Tensor value) { return make_leaf(std::move(value), true); }
inline Var constant(Tensor value) { return make_leaf(std::move(value), false); }

inline Var make_op(Tensor value, std::vector<Var> inputs,
                   std::function<void(Node&)> backward_fn) {
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in->requires_grad;
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = needs_grad;
  n->seq = detail::next_seq();
  if (needs_grad) {
    n->inputs = std::move(inputs);
    Node* self = n.get();
    n->backprop = [self, fn = std::move(backward_fn)]() { fn(*self); };
  }
  return n;
}

// Runs reverse-mode accumulation from a scalar root into every reachable
// leaf with requires_grad. Deterministic: closures fire in strictly
// decreasing creation order.
inline void backward(const Var& root) {
  if (root->value.size() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (Node* n : order)
    if (n->backprop) n->backprop();
}

inline void zero_grad(const std::vector<Var>& params) {
  for (const auto& p : params)
    if (!p->grad.empty()) p->grad.fill(0.0);
}

namespace detail {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// Fills a column-block for output rows [r0,r1): col is K x M with
// K = Cin*k*k and M = (r1-r0)*Wo. Out-of-image taps are zero.
inline void im2col_rows(const Tensor& x, int k, int stride, int pad, int wo,
                        int r0, int r1, RowMat& col) {
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int m = (r1 - r0) * wo;
  col.setZero(cin * k * k, m);
  for (int ci = 0; ci < cin; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const int row = (ci * k + ky) * k + kx;
        double* dst = col.data() + static_cast<std::size_t>(row) * m;
        for (int r = r0; r < r1; ++r) {
          const int sy = r * stride - pad + ky;
          double* drow = dst + static_cast<std::size_t>(r - r0) * wo;
          if (sy < 0 || sy >= h) continue;
          const double* src = x.data() + (static_cast<std::size_t>(ci) * h + sy) * w;
          for (int c = 0; c < wo; ++c) {
            const int sx = c * stride - pad + kx;
            if (sx >= 0 && sx < w) drow[c] = src[sx];
          }
        }
      }
    }
  }
}

inline void col2im_rows_add(const RowMat& col, int k, int stride, int pad,
                            int wo, int r0, int r1, Tensor& dx) {
  const int cin = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
  const int m = (r1 - r0) * wo;
  for (int ci = 0; ci < cin; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const int row = (ci * k + ky) * k + kx;
        const double* src = col.data() + static_cast<std::size_t>(row) * m;
        for (int r = r0; r < r1; ++r) {
          const int sy = r * stride - pad + ky;
          if (sy < 0 || sy >= h) continue;
          double* drow = dx.data() + (static_cast<std::size_t>(ci) * h + sy) * w;
          const double* srow = src + static_cast<std::size_t>(r - r0) * wo;
          for (int c = 0; c < wo; ++c) {
            const int sx = c * stride - pad + kx;
            if (sx >= 0 && sx < w) drow[sx] += srow[c];
          }
        }
      }
    }
  }
}

// Rows per GEMM chunk, bounded so the col buffer stays around 32MB.
inline int conv_chunk_rows(int kk_cin, int wo) {
  const std::size_t budget = 4u * 1024u * 1024u;  // doubles
  std::size_t rows = budget / (static_cast<std::size_t>(kk_cin) * wo + 1);
  if (rows < 1) rows = 1;
  return static_cast<int>(rows);
}

struct BilinearTap {
  int y0, y1, x0, x1;
  double w00, w01, w10, w11;
};

// Pixel-center sampling with edge clamping; sy=(oy+.5)*h/oh-.5.
inline BilinearTap bilinear_tap(int oy, int ox, int h, int w, int oh, int ow) {
  double sy = (oy + 0.5) * static_cast<double>(h) / oh - 0.5;
  double sx = (ox + 0.5) * static_cast<double>(w) / ow - 0.5;
  sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
  sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
  BilinearTap t;
  t.y0 = static_cast<int>(std::floor(sy));
  t.x0 = static_cast<int>(std::floor(sx));
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.x1 = std::min(t.x0 + 1, w - 1);
  const double fy = sy - t.y0, fx = sx - t.x0;
  t.w00 = (1 - fy) * (1 - fx);
  t.w01 = (1 - fy) * fx;
  t.w10 = fy * (1 - fx);
  t.w11 = fy * fx;
  return t;
}

}  // namespace detail

// 2D convolution, im2col + GEMM in row chunks. x:[Cin,H,W] w:[Cout,Cin,k,k]
// b:[Cout]. Output [Cout,Ho,Wo] with Ho=(H+2p-k)/s+1.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride,
                  int pad) {
  const Tensor& xv = x->value;
  const Tensor& wv = w->value;
  if (xv.rank() != 3 || wv.rank() != 4)
    throw std::invalid_argument("conv2d: expects x[C,H,W], w[Co,Ci,k,k]");
  const int cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const int cout = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != cin)
    throw std::invalid_argument("conv2d: channel mismatch");
  if (b->value.size() != static_cast<std::size_t>(cout))
    throw std::invalid_argument("conv2d: bias size mismatch");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: empty output");

  Tensor out({cout, ho, wo});
  const int kk = cin * k * k;
  const int chunk = detail::conv_chunk_rows(kk, wo);
  detail::ConstMapMat wm(wv.data(), cout, kk);
  detail::RowMat col, y;
  for (int r0 = 0; r0 < ho; r0 += chunk) {
    const int r1 = std::min(r0 + chunk, ho);
    detail::im2col_rows(xv, k, stride, pad, wo, r0, r1, col);
    y.noalias() = wm * col;
    const int m = (r1 - r0) * wo;
    for (int c = 0; c < cout; ++c) {
      double* dst = out.data() + (static_cast<std::size_t>(c) * ho + r0) * wo;
      const double* src = y.data() + static_cast<std::size_t>(c) * m;
      const double bias = b->value[static_cast<std::size_t>(c)];
      for (int i = 0; i < m; ++i) dst[i] = src[i] + bias;
    }
  }

  return make_op(std::move(out), {x, w, b}, [stride, pad, k, chunk](Node& n) {
    const Var& x = n.inputs[0];
    const Var& w = n.inputs[1];
    const Var& b = n.inputs[2];
    const Tensor& g = n.grad;
    const int cout = g.dim(0), ho = g.dim(1), wo = g.dim(2);
    const int cin = x->value.dim(0);
    const int kk = cin * k * k;
    if (b->requires_grad) {
      b->ensure_grad();
      for (int c = 0; c < cout; ++c) {
        double s = 0.0;
        const double* src = g.data() + static_cast<std::size_t>(c) * ho * wo;
        for (int i = 0; i < ho * wo; ++i) s += src[i];
        b->grad[static_cast<std::size_t>(c)] += s;
      }
    }
    detail::ConstMapMat wm(w->value.data(), cout, kk);
    if (w->requires_grad) w->ensure_grad();
    if (x->requires_grad) x->ensure_grad();
    detail::RowMat col, gy, dcol;
    for (int r0 = 0; r0 < ho; r0 += chunk) {
      const int r1 = std::min(r0 + chunk, ho);
      const int m = (r1 - r0) * wo;
      detail::im2col_rows(x->value, k, stride, pad, wo, r0, r1, col);
      gy.resize(cout, m);
      for (int c = 0; c < cout; ++c) {
        const double* src = g.data() + (static_cast<std::size_t>(c) * ho + r0) * wo;
        std::copy(src, src + m, gy.data() + static_cast<std::size_t>(c) * m);
      }
      if (w->requires_grad) {
        detail::MapMat dw(w->grad.data(), cout, kk);
        dw.noalias() += gy * col.transpose();
      }
      if (x->requires_grad) {
        dcol.noalias() = wm.transpose() * gy;
        detail::col2im_rows_add(dcol, k, stride, pad, wo, r0, r1, x->grad);
      }
    }
  });
}

inline Var leaky_relu(const Var& x, double alpha) {
  Tensor out = x->value;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i] < 0.0) out[i] *= alpha;
  return make_op(std::move(out), {x}, [alpha](Node& n) {
    const Var& x = n.inputs[0];
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      x->grad[i] += n.grad[i] * (x->value[i] > 0.0 ? 1.0 : alpha);
  });
}

inline Var relu(const Var& x) { return leaky_relu(x, 0.0); }

inline Var tanh_op(const Var& x) {
  Tensor out = x->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
  return make_op(std::move(out), {x}, [](Node& n) {
    const Var& x = n.inputs[0];
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      x->grad[i] += n.grad[i] * (1.0 - n.value[i] * n.value[i]);
  });
}

inline Var upsample_nearest2(const Var& x) {
  const Tensor& xv = x->value;
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out.at(ci, y, xx) = xv.at(ci, y / 2, xx / 2);
  return make_op(std::move(out), {x}, [](Node& n) {
    const Var& x = n.inputs[0];
    if (!x->requires_grad) return;
    x->ensure_grad();
    const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          x->grad.at(ci, y / 2, xx / 2) += n.grad.at(ci, y, xx);
  });
}

// Differentiable bilinear resize of [C,H,W] to [C,oh,ow].
inline Var resize_bilinear(const Var& x, int oh, int ow) {
  const Tensor& xv = x->value;
  if (xv.rank() != 3) throw std::invalid_argument("resize_bilinear: rank");
  if (oh < 1 || ow < 1) throw std::invalid_argument("resize_bilinear: size");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor out({c, oh, ow});
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const auto t = detail::bilinear_tap(oy, ox, h, w, oh, ow);
      for (int ci = 0; ci < c; ++ci) {
        out.at(ci, oy, ox) = t.w00 * xv.at(ci, t.y0, t.x0) +
                             t.w01 * xv.at(ci, t.y0, t.x1) +
                             t.w10 * xv.at(ci, t.y1, t.x0) +
                             t.w11 * xv.at(ci, t.y1, t.x1);
      }
    }
  }
  return make_op(std::move(out), {x}, [oh, ow](Node& n) {
    const Var& x = n.inputs[0];
    if (!x->requires_grad) return;
    x->ensure_grad();
    const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const auto t = detail::bilinear_tap(oy, ox, h, w, oh, ow);
        for (int ci = 0; ci < c; ++ci) {
          const double g = n.grad.at(ci, oy, ox);
          x->grad.at(ci, t.y0, t.x0) += g * t.w00;
          x->grad.at(ci, t.y0, t.x1) += g * t.w01;
          x->grad.at(ci, t.y1, t.x0) += g * t.w10;
          x->grad.at(ci, t.y1, t.x1) += g * t.w11;
        }
      }
    }
  });
}

// Places x:[C,bh,bw] at (y0,x0) inside a zero [C,H,W] canvas.
inline Var paste_into(const Var& x, int y0, int x0, int h, int w) {
  const Tensor& xv = x->value;
  const int c = xv.dim(0), bh = xv.dim(1), bw = xv.dim(2);
  if (y0 < 0 || x0 < 0 || y0 + bh > h || x0 + bw > w)
    throw std::invalid_argument("paste_into: box outside canvas");
  Tensor out({c, h, w});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < bh; ++y)
      for (int xx = 0; xx < bw; ++xx)
        out.at(ci, y0 + y, x0 + xx) = xv.at(ci, y, xx);
  return make_op(std::move(out), {x}, [y0, x0](Node& n) {
    const Var& x = n.inputs[0];
    if (!x->requires_grad) return;
    x->ensure_grad();
    const int c = x->value.dim(0), bh = x->value.dim(1), bw = x->value.dim(2);
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < bh; ++y)
        for (int xx = 0; xx < bw; ++xx)
          x->grad.at(ci, y, xx) += n.grad.at(ci, y0 + y, x0 + xx);
  });
}

// Per-pixel masked softmax blend. feats[i]:[C,h,w], logits[i]:[1,h,w],
// masks[i]:[h,w] with 1 marking pixels where branch i participates.
// Branch 0 must cover every pixel. At each pixel the softmax runs over
// covering branches only; excluded branches get weight zero. weights_out,
// when non-null, receives the [N+1,h,w] softmax weights.
inline Var masked_softmax_blend(const std::vector<Var>& feats,
                                const std::vector<Var>& logits,
                                const std::vector<Tensor>& masks,
                                Tensor* weights_out = nullptr) {
  const std::size_t nb = feats.size();
  if (nb == 0 || logits.size() != nb || masks.size() != nb)
    throw std::invalid_argument("masked_softmax_blend: branch count mismatch");
  const Tensor& f0 = feats[0]->value;
  const int c = f0.dim(0), h = f0.dim(1), w = f0.dim(2);
  for (std::size_t i = 0; i < nb; ++i) {
    const Tensor& fi = feats[i]->value;
    const Tensor& li = logits[i]->value;
    if (fi.dim(0) != c || fi.dim(1) != h || fi.dim(2) != w ||
        li.dim(0) != 1 || li.dim(1) != h || li.dim(2) != w ||
        masks[i].dim(0) != h || masks[i].dim(1) != w)
      throw std::invalid_argument("masked_softmax_blend: dimension mismatch");
  }

  auto weights = std::make_shared<Tensor>(
      Tensor({static_cast<int>(nb), h, w}));
  Tensor out({c, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t p = 0; p < plane; ++p) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < nb; ++i)
      if (masks[i].data()[p] > 0.5)
        m = std::max(m, logits[i]->value.data()[p]);
    double denom = 0.0;
    for (std::size_t i = 0; i < nb; ++i) {
      if (masks[i].data()[p] > 0.5) {
        const double e = std::exp(logits[i]->value.data()[p] - m);
        weights->data()[i * plane + p] = e;
        denom += e;
      }
    }
    for (std::size_t i = 0; i < nb; ++i) {
      const double s = weights->data()[i * plane + p] / denom;
      weights->data()[i * plane + p] = s;
      if (s != 0.0)
        for (int ci = 0; ci < c; ++ci)
          out.data()[ci * plane + p] += s * feats[i]->value.data()[ci * plane + p];
    }
  }
  if (weights_out) *weights_out = *weights;

  std::vector<Var> ins;
  ins.reserve(2 * nb);
  for (const auto& f : feats) ins.push_back(f);
  for (const auto& l : logits) ins.push_back(l);
  return make_op(std::move(out), std::move(ins), [nb, weights](Node& n) {
    const int c = n.value.dim(0), h = n.value.dim(1), w = n.value.dim(2);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    // tbar[p] = sum_c g[c,p]*out[c,p]; reused by every branch.
    std::vector<double> tbar(plane, 0.0);
    for (int ci = 0; ci < c; ++ci)
      for (std::size_t p = 0; p < plane; ++p)
        tbar[p] += n.grad.data()[ci * plane + p] * n.value.data()[ci * plane + p];
    for (std::size_t i = 0; i < nb; ++i) {
      const Var& fi = n.inputs[i];
      const Var& li = n.inputs[nb + i];
      const double* s = weights->data() + i * plane;
      if (fi->requires_grad) {
        fi->ensure_grad();
        for (int ci = 0; ci < c; ++ci)
          for (std::size_t p = 0; p < plane; ++p)
            fi->grad.data()[ci * plane + p] += s[p] * n.grad.data()[ci * plane + p];
      }
      if (li->requires_grad) {
        li->ensure_grad();
        for (std::size_t p = 0; p < plane; ++p) {
          if (s[p] == 0.0) continue;
          double ti = 0.0;
          for (int ci = 0; ci < c; ++ci)
            ti += n.grad.data()[ci * plane + p] * fi->value.data()[ci * plane + p];
          li->grad.data()[p] += s[p] * (ti - tbar[p]);
        }
      }
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a->value, b->value, "add");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    for (int k = 0; k < 2; ++k) {
      const Var& in = n.inputs[k];
      if (!in->requires_grad) continue;
      in->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) in->grad[i] += n.grad[i];
    }
  });
}

// Multiplies every channel of a [C,h,w] tensor by a fixed [h,w] plane.
// The plane is data, not a differentiable input.
inline Var mul_plane(const Var& x, const Tensor& plane) {
  if (x->value.rank() != 3 || plane.rank() != 2 ||
      x->value.dim(1) != plane.dim(0) || x->value.dim(2) != plane.dim(1))
    throw std::invalid_argument("mul_plane: shape mismatch");
  const int c = x->value.dim(0);
  const std::size_t hw = plane.size();
  Tensor out = x->value;
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] *= plane[i];
  auto held = std::make_shared<Tensor>(plane);
  return make_op(std::move(out), {x}, [held, c, hw](Node& n) {
    const Var& x = n.inputs[0];
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i)
        x->grad[ch * hw + i] += n.grad[ch * hw + i] * (*held)[i];
  });
}

inline Var scale_op(const Var& x, double c) {
  Tensor out = x->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  return make_op(std::move(out), {x}, [c](Node& n) {
    const Var& x = n.inputs[0];
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) x->grad[i] += c * n.grad[i];
  });
}

inline Var sum_all(const Var& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x->value.size(); ++i) s += x->value[i];
  return make_op(Tensor::scalar(s), {x}, [](Node& n) {
    const Var& x = n.inputs[0];
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (std::size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += n.grad[0];
  });
}

namespace detail {
inline double smooth_l1_point(double d, double delta) {
  const double a = std::abs(d);
  return a < delta ? 0.5 * d * d : delta * (a - 0.5 * delta);
}
}  // namespace detail

// Mean smooth-l1 between prediction and a fixed target.
inline Var smooth_l1_loss(const Var& pred, const Tensor& target, double delta) {
  if (delta <= 0.0) throw std::invalid_argument("smooth_l1_loss: delta <= 0");
  check_same_shape(pred->value, target, "smooth_l1_loss");
  const std::size_t n = target.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    acc += detail::smooth_l1_point(pred->value[i] - target[i], delta);
  auto tgt = std::make_shared<Tensor>(target);
  return make_op(Tensor::scalar(acc / static_cast<double>(n)), {pred},
                 [delta, tgt](Node& nd) {
                   const Var& pred = nd.inputs[0];
                   if (!pred->requires_grad) return;
                   pred->ensure_grad();
                   const std::size_t n = tgt->size();
                   const double scale = nd.grad[0] / static_cast<double>(n);
                   for (std::size_t i = 0; i < n; ++i) {
                     const double d = pred->value[i] - (*tgt)[i];
                     const double dl =
                         std::abs(d) < delta ? d : (d > 0 ? delta : -delta);
                     pred->grad[i] += scale * dl;
                   }
                 });
}

}  // namespace colorfuse
