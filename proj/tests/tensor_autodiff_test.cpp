#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "colorfuse/autodiff.hpp"
#include "colorfuse/tensor.hpp"

using namespace colorfuse;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

// Independent direct convolution used as the oracle for the GEMM path.
Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                    int stride, int pad) {
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  Tensor out({cout, ho, wo});
  for (int co = 0; co < cout; ++co)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double acc = b[static_cast<std::size_t>(co)];
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int sy = oy * stride - pad + ky;
              const int sx = ox * stride - pad + kx;
              if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
              acc += x.at(ci, sy, sx) * w[((static_cast<std::size_t>(co) * cin + ci) * k + ky) * k + kx];
            }
        out.at(co, oy, ox) = acc;
      }
  return out;
}

// Central-difference gradient check. make_loss must rebuild the graph from
// the given leaf tensors on every call.
void check_gradients(
    const std::function<Var(const std::vector<Var>&)>& make_loss,
    std::vector<Tensor> init, double h = 1e-5) {
  std::vector<Var> leaves;
  for (const auto& t : init) leaves.push_back(leaf(t));
  Var loss = make_loss(leaves);
  backward(loss);

  auto eval = [&](const std::vector<Tensor>& vals) {
    std::vector<Var> ls;
    for (const auto& t : vals) ls.push_back(leaf(t));
    return make_loss(ls)->value[0];
  };

  for (std::size_t pi = 0; pi < init.size(); ++pi) {
    ASSERT_FALSE(leaves[pi]->grad.empty()) << "no gradient for leaf " << pi;
    for (std::size_t j = 0; j < init[pi].size(); ++j) {
      std::vector<Tensor> plus = init, minus = init;
      plus[pi][j] += h;
      minus[pi][j] -= h;
      const double fd = (eval(plus) - eval(minus)) / (2 * h);
      const double an = leaves[pi]->grad[j];
      const double abs_diff = std::abs(fd - an);
      const double rel = abs_diff / std::max({std::abs(fd), std::abs(an), 1e-8});
      EXPECT_TRUE(rel < 1e-4 || abs_diff < 1e-7)
          << "leaf " << pi << " coord " << j << ": analytic " << an
          << " vs fd " << fd;
    }
  }
}

}  // namespace

TEST(TensorTest, ShapeAndAccess) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.rank(), 3);
  EXPECT_EQ(t.size(), 24u);
  t.at(1, 2, 3) = 7.5;
  EXPECT_DOUBLE_EQ(t[23], 7.5);
  EXPECT_EQ(t.shape_string(), "[2,3,4]");
  EXPECT_THROW(Tensor({2, 0}), std::invalid_argument);
  EXPECT_THROW(Tensor({-1}), std::invalid_argument);
}

TEST(TensorTest, Fnv1aKnownVectors) {
  EXPECT_EQ(fnv1a64(std::string("")), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64(std::string("hello")), 0xa430d84680aabd0bull);
}

TEST(AutodiffTest, Conv2dMatchesNaiveLoop) {
  Rng rng(11);
  struct Case {
    int cin, h, w, cout, k, stride, pad;
  };
  const Case cases[] = {
      {1, 5, 5, 1, 3, 1, 1}, {3, 8, 6, 4, 3, 1, 1},  {2, 7, 7, 3, 3, 2, 1},
      {4, 6, 9, 2, 1, 1, 0}, {2, 11, 5, 5, 3, 1, 0},
  };
  for (const auto& c : cases) {
    Tensor x = random_tensor({c.cin, c.h, c.w}, rng);
    Tensor w = random_tensor({c.cout, c.cin, c.k, c.k}, rng);
    Tensor b = random_tensor({c.cout}, rng);
    Var y = conv2d(constant(x), constant(w), constant(b), c.stride, c.pad);
    Tensor ref = naive_conv2d(x, w, b, c.stride, c.pad);
    ASSERT_TRUE(y->value.same_shape(ref));
    for (std::size_t i = 0; i < ref.size(); ++i)
      EXPECT_NEAR(y->value[i], ref[i], 1e-12) << "case stride " << c.stride;
  }
}

TEST(AutodiffTest, Conv2dHandComputed) {
  // 3x3 ramp, 2x2 ones kernel, no padding: each output is a block sum.
  Tensor x({1, 3, 3});
  for (int i = 0; i < 9; ++i) x[i] = i;
  Tensor w({1, 1, 2, 2}, 1.0);
  Tensor b({1}, 0.5);
  Var y = conv2d(constant(x), constant(w), constant(b), 1, 0);
  EXPECT_DOUBLE_EQ(y->value.at(0, 0, 0), 0 + 1 + 3 + 4 + 0.5);
  EXPECT_DOUBLE_EQ(y->value.at(0, 0, 1), 1 + 2 + 4 + 5 + 0.5);
  EXPECT_DOUBLE_EQ(y->value.at(0, 1, 0), 3 + 4 + 6 + 7 + 0.5);
  EXPECT_DOUBLE_EQ(y->value.at(0, 1, 1), 4 + 5 + 7 + 8 + 0.5);
}

TEST(AutodiffTest, Conv2dGradients) {
  Rng rng(23);
  Tensor x = random_tensor({2, 5, 6}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng, 0.5);
  Tensor b = random_tensor({3}, rng, 0.1);
  Tensor tgt = random_tensor({3, 3, 3}, rng);
  check_gradients(
      [&](const std::vector<Var>& v) {
        Var y = conv2d(v[0], v[1], v[2], 2, 1);
        return smooth_l1_loss(y, tgt, 1.0);
      },
      {x, w, b});
}

TEST(AutodiffTest, ActivationValuesAndGradients) {
  Tensor x({5});
  x[0] = -2.0; x[1] = -0.5; x[2] = 0.0; x[3] = 0.5; x[4] = 2.0;
  Var lr = leaky_relu(constant(x), 0.2);
  EXPECT_DOUBLE_EQ(lr->value[0], -0.4);
  EXPECT_DOUBLE_EQ(lr->value[2], 0.0);
  EXPECT_DOUBLE_EQ(lr->value[4], 2.0);
  Var r = relu(constant(x));
  EXPECT_DOUBLE_EQ(r->value[0], 0.0);
  EXPECT_DOUBLE_EQ(r->value[3], 0.5);
  Var th = tanh_op(constant(x));
  EXPECT_NEAR(th->value[4], std::tanh(2.0), 1e-15);

  Rng rng(5);
  Tensor xr = random_tensor({7}, rng);
  Tensor tgt = random_tensor({7}, rng);
  check_gradients(
      [&](const std::vector<Var>& v) {
        return smooth_l1_loss(tanh_op(leaky_relu(v[0], 0.2)), tgt, 1.0);
      },
      {xr});
}

TEST(AutodiffTest, UpsampleNearestAndGradient) {
  Tensor x({1, 2, 2});
  x[0] = 1; x[1] = 2; x[2] = 3; x[3] = 4;
  Var y = upsample_nearest2(constant(x));
  EXPECT_EQ(y->value.dim(1), 4);
  EXPECT_DOUBLE_EQ(y->value.at(0, 0, 1), 1.0);
  EXPECT_DOUBLE_EQ(y->value.at(0, 3, 3), 4.0);

  Rng rng(7);
  Tensor xr = random_tensor({2, 3, 3}, rng);
  Tensor tgt = random_tensor({2, 6, 6}, rng);
  check_gradients(
      [&](const std::vector<Var>& v) {
        return smooth_l1_loss(upsample_nearest2(v[0]), tgt, 1.0);
      },
      {xr});
}

TEST(AutodiffTest, ResizeBilinearIdentityAndConstant) {
  Rng rng(3);
  Tensor x = random_tensor({2, 4, 5}, rng);
  Var same = resize_bilinear(constant(x), 4, 5);
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_NEAR(same->value[i], x[i], 1e-12);

  Tensor c({1, 3, 3}, 2.5);
  Var up = resize_bilinear(constant(c), 7, 5);
  for (std::size_t i = 0; i < up->value.size(); ++i)
    EXPECT_NEAR(up->value[i], 2.5, 1e-12);
}

TEST(AutodiffTest, ResizeBilinearKnownValues) {
  // 2x2 plane upsampled to 4x4 with pixel-center alignment: corner output
  // pixels clamp to the corner inputs, interior interpolates at 1/4 and 3/4.
  Tensor x({1, 2, 2});
  x[0] = 0; x[1] = 1; x[2] = 2; x[3] = 3;
  Var y = resize_bilinear(constant(x), 4, 4);
  EXPECT_NEAR(y->value.at(0, 0, 0), 0.0, 1e-12);
  EXPECT_NEAR(y->value.at(0, 0, 3), 1.0, 1e-12);
  EXPECT_NEAR(y->value.at(0, 3, 0), 2.0, 1e-12);
  EXPECT_NEAR(y->value.at(0, 0, 1), 0.25, 1e-12);
  EXPECT_NEAR(y->value.at(0, 1, 1), 0.75, 1e-12);
}

TEST(AutodiffTest, ResizeBilinearGradient) {
  Rng rng(9);
  Tensor x = random_tensor({2, 4, 4}, rng);
  Tensor tgt_up = random_tensor({2, 7, 6}, rng);
  check_gradients(
      [&](const std::vector<Var>& v) {
        return smooth_l1_loss(resize_bilinear(v[0], 7, 6), tgt_up, 1.0);
      },
      {x});
  Tensor tgt_dn = random_tensor({2, 3, 2}, rng);
  check_gradients(
      [&](const std::vector<Var>& v) {
        return smooth_l1_loss(resize_bilinear(v[0], 3, 2), tgt_dn, 1.0);
      },
      {x});
}

TEST(AutodiffTest, PasteIntoPlacesAndRejects) {
  Tensor x({1, 2, 2}, 3.0);
  Var y = paste_into(constant(x), 1, 2, 4, 5);
  EXPECT_DOUBLE_EQ(y->value.at(0, 1, 2), 3.0);
  EXPECT_DOUBLE_EQ(y->value.at(0, 2, 3), 3.0);
  EXPECT_DOUBLE_EQ(y->value.at(0, 0, 0), 0.0);
  double total = 0;
  for (std::size_t i = 0; i < y->value.size(); ++i) total += y->value[i];
  EXPECT_DOUBLE_EQ(total, 12.0);
  EXPECT_THROW(paste_into(constant(x), 3, 0, 4, 5), std::invalid_argument);

  Rng rng(13);
  Tensor xr = random_tensor({2, 2, 3}, rng);
  Tensor tgt = random_tensor({2, 5, 5}, rng);
  check_gradients(
      [&](const std::vector<Var>& v) {
        return smooth_l1_loss(paste_into(v[0], 2, 1, 5, 5), tgt, 1.0);
      },
      {xr});
}

TEST(AutodiffTest, MaskedSoftmaxBlendMatchesBruteForce) {
  Rng rng(31);
  const int c = 3, h = 4, w = 4;
  for (int trial = 0; trial < 20; ++trial) {
    const int nb = 1 + rng.uniform_int(0, 3);
    std::vector<Var> feats, logits;
    std::vector<Tensor> masks;
    for (int i = 0; i < nb; ++i) {
      feats.push_back(constant(random_tensor({c, h, w}, rng)));
      logits.push_back(constant(random_tensor({1, h, w}, rng, 2.0)));
      Tensor m({h, w}, 0.0);
      if (i == 0) {
        m.fill(1.0);
      } else {
        const int y0 = rng.uniform_int(0, h - 1), x0 = rng.uniform_int(0, w - 1);
        const int y1 = rng.uniform_int(y0 + 1, h), x1 = rng.uniform_int(x0 + 1, w);
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) m.at(y, x) = 1.0;
      }
      masks.push_back(m);
    }
    Tensor weights;
    Var fused = masked_softmax_blend(feats, logits, masks, &weights);

    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        // Brute-force masked softmax without the max-shift trick.
        double denom = 0.0;
        std::vector<double> e(nb, 0.0);
        for (int i = 0; i < nb; ++i)
          if (masks[i].at(y, x) > 0.5) {
            e[i] = std::exp(logits[i]->value.at(0, y, x));
            denom += e[i];
          }
        double wsum = 0.0;
        for (int i = 0; i < nb; ++i) {
          const double s = e[i] / denom;
          EXPECT_NEAR(weights.at(i, y, x), s, 1e-10);
          EXPECT_GE(weights.at(i, y, x), 0.0);
          EXPECT_LE(weights.at(i, y, x), 1.0);
          wsum += weights.at(i, y, x);
        }
        EXPECT_NEAR(wsum, 1.0, 1e-10);
        for (int ci = 0; ci < c; ++ci) {
          double v = 0.0;
          for (int i = 0; i < nb; ++i)
            v += (e[i] / denom) * feats[i]->value.at(ci, y, x);
          EXPECT_NEAR(fused->value.at(ci, y, x), v, 1e-10);
        }
      }
  }
}

TEST(AutodiffTest, MaskedSoftmaxBlendSingleBranchIsIdentity) {
  Rng rng(37);
  Tensor f = random_tensor({2, 3, 5}, rng);
  Tensor l = random_tensor({1, 3, 5}, rng);
  Tensor m({3, 5}, 1.0);
  Var fused = masked_softmax_blend({constant(f)}, {constant(l)}, {m});
  for (std::size_t i = 0; i < f.size(); ++i)
    EXPECT_DOUBLE_EQ(fused->value[i], f[i]);
}

TEST(AutodiffTest, MaskedSoftmaxBlendGradients) {
  Rng rng(41);
  const int c = 2, h = 3, w = 3;
  Tensor f0 = random_tensor({c, h, w}, rng);
  Tensor f1 = random_tensor({c, h, w}, rng);
  Tensor l0 = random_tensor({1, h, w}, rng);
  Tensor l1 = random_tensor({1, h, w}, rng);
  Tensor m0({h, w}, 1.0);
  Tensor m1({h, w}, 0.0);
  for (int y = 1; y < 3; ++y)
    for (int x = 0; x < 2; ++x) m1.at(y, x) = 1.0;
  Tensor tgt = random_tensor({c, h, w}, rng);
  check_gradients(
      [&](const std::vector<Var>& v) {
        Var fused = masked_softmax_blend({v[0], v[1]}, {v[2], v[3]}, {m0, m1});
        return smooth_l1_loss(fused, tgt, 1.0);
      },
      {f0, f1, l0, l1});
}

TEST(AutodiffTest, SmoothL1ClosedForm) {
  Tensor x({1}, 0.5), y0({1}, 0.0);
  EXPECT_DOUBLE_EQ(smooth_l1_loss(constant(x), y0, 1.0)->value[0], 0.125);
  Tensor x2({1}, 3.0);
  EXPECT_DOUBLE_EQ(smooth_l1_loss(constant(x2), y0, 1.0)->value[0], 2.5);
  Tensor same({4}, 1.25);
  EXPECT_DOUBLE_EQ(smooth_l1_loss(constant(same), same, 1.0)->value[0], 0.0);
  EXPECT_THROW(smooth_l1_loss(constant(x), y0, 0.0), std::invalid_argument);
  EXPECT_THROW(smooth_l1_loss(constant(x), Tensor({2}), 1.0),
               std::invalid_argument);
}

TEST(AutodiffTest, AddScaleSumGradients) {
  Rng rng(43);
  Tensor a = random_tensor({3, 2}, rng);
  Tensor b = random_tensor({3, 2}, rng);
  check_gradients(
      [&](const std::vector<Var>& v) {
        return scale_op(sum_all(add(v[0], scale_op(v[1], -1.5))), 0.25);
      },
      {a, b});
}

TEST(AutodiffTest, BackwardAccumulatesSharedInput) {
  // y = x + x; dy/dx = 2 through two paths into the same leaf.
  Tensor x({3}, 1.5);
  Var v = leaf(x);
  Var y = sum_all(add(v, v));
  backward(y);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(v->grad[i], 2.0);
}

TEST(AutodiffTest, BackwardIsDeterministic) {
  Rng rng(47);
  Tensor x = random_tensor({2, 6, 6}, rng);
  Tensor w = random_tensor({2, 2, 3, 3}, rng);
  Tensor b = random_tensor({2}, rng);
  Tensor tgt = random_tensor({2, 6, 6}, rng);
  auto run = [&]() {
    Var vx = leaf(x), vw = leaf(w), vb = leaf(b);
    Var y = leaky_relu(conv2d(vx, vw, vb, 1, 1), 0.2);
    backward(smooth_l1_loss(y, tgt, 1.0));
    return std::make_pair(vw->grad, vx->grad);
  };
  auto [gw1, gx1] = run();
  auto [gw2, gx2] = run();
  for (std::size_t i = 0; i < gw1.size(); ++i) EXPECT_EQ(gw1[i], gw2[i]);
  for (std::size_t i = 0; i < gx1.size(); ++i) EXPECT_EQ(gx1[i], gx2[i]);
}

TEST(AutodiffTest, ConstantGraphKeepsNoTape) {
  Tensor x({2, 4, 4}, 1.0);
  Var y = relu(constant(x));
  EXPECT_FALSE(y->requires_grad);
  EXPECT_TRUE(y->inputs.empty());
}
