#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "colorfuse/autodiff.hpp"
#include "colorfuse/tensor.hpp"

namespace colorfuse {

// Per-parameter Adam moments. Buffers are allocated lazily on the first
// step so a state can be declared before the parameter list is final.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;
};

// One bias-corrected Adam update over params' accumulated gradients.
// Parameters without an allocated gradient are treated as zero-grad and
// only advance their moment decay.
inline void adam_step(const std::vector<Var>& params, AdamState& state,
                      double lr, double beta1, double beta2,
                      double eps = 1e-8) {
  if (lr <= 0.0) throw std::invalid_argument("adam_step: lr must be > 0");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw std::invalid_argument("adam_step: betas must lie in [0,1)");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Tensor::zeros_like(p->value));
      state.v.push_back(Tensor::zeros_like(p->value));
    }
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state does not match params");

  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i]->value;
    if (!state.m[i].same_shape(p))
      throw std::invalid_argument("adam_step: parameter shape changed");
    const Tensor& g = params[i]->grad;
    const bool has_grad = !g.empty();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = has_grad ? g[j] : 0.0;
      state.m[i][j] = beta1 * state.m[i][j] + (1.0 - beta1) * gj;
      state.v[i][j] = beta2 * state.v[i][j] + (1.0 - beta2) * gj * gj;
      const double mhat = state.m[i][j] / bc1;
      const double vhat = state.v[i][j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// Owns the state for a fixed parameter list.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Var> params, double lr, double beta1 = 0.99,
                double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2),
        eps_(eps) {}

  void step() { adam_step(params_, state_, lr_, beta1_, beta2_, eps_); }

  void zero_grad() { colorfuse::zero_grad(params_); }

  long step_count() const { return state_.step; }
  const std::vector<Var>& params() const { return params_; }

 private:
  std::vector<Var> params_;
  AdamState state_;
  double lr_, beta1_, beta2_, eps_;
};

}  // namespace colorfuse
