#pragma once

#include <cmath>
#include <numbers>

#include "mlomae/types.hpp"

namespace mlomae {

template <typename Scalar>
struct AdamWParams {
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.95);
  Scalar weight_decay = Scalar(0.05);
  Scalar eps = Scalar(1e-8);
};

// First/second moments for one tensor. The step counter lives in OptState so
// all tensors of a set share it.
template <typename Scalar>
struct Moments {
  MatrixT<Scalar> m;
  MatrixT<Scalar> v;
};

// Decoupled weight decay, then the bias-corrected adaptive step. `t` is the
// 1-based count of steps taken including this one.
template <typename Scalar>
void adamw_step(MatrixT<Scalar>& param, const MatrixT<Scalar>& grad, Moments<Scalar>& mom, long t,
                Scalar lr, const AdamWParams<Scalar>& hp) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols())
    throw DimensionError("adamw_step: grad shape does not match param");
  if (mom.m.size() == 0) {
    mom.m = MatrixT<Scalar>::Zero(param.rows(), param.cols());
    mom.v = MatrixT<Scalar>::Zero(param.rows(), param.cols());
  }
  param *= Scalar(1) - lr * hp.weight_decay;
  mom.m = hp.beta1 * mom.m + (Scalar(1) - hp.beta1) * grad;
  mom.v = hp.beta2 * mom.v + (Scalar(1) - hp.beta2) * grad.cwiseAbs2();
  const Scalar c1 = Scalar(1) - std::pow(hp.beta1, static_cast<Scalar>(t));
  const Scalar c2 = Scalar(1) - std::pow(hp.beta2, static_cast<Scalar>(t));
  param.array() -= lr * (mom.m.array() / c1) / ((mom.v.array() / c2).sqrt() + hp.eps);
}

template <typename Scalar>
Scalar cosine_lr(long step, long total_steps, Scalar base_lr, Scalar min_lr) {
  if (total_steps <= 0) return base_lr;
  const Scalar frac = static_cast<Scalar>(step) / static_cast<Scalar>(total_steps);
  return min_lr + Scalar(0.5) * (base_lr - min_lr) * (Scalar(1) + std::cos(std::numbers::pi_v<Scalar> * frac));
}

// Optimizer state for a whole parameter set.
struct OptState {
  std::map<std::string, Moments<double>> moments;
  long step = 0;
};

// One AdamW update of every tensor in `params` that has an entry in `grads`.
void adamw_update(TensorMap& params, const GradMap& grads, OptState& state, double lr,
                  const AdamWParams<double>& hp);
// Plain gradient descent, no decay. Used for derivation-exact oracle runs.
void sgd_update(TensorMap& params, const GradMap& grads, double lr);

}  // namespace mlomae
