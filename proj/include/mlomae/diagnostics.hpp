#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mlomae/mlo.hpp"

namespace mlomae::diag {

struct OpCheck {
  std::string name;
  double max_rel_error = 0.0;
};

// Central-difference checks of every differentiable tape operator at random
// non-degenerate points (double precision, eps 1e-5).
std::vector<OpCheck> op_grad_checks(std::uint64_t seed = 7);

struct BilevelToy {
  double t = 0.0;
  double hypergradient = 0.0;  // through chain_rule_hypergrad
  double closed_form = 0.0;    // d/dt of ½e′², e′ = t
  double brute_force = 0.0;    // central difference of the unrolled objective in t
};

// Inner ½(e − t)², e₀ = 0, one plain step with η = 1; outer ½e′².
BilevelToy analytic_bilevel_toy(double t);

struct PipelineOracle {
  double cosine = 0.0;
  double rel_l2 = 0.0;
  // Same comparison restricted to each path: the E-path oracle holds C′
  // fixed at its unperturbed value, the C-path oracle is the remainder.
  double cosine_e = 0.0;
  double rel_l2_e = 0.0;
  double cosine_c = 0.0;
  double rel_l2_c = 0.0;
  Eigen::VectorXd hypergradient;
  Eigen::VectorXd finite_difference;
};

// Tiny pipeline (N = 4 patches, emb 4, one block each side) with plain SGD
// inner steps and unroll 1: stage3_hypergrad against per-coordinate central
// differences of T ↦ L_val(E′(T), C′(E′(T))) with the mask selection held
// fixed.
ModelDims oracle_dims();
MloConfig oracle_config();
// fda_eps_scale overrides the oracle config's value.
PipelineOracle pipeline_hypergrad_oracle(std::uint64_t seed, bool flip_c_path_sign = false,
                                         std::optional<double> fda_eps_scale = std::nullopt);

struct FdaOracle {
  double rel_error = 0.0;
  Index num_params = 0;
};

// fda_jvp of e ↦ ∇_t f(e, t) against the dense mixed Hessian from double
// central differences, f a two-layer sigmoid MLP cross-entropy.
FdaOracle fda_vs_double_fd(std::uint64_t seed, double eps_scale = 0.01);

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);
double relative_l2(const Eigen::VectorXd& approx, const Eigen::VectorXd& reference);

}  // namespace mlomae::diag
