#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "star/objective.hpp"

namespace star {

// Gradient verification of each differentiable op on small random tapes.
struct OpCheckResult {
  std::string op;
  Scalar max_rel_err = 0.0;
  bool pass = false;
};
std::vector<OpCheckResult> run_op_gradient_checks(std::uint64_t seed, int points, Scalar tol,
                                                  bool inject_fault = false);

// Full four-term objective on a (N=8, K=4, H=8, A=8, C=3, T=2) instance,
// checked against central differences for every parameter tensor.
GradReport run_full_loss_check(std::uint64_t seed, Scalar step, Scalar tol,
                               bool inject_fault = false);

// Numerical check of the attended-response decomposition: for random models,
// inputs, steps and classes, sum_i alpha_i * xi_i equals sum_k w_k * x_k
// within 1e-9 * max(1, |rhs|).
struct IdentityCheckResult {
  Scalar worst_err = 0.0;   // max |lhs - rhs| / max(1, |rhs|)
  Scalar bound = 1e-9;
  int draws = 0;
  bool pass = false;
};
IdentityCheckResult run_decomposition_identity_check(std::uint64_t seed, int draws);

// Random parameters for identity/gradient exercises: Glorot draws plus noise
// on the zero-initialized tensors so every path is generic.
ModelParams random_params(const ModelDims& dims, std::uint64_t seed);

}  // namespace star
