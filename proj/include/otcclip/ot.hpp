#pragma once

#include <cstddef>
#include <utility>

#include "otcclip/common.hpp"

namespace otcclip {

/// Discrete distribution over n atoms. Entries are nonnegative and sum to 1
/// within 1e-9.
struct Weights {
  Vec w;

  static Weights uniform(std::size_t n);

  std::size_t size() const { return w.size(); }
  double sum() const;
  void validate() const;
};

/// Couples two Weights; entries must be finite and dimensions must match the
/// distributions being coupled. Plain alias: Matrix already carries the shape.
using CostMatrix = Matrix;

struct SinkhornConfig {
  double lambda = 0.1;              // entropic regularizer
  int max_iters = 100;
  double tol = 1e-6;                // max marginal residual
  double cost_clamp_multiplier = 500.0;  // kernel guard: costs clamped at multiplier*lambda

  void validate() const;
};

struct TransportPlan {
  Matrix t;                          // n x m, nonnegative
  double row_marginal_residual = 0;  // max_i |sum_j t_ij - a_i|
  double col_marginal_residual = 0;  // max_j |sum_i t_ij - b_j|
  int iterations_used = 0;
};

/// Entropy-regularized OT via alternating row/column scaling. Deterministic
/// for fixed inputs; stops when both marginal residuals fall below cfg.tol or
/// after cfg.max_iters iterations, whichever comes first. Convergence failure
/// is not an error: the plan is returned with its residuals.
///
/// Scaling runs on the raw kernel exp(-min(C, mult*lambda)/lambda) and switches
/// to log-domain potentials automatically when a scaling factor leaves
/// [1e-30, 1e30].
TransportPlan sinkhorn_solve(const Weights& a, const Weights& b, const CostMatrix& c,
                             const SinkhornConfig& cfg);

/// Objective value of a plan: sum_ij T_ij*C_ij, plus
/// lambda * sum_ij T_ij*(log T_ij - 1) when include_entropy is set
/// (0*log 0 := 0).
double ot_value(const TransportPlan& plan, const CostMatrix& c, double lambda,
                bool include_entropy);

/// Exact unregularized optimum under uniform marginals by enumerating all n!
/// permutation plans (the Birkhoff extreme points). Requires square c with
/// n <= 8. Ties resolve to the first minimal permutation in lexicographic
/// order.
std::pair<double, TransportPlan> exact_ot_oracle(const CostMatrix& c);

/// Diagnostic: value and gradient of the entropic objective w.r.t. the cost
/// matrix, differentiating through the scaling iterations themselves instead
/// of applying the envelope rule. Raw-kernel path only; throws if the solve
/// requires log-domain stabilization.
struct UnrolledResult {
  double value = 0;
  TransportPlan plan;
  Matrix grad_cost;  // dValue/dC, n x m
};
UnrolledResult sinkhorn_value_grad_unrolled(const Weights& a, const Weights& b,
                                            const CostMatrix& c, const SinkhornConfig& cfg);

}  // namespace otcclip
