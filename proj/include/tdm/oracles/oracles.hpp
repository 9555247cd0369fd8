#pragma once

// Independent reference implementations used by the test suites and the
// oracle-check / grad-check commands. Nothing in the core library calls these.

#include "tdm/numeric/ops.hpp"

#include <functional>
#include <string>
#include <vector>

namespace tdm::oracles {

// ---- naive loops over row-major CxHxW / NxCxHxW tensors ---------------------

Tensor prototype_loop(const std::vector<Tensor>& maps);
Tensor mean_spatial_loop(const Tensor& map);
Tensor intra_loop(const Tensor& map);
/// Inter scores of class i over NxCxHxW prototypes.
Tensor inter_loop(const Tensor& prototypes, Index i);
/// support: (N*K)xCxHxW class-major, weights NxC.
Tensor apply_support_loop(const Tensor& support, const Tensor& weights, Index k_shot);
/// query: CxHxW, weights NxC -> NxCxHxW.
Tensor apply_query_loop(const Tensor& query, const Tensor& weights);
Tensor pooled_loop(const Tensor& map);

double max_abs_diff(const Tensor& a, const Tensor& b);

struct OracleResult {
    std::string name;
    Index trials = 0;
    double max_abs_error = 0.0;
};

/// Random-tensor comparisons (C <= 8, H,W <= 4) of every score and weight
/// application op against the loops above.
std::vector<OracleResult> run_oracle_suite(Index trials, std::uint64_t seed);

// ---- finite differences ------------------------------------------------------

struct GradCheckEntry {
    std::string name;
    Index size = 0;
    double relative_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
    double max_abs_error = 0.0;
    double analytic_norm = 0.0;
    Index one_sided = 0;  // coordinates where one side of the step changed a branch
    Index straddled = 0;  // both sides changed a branch; left out of the error
};

/// Central differences of `loss` for every listed leaf. `loss` must be
/// deterministic and rebuild its graph on each call. When a perturbation moves
/// a relu/clamp/pool/argmin decision on one side only, that coordinate falls
/// back to the one-sided difference on the unchanged side (same step). When
/// both sides move one, the coordinate has no difference quotient on a single
/// linear piece and is counted in `straddled` instead of compared.
std::vector<GradCheckEntry> finite_difference_check(const std::function<Var()>& loss,
                                                    const std::vector<std::pair<std::string, Var>>& leaves,
                                                    double step = 1e-4);

/// The full episode loss of a 2-way 1-shot model on 16x16 images with an
/// 8-channel backbone, SAM+QAM+IAM on, eval-mode (deterministic, noise-free).
std::vector<GradCheckEntry> micro_model_grad_check(std::uint64_t seed, double step = 1e-4);

}  // namespace tdm::oracles
