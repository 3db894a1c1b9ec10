#pragma once

#include <functional>
#include <span>

#include "vmixer/ops.hpp"

namespace vmixer {

struct GradcheckOptions {
    // Central-difference step. Linear ops tolerate large steps; curved ops
    // want this balanced against f32 storage noise.
    double eps = 1e-3;
    // Per-parameter coordinate budget; all coordinates when numel is within it.
    int max_coords_per_param = 16;
    uint64_t seed = 0;
    // When sampling, prefer the largest-|analytic| coordinates so the check
    // compares signal rather than f32 storage noise.
    bool prefer_large_grads = false;
};

// Central-difference verification of reverse-mode gradients.
//
// f() must rebuild the forward graph from the current parameter values and
// return a single-element loss. The analytic pass runs f() once and calls
// backward(); the numeric pass re-evaluates f() twice per sampled coordinate
// with the coordinate perturbed by +/- eps (recording suspended), reading the
// loss at 64-bit fidelity and dividing by the actually-stored perturbation.
//
// Returns max over sampled coordinates of
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double finite_diff_gradcheck(const std::function<Tensor()>& f, std::span<Tensor> params,
                             const GradcheckOptions& opts = {});

// Same check with a separate value path: `value_fn` recomputes the loss from
// the parameters' current (perturbed) storage, typically via an independent
// f64 reference implementation, removing f32 round-off from the numeric side.
double finite_diff_gradcheck(const std::function<Tensor()>& graph_fn,
                             const std::function<double()>& value_fn, std::span<Tensor> params,
                             const GradcheckOptions& opts = {});

// Scalar helper: central-difference derivative of a plain double function.
double central_difference(const std::function<double(double)>& f, double x, double eps);

} // namespace vmixer
