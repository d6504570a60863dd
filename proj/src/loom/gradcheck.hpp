#pragma once

#include <functional>
#include <string>
#include <vector>

#include "loom/autodiff.hpp"

namespace loom {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    int worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> per_param;
    double max_rel_err = 0.0;
    std::string worst_param;

    bool passed(double tol) const { return max_rel_err <= tol; }
};

// Loss callback: evaluate the loss at the current parameter values; when
// with_grad is set, also accumulate gradients into the ParamSet.
using LossFn = std::function<double(ParamSet&, bool with_grad)>;

// Central-difference check of every entry of the named parameters (all
// parameters when `which` is empty) against the gradients the callback
// produces. h is the finite-difference step. Relative error uses
// |a - n| / max(|a|, |n|, floor) so tiny gradients do not blow up the ratio.
GradCheckReport grad_check(const LossFn& loss, ParamSet& params, double h,
                           const std::vector<std::string>& which = {},
                           double denom_floor = 1e-6);

}  // namespace loom
