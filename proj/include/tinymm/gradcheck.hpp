#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tinymm/tensor.hpp"

namespace tinymm {

struct GradCheckResult {
    double max_rel_err = 0.0;
    size_t checked = 0;
    int worst_param = -1;
    size_t worst_entry = 0;

    bool ok(double tol = 1e-4) const { return max_rel_err < tol; }
};

// |a - n| / max(1, |a|, |n|); the unit floor keeps near-zero gradients from
// blowing up the ratio.
inline double rel_err(double analytic, double numeric) {
    const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
    return std::fabs(analytic - numeric) / denom;
}

// Central finite differences against the analytic gradients already sitting
// in params[i]->grad. loss_fn must be a pure function of the parameter
// values. h = 1e-5 in float64 puts the FD truncation error around 1e-10,
// far below the 1e-4 gate.
inline GradCheckResult finite_difference_check(const std::vector<Parameter*>& params,
                                               const std::function<double()>& loss_fn,
                                               double h = 1e-5) {
    GradCheckResult res;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = *params[pi];
        if (!p.trainable) continue;
        if (!p.has_grad()) {
            throw ContractError("finite_difference_check: parameter has no analytic gradient");
        }
        for (size_t i = 0; i < p.value.numel(); ++i) {
            const double orig = p.value[i];
            p.value[i] = orig + h;
            const double up = loss_fn();
            p.value[i] = orig - h;
            const double down = loss_fn();
            p.value[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double e = rel_err(p.grad[i], numeric);
            if (e > res.max_rel_err) {
                res.max_rel_err = e;
                res.worst_param = static_cast<int>(pi);
                res.worst_entry = i;
            }
            ++res.checked;
        }
    }
    return res;
}

} // namespace tinymm
