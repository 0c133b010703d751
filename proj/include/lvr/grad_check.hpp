#pragma once

// Central-difference gradient verification against the tape's analytic
// gradients. The numeric side re-evaluates the loss with perturbed parameter
// values and never touches the backward machinery it is checking.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lvr/param_store.hpp"
#include "lvr/rng.hpp"
#include "lvr/tensor.hpp"

namespace lvr {

struct GradCheckReport {
    bool pass = false;
    double max_rel_err = 0.0;
    std::string worst_param;
    size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    size_t coords_checked = 0;
    std::string failure;  // non-empty when probing hit a non-finite value
};

// loss_fn must rebuild the loss from the current parameter values. It
// receives a tape for the analytic pass and nullptr during numeric probing.
// max_coords_per_tensor = 0 checks every coordinate; a positive value checks
// a deterministic subsample of that size per tensor.
inline GradCheckReport grad_check(const std::function<Tensor(Tape*)>& loss_fn, ParamStore& params, double step,
                                  double tol, int max_coords_per_tensor = 0, uint64_t subsample_seed = 17) {
    if (!(step > 0.0 && step <= 1e-2)) throw std::invalid_argument("grad_check: step must be in (0, 1e-2]");
    if (!(tol > 0.0)) throw std::invalid_argument("grad_check: tol must be positive");

    GradCheckReport report;
    params.zero_grads();
    Tape tape;
    Tensor loss = loss_fn(&tape);
    if (!loss.is_scalar()) throw std::invalid_argument("grad_check: loss_fn must return a scalar");
    if (!std::isfinite(loss.value())) {
        report.failure = "loss is non-finite at the unperturbed point";
        return report;
    }
    if (loss.tracked()) tape.backward(loss);

    double max_rel = 0.0;
    size_t checked = 0;
    size_t entry_idx = 0;
    for (auto& e : params.entries()) {
        const size_t n = e.tensor.numel();
        std::vector<size_t> coords;
        if (max_coords_per_tensor <= 0 || static_cast<size_t>(max_coords_per_tensor) >= n) {
            coords.resize(n);
            for (size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            Rng rng(derive_seed(subsample_seed, entry_idx));
            std::vector<int> picks = rng.sample_distinct(static_cast<int>(n), max_coords_per_tensor);
            coords.assign(picks.begin(), picks.end());
        }
        for (size_t i : coords) {
            double& x = (*e.tensor.data)[i];
            const double saved = x;
            x = saved + step;
            const double fp = loss_fn(nullptr).value();
            x = saved - step;
            const double fm = loss_fn(nullptr).value();
            x = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                report.failure = "non-finite loss while probing " + e.name + "[" + std::to_string(i) + "]";
                report.worst_param = e.name;
                report.worst_index = i;
                return report;
            }
            const double numeric = (fp - fm) / (2.0 * step);
            const double analytic = e.tensor.tracked() ? (*e.tensor.grad)[i] : 0.0;
            const double rel = std::fabs(analytic - numeric) /
                               std::max(std::max(std::fabs(analytic), std::fabs(numeric)), 1e-8);
            ++checked;
            if (rel > max_rel) {
                max_rel = rel;
                report.worst_param = e.name;
                report.worst_index = i;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
        ++entry_idx;
    }
    report.max_rel_err = max_rel;
    report.coords_checked = checked;
    report.pass = max_rel <= tol;  // vacuously true when there is nothing to check
    return report;
}

}  // namespace lvr
