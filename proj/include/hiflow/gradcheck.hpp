#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "hiflow/errors.hpp"
#include "hiflow/tensor.hpp"

namespace hiflow {

// Central-finite-difference gradient audit. The numeric side never touches the
// tape, so it stays an independent oracle for the reverse-mode path.
//
// Comparison: rel = |analytic - numeric| / max(|analytic|, |numeric|, floor).
// The floor makes the comparison absolute below that scale; central
// differences at step h carry O(h^2) truncation noise, so coordinates whose
// true gradient is smaller than the floor cannot be compared relatively.

struct GradCheckFailure {
    size_t param_index = 0;
    int64_t coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    int64_t coords_checked = 0;
    std::vector<GradCheckFailure> failures;

    bool passed(double tol) const { return max_rel_err <= tol; }
};

template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>(Tape<T>&)>& f, std::vector<Tensor<T>> params,
                           double h = 1e-4, double tol = 1e-4, double rel_floor = 1e-3,
                           size_t max_failures = 16) {
    if (h <= 0.0) throw ConfigError("grad_check: step h must be positive");

    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }

    // analytic pass
    Tape<T> tape(true);
    Tensor<T> loss = f(tape);
    if (!std::isfinite(static_cast<double>(loss[0]))) throw NumericError("grad_check: non-finite loss");
    tape.backward(loss);

    std::vector<std::vector<double>> analytic(params.size());
    for (size_t pi = 0; pi < params.size(); ++pi) {
        analytic[pi].resize(static_cast<size_t>(params[pi].numel()));
        for (int64_t i = 0; i < params[pi].numel(); ++i)
            analytic[pi][static_cast<size_t>(i)] = static_cast<double>(params[pi].grad()[i]);
    }

    auto eval = [&]() -> double {
        Tape<T> silent(false);
        Tensor<T> l = f(silent);
        const double v = static_cast<double>(l[0]);
        if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss during finite differences");
        return v;
    };

    GradCheckReport report;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<T>& p = params[pi];
        for (int64_t i = 0; i < p.numel(); ++i) {
            const T saved = p[i];
            p[i] = saved + static_cast<T>(h);
            const double up = eval();
            p[i] = saved - static_cast<T>(h);
            const double dn = eval();
            p[i] = saved;
            const double numeric = (up - dn) / (2.0 * h);
            const double a = analytic[pi][static_cast<size_t>(i)];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), rel_floor});
            const double rel = std::fabs(a - numeric) / denom;
            ++report.coords_checked;
            if (rel > report.max_rel_err) report.max_rel_err = rel;
            if (rel > tol && report.failures.size() < max_failures)
                report.failures.push_back({pi, i, a, numeric, rel});
        }
    }
    return report;
}

}  // namespace hiflow
