#pragma once

// Central finite-difference gradient verification used by the unit and
// acceptance suites. Independent of the autograd code it checks: it only
// evaluates the scalar loss.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "seqcls/nn/autograd.hpp"

namespace seqcls::testing {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::string worst;  // "<param>[index]: analytic vs numeric"
    std::size_t checked = 0;
};

struct GradCheckParam {
    std::string name;
    nn::Var var;
};

// Samples `fraction` of each parameter's entries (at least one per tensor) and
// compares the analytic gradient of `loss` against
// (L(p + h) - L(p - h)) / 2h. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckResult check_gradients(const std::function<nn::Var()>& loss, const std::vector<GradCheckParam>& params,
                                       double fraction, std::uint64_t seed, double step = 1e-5,
                                       double floor = 1e-6) {
    for (const auto& p : params) {
        auto v = p.var;
        v.zero_grad();
    }
    nn::Var l = loss();
    l.backward();

    std::mt19937_64 rng(seed);
    GradCheckResult result;
    for (const auto& p : params) {
        nn::Var v = p.var;
        const std::int64_t n = v.value().numel();
        const std::int64_t samples =
            std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(fraction * static_cast<double>(n))));
        std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
        const nn::Tensor analytic = v.has_grad() ? v.grad() : nn::Tensor(v.shape());
        for (std::int64_t s = 0; s < samples; ++s) {
            const std::int64_t i = samples >= n ? s : pick(rng);
            if (i >= n) break;
            double& x = v.mutable_value()[i];
            const double saved = x;
            double plus, minus;
            {
                nn::NoGradGuard guard;
                x = saved + step;
                plus = loss().value()[0];
                x = saved - step;
                minus = loss().value()[0];
            }
            x = saved;
            const double numeric = (plus - minus) / (2.0 * step);
            const double a = analytic[i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            ++result.checked;
            if (rel > result.max_relative_error) {
                result.max_relative_error = rel;
                result.worst = p.name + "[" + std::to_string(i) + "]: " + std::to_string(a) + " vs " +
                               std::to_string(numeric);
            }
        }
    }
    return result;
}

}  // namespace seqcls::testing
