#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "kinefit/error.hpp"

namespace kinefit {

using ParamBlocks = std::vector<std::vector<double>>;
using BlockFn = std::function<double(const ParamBlocks&)>;

// Central finite differences, (f(x + h e_i) - f(x - h e_i)) / 2h, one entry
// per coordinate of every block. Verification oracle; keep it independent of
// any reverse-mode code path it is used to check.
inline ParamBlocks finite_difference_gradient(const BlockFn& f, ParamBlocks point, double step) {
    if (!(step > 0.0)) throw InputError("finite_difference_gradient: step must be positive");
    ParamBlocks grads;
    grads.reserve(point.size());
    for (auto& block : point) grads.emplace_back(block.size(), 0.0);
    for (size_t b = 0; b < point.size(); ++b) {
        for (size_t i = 0; i < point[b].size(); ++i) {
            const double saved = point[b][i];
            point[b][i] = saved + step;
            const double fp = f(point);
            point[b][i] = saved - step;
            const double fm = f(point);
            point[b][i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("finite_difference_gradient: non-finite probe value");
            grads[b][i] = (fp - fm) / (2.0 * step);
        }
    }
    return grads;
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps near-zero
// gradients from inflating the relative error.
inline double max_relative_error(const ParamBlocks& a, const ParamBlocks& b,
                                 double floor = 1e-6) {
    double worst = 0.0;
    for (size_t k = 0; k < a.size(); ++k)
        for (size_t i = 0; i < a[k].size(); ++i) {
            const double denom = std::max({std::abs(a[k][i]), std::abs(b[k][i]), floor});
            worst = std::max(worst, std::abs(a[k][i] - b[k][i]) / denom);
        }
    return worst;
}

}  // namespace kinefit
