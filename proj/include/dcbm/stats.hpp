#pragma once

// Correlation measures and the finite-difference gradient oracle.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "dcbm/errors.hpp"

namespace dcbm {

/// Sample Pearson correlation. Throws NumericError when either input has
/// zero variance.
inline double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("pearson: length mismatch");
    const std::size_t n = a.size();
    if (n < 2) throw ShapeError("pearson: need at least 2 points");
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma;
        const double db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0)
        throw NumericError("pearson: undefined for zero-variance input");
    double r = sab / std::sqrt(saa * sbb);
    return std::clamp(r, -1.0, 1.0);
}

/// Fractional (mid) ranks, 1-based; ties share the average of their ranks.
inline std::vector<double> midranks(std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

/// Spearman rank correlation: Pearson on mid-ranks. Constant input throws.
inline double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("spearman: length mismatch");
    std::vector<double> ra = midranks(a);
    std::vector<double> rb = midranks(b);
    return pearson(ra, rb);
}

/// Central-difference gradient (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
inline std::vector<double>
finite_diff_gradient(const std::function<double(const std::vector<double>&)>& f,
                     std::vector<double> at, double h) {
    if (!(h > 0.0)) throw ConfigError("finite_diff_gradient: h must be positive");
    std::vector<double> grad(at.size(), 0.0);
    for (std::size_t i = 0; i < at.size(); ++i) {
        const double orig = at[i];
        at[i] = orig + h;
        const double fp = f(at);
        at[i] = orig - h;
        const double fm = f(at);
        at[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("finite_diff_gradient: non-finite function value");
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

} // namespace dcbm
