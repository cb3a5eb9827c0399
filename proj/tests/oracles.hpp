// Independent reference computations used only by tests. Nothing in here may
// call into the implementation paths it is used to check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "spcl/rng.hpp"

namespace oracles {

// Classic two-sided cyclic Jacobi eigensolver for a symmetric matrix,
// returning eigenvalues sorted descending. Deliberately separate from the
// one-sided SVD path it cross-checks.
inline std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n) {
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off < 1e-26) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double apq = a[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                double app = a[p * n + p], aqq = a[q * n + q];
                double theta = (aqq - app) / (2.0 * apq);
                double t = (theta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(1.0 + theta * theta));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    double aip = a[i * n + p], aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    double api = a[p * n + i], aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
    std::sort(eig.begin(), eig.end(), std::greater<>());
    return eig;
}

// Sliding-window aggregate by direct summation, padding with the last value.
inline double window_aggregate(const std::vector<double>& sigma, std::size_t start0,
                               std::size_t k, bool divide_by_kplus1) {
    double sum = 0.0;
    for (std::size_t i = start0; i <= start0 + k; ++i)
        sum += sigma[std::min(i, sigma.size() - 1)];
    return sum / double(divide_by_kplus1 ? k + 1 : k);
}

// Exhaustive search over every window size.
inline std::size_t best_window_exhaustive(const std::vector<double>& sigma, double alpha,
                                          bool divide_by_kplus1) {
    std::size_t best = 1;
    double best_obj = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k <= sigma.size(); ++k) {
        double d = window_aggregate(sigma, 0, k, divide_by_kplus1) - alpha * sigma[0];
        if (d * d < best_obj) {
            best_obj = d * d;
            best = k;
        }
    }
    return best;
}

inline std::vector<double> random_nonincreasing_spectrum(spcl::Rng& rng, std::size_t r,
                                                         bool allow_zero_tail) {
    std::vector<double> s(r);
    for (auto& v : s) v = rng.uniform() * 10.0;
    std::sort(s.begin(), s.end(), std::greater<>());
    if (allow_zero_tail && r > 1 && rng.uniform() < 0.3) {
        std::size_t tail = 1 + rng.below(r - 1);
        for (std::size_t i = r - tail; i < r; ++i) s[i] = 0.0;
    }
    return s;
}

// Central finite differences: df/dx_i via f(x +- h e_i).
inline double central_difference(const std::function<double(double)>& f_of_component,
                                 double x, double h) {
    return (f_of_component(x + h) - f_of_component(x - h)) / (2.0 * h);
}

inline double rel_error(double a, double b, double floor = 1e-6) {
    double denom = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / denom;
}

} // namespace oracles
