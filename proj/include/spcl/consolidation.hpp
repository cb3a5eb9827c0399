#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "spcl/linalg.hpp"
#include "spcl/tensor.hpp"

namespace spcl::consolidation {

// Sliding-window divisor convention. The window always spans k+1 singular
// values (sigma_i .. sigma_{i+k}, padded with sigma_r past the end);
// window_mean divides by k+1, paper_literal divides by k as the equations
// are typeset. Only window_mean guarantees alpha_i <= 1 and alpha_r = 1.
enum class Convention { window_mean, paper_literal };

inline const char* to_string(Convention c) {
    return c == Convention::window_mean ? "window-mean" : "paper-literal";
}

inline Convention convention_from_string(const std::string& s) {
    if (s == "window-mean") return Convention::window_mean;
    if (s == "paper-literal") return Convention::paper_literal;
    throw std::invalid_argument("unknown convention '" + s + "' (expected window-mean or paper-literal)");
}

// Consolidation settings. The remaining policies are fixed: ties in the
// window-size argmin break toward the smallest k, 0-D/1-D tensors get plain
// scalar alpha mixing, and the full spectrum r = min(M, N) is used with no
// numerical-rank threshold.
struct MixConfig {
    double alpha = 0.2;
    Convention convention = Convention::window_mean;
};

inline void validate(const MixConfig& cfg) {
    if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0))
        throw std::invalid_argument("MixConfig: alpha must be in [0, 1]");
}

namespace detail {

inline void check_spectrum(const std::vector<double>& sigma) {
    if (sigma.empty()) throw std::invalid_argument("sigma must be nonempty");
    for (std::size_t i = 0; i + 1 < sigma.size(); ++i)
        if (sigma[i] < sigma[i + 1])
            throw std::invalid_argument("sigma must be nonincreasing (violated at index " +
                                        std::to_string(i + 1) + ")");
    if (sigma.back() < 0.0)
        throw std::invalid_argument("sigma must be nonnegative");
}

// Aggregate of sigma_start .. sigma_{start+k} (k+1 terms, 0-based start),
// indices past the end padded with sigma_r.
inline double window_value(const std::vector<double>& sigma, std::size_t start,
                           std::size_t k, Convention conv) {
    const std::size_t r = sigma.size();
    double sum = 0.0;
    for (std::size_t i = start; i <= start + k; ++i)
        sum += sigma[std::min(i, r - 1)];
    double divisor = (conv == Convention::window_mean) ? double(k + 1) : double(k);
    return sum / divisor;
}

} // namespace detail

// theta_mixed = alpha * new + (1 - alpha) * old, elementwise per tensor.
inline ParamSet model_mix(const ParamSet& old_params, const ParamSet& new_params,
                          double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument("model_mix: alpha must be in [0, 1]");
    require_compatible(old_params, new_params, "model_mix");
    ParamSet out;
    auto in = new_params.begin();
    for (const auto& [name, told] : old_params) {
        const auto& tnew = in->second;
        std::vector<float> mixed(told.data.size());
        for (std::size_t i = 0; i < mixed.size(); ++i) {
            double v = alpha * double(tnew.data[i]) + (1.0 - alpha) * double(told.data[i]);
            mixed[i] = static_cast<float>(v);
        }
        out.put(name, Tensor<float>(told.shape, std::move(mixed)));
        ++in;
    }
    return out;
}

// Window size selection: argmin over k in {1..r} of
// (window_value(sigma_1..sigma_{k+1}) - alpha * sigma_1)^2, smallest k wins ties.
inline std::size_t select_window(const std::vector<double>& sigma, double alpha,
                                 Convention conv) {
    detail::check_spectrum(sigma);
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument("select_window: alpha must be in [0, 1]");
    const std::size_t r = sigma.size();
    std::size_t best_k = 1;
    double best_obj = 0.0;
    for (std::size_t k = 1; k <= r; ++k) {
        double diff = detail::window_value(sigma, 0, k, conv) - alpha * sigma[0];
        double obj = diff * diff;
        if (k == 1 || obj < best_obj) {
            best_obj = obj;
            best_k = k;
        }
    }
    return best_k;
}

// Scaled spectrum g: g[i] = window aggregate of sigma_i..sigma_{i+k}.
inline std::vector<double> spectral_scale(const std::vector<double>& sigma,
                                          std::size_t k, Convention conv) {
    detail::check_spectrum(sigma);
    if (k < 1 || k > sigma.size())
        throw std::invalid_argument("spectral_scale: k must be in {1..r}");
    std::vector<double> g(sigma.size());
    for (std::size_t i = 0; i < sigma.size(); ++i)
        g[i] = detail::window_value(sigma, i, k, conv);
    return g;
}

// Per-direction scaling factors alpha_i = g_i / sigma_i (1 where sigma_i = 0).
inline std::vector<double> effective_alphas(const std::vector<double>& sigma,
                                            const std::vector<double>& g) {
    if (sigma.size() != g.size())
        throw std::invalid_argument("effective_alphas: length mismatch");
    std::vector<double> a(sigma.size());
    for (std::size_t i = 0; i < sigma.size(); ++i)
        a[i] = (sigma[i] == 0.0) ? 1.0 : g[i] / sigma[i];
    return a;
}

// Spectral-aware consolidation over whole parameter sets. For each >=2-D
// tensor the update is decomposed, its spectrum rescaled through the sliding
// window, and the update reconstructed; 0-D/1-D tensors mix with plain alpha.
inline ParamSet sac_consolidate(const ParamSet& old_params, const ParamSet& new_params,
                                const MixConfig& cfg) {
    validate(cfg);
    require_compatible(old_params, new_params, "sac_consolidate");
    ParamSet out;
    auto in = new_params.begin();
    for (const auto& [name, told] : old_params) {
        const auto& tnew = in->second;
        ++in;

        std::vector<double> delta(told.data.size());
        bool all_zero = true;
        for (std::size_t i = 0; i < delta.size(); ++i) {
            delta[i] = double(tnew.data[i]) - double(told.data[i]);
            all_zero = all_zero && delta[i] == 0.0;
        }
        if (all_zero) {
            out.put(name, told);
            continue;
        }

        std::vector<float> result(told.data.size());
        if (told.ndim() >= 2) {
            try {
                linalg::Matrix dm = linalg::matricize(Tensor<double>(told.shape, std::move(delta)));
                linalg::SvdFactorization f = linalg::svd(dm);
                std::size_t k = select_window(f.sigma, cfg.alpha, cfg.convention);
                f.sigma = spectral_scale(f.sigma, k, cfg.convention);
                linalg::Matrix scaled = linalg::reconstruct(f);
                for (std::size_t i = 0; i < result.size(); ++i)
                    result[i] = static_cast<float>(double(told.data[i]) + scaled.data()[i]);
            } catch (const std::runtime_error& e) {
                throw std::runtime_error("sac_consolidate: SVD failed on tensor '" + name +
                                         "': " + e.what());
            }
        } else {
            for (std::size_t i = 0; i < result.size(); ++i)
                result[i] = static_cast<float>(double(told.data[i]) + cfg.alpha * delta[i]);
        }
        out.put(name, Tensor<float>(told.shape, std::move(result)));
    }
    return out;
}

} // namespace spcl::consolidation
