#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "spcl/consolidation.hpp"
#include "spcl/linalg.hpp"
#include "spcl/rng.hpp"
#include "oracles.hpp"

using spcl::ParamSet;
using spcl::Rng;
using spcl::Tensor;
using namespace spcl::consolidation;

namespace {

ParamSet single_tensor(const std::string& name, std::vector<std::size_t> shape,
                       std::vector<float> data) {
    ParamSet p;
    p.put(name, Tensor<float>(std::move(shape), std::move(data)));
    return p;
}

ParamSet random_params(Rng& rng) {
    ParamSet p;
    auto fill = [&](std::size_t n) {
        std::vector<float> d(n);
        for (auto& v : d) v = float(rng.gaussian());
        return d;
    };
    p.put("w1", Tensor<float>({4, 6}, fill(24)));
    p.put("w2", Tensor<float>({3, 2, 2}, fill(12)));
    p.put("b", Tensor<float>({5}, fill(5)));
    p.put("s", Tensor<float>({}, fill(1)));
    return p;
}

} // namespace

TEST_CASE("model_mix endpoints and arithmetic", "[consolidation]") {
    Rng rng(11);
    ParamSet old_p = random_params(rng);
    ParamSet new_p = random_params(rng);

    ParamSet all_new = model_mix(old_p, new_p, 1.0);
    ParamSet all_old = model_mix(old_p, new_p, 0.0);
    auto in = new_p.begin();
    for (const auto& [name, t] : all_new) {
        REQUIRE(t.data == in->second.data);
        ++in;
    }
    auto io = old_p.begin();
    for (const auto& [name, t] : all_old) {
        REQUIRE(t.data == io->second.data);
        ++io;
    }

    ParamSet a = single_tensor("x", {}, {0.0f});
    ParamSet b = single_tensor("x", {}, {10.0f});
    REQUIRE(model_mix(a, b, 0.3).at("x").data[0] == Catch::Approx(3.0));
}

TEST_CASE("model_mix validates inputs", "[consolidation]") {
    ParamSet a = single_tensor("x", {2}, {1.0f, 2.0f});
    ParamSet b = single_tensor("y", {2}, {1.0f, 2.0f});
    REQUIRE_THROWS_WITH(model_mix(a, b, 0.5), Catch::Matchers::ContainsSubstring("'x'"));
    ParamSet c = single_tensor("x", {2, 1}, {1.0f, 2.0f});
    REQUIRE_THROWS_WITH(model_mix(a, c, 0.5),
                        Catch::Matchers::ContainsSubstring("shape mismatch"));
    REQUIRE_THROWS_AS(model_mix(a, a, 1.5), std::invalid_argument);
}

TEST_CASE("select_window golden cases", "[consolidation]") {
    // sigma = [4,2,1], alpha = 0.5: window of k+1 means are 3, 7/3, 2 -> k = 3 exact
    REQUIRE(select_window({4, 2, 1}, 0.5, Convention::window_mean) == 3);
    // constant spectrum: every k ties at (c - alpha c)^2, smallest k wins
    REQUIRE(select_window({2.5, 2.5, 2.5}, 0.7, Convention::window_mean) == 1);
    // mean(10, 1) = 5.5 = 0.55 * 10 exactly
    REQUIRE(select_window({10, 1, 1, 1}, 0.55, Convention::window_mean) == 1);
}

TEST_CASE("select_window matches exhaustive search on random spectra", "[consolidation]") {
    Rng rng(2024);
    for (int trial = 0; trial < 300; ++trial) {
        std::size_t r = 1 + rng.below(20);
        auto sigma = oracles::random_nonincreasing_spectrum(rng, r, true);
        double alpha = rng.uniform();
        for (Convention conv : {Convention::window_mean, Convention::paper_literal}) {
            bool kp1 = conv == Convention::window_mean;
            REQUIRE(select_window(sigma, alpha, conv) ==
                    oracles::best_window_exhaustive(sigma, alpha, kp1));
        }
    }
}

TEST_CASE("select_window rejects bad input", "[consolidation]") {
    REQUIRE_THROWS_AS(select_window({}, 0.5, Convention::window_mean), std::invalid_argument);
    REQUIRE_THROWS_AS(select_window({1.0, 2.0}, 0.5, Convention::window_mean),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(select_window({2.0, 1.0}, 1.2, Convention::window_mean),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(select_window({2.0, -1.0}, 0.5, Convention::window_mean),
                      std::invalid_argument);
}

TEST_CASE("spectral_scale golden vectors", "[consolidation]") {
    auto g = spectral_scale({4, 2, 1}, 3, Convention::window_mean);
    REQUIRE(g.size() == 3);
    REQUIRE(g[0] == Catch::Approx(2.0).margin(1e-12));
    REQUIRE(g[1] == Catch::Approx(1.25).margin(1e-12));
    REQUIRE(g[2] == Catch::Approx(1.0).margin(1e-12));

    auto gc = spectral_scale({3, 3, 3, 3}, 2, Convention::window_mean);
    for (double v : gc) REQUIRE(v == Catch::Approx(3.0).margin(1e-12));

    auto g1 = spectral_scale({10, 1, 1, 1}, 1, Convention::window_mean);
    REQUIRE(g1[0] == Catch::Approx(5.5).margin(1e-12));
    REQUIRE(g1[1] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(g1[2] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(g1[3] == Catch::Approx(1.0).margin(1e-12));

    REQUIRE_THROWS_AS(spectral_scale({2, 1}, 0, Convention::window_mean),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(spectral_scale({2, 1}, 3, Convention::window_mean),
                      std::invalid_argument);
}

TEST_CASE("spectral_scale matches sliding oracle and keeps window-mean bounds",
          "[consolidation]") {
    Rng rng(31337);
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t r = 1 + rng.below(24);
        auto sigma = oracles::random_nonincreasing_spectrum(rng, r, true);
        std::size_t k = 1 + rng.below(r);
        auto g = spectral_scale(sigma, k, Convention::window_mean);
        REQUIRE(g.size() == r);
        for (std::size_t i = 0; i < r; ++i) {
            REQUIRE(g[i] == Catch::Approx(oracles::window_aggregate(sigma, i, k, true))
                                .margin(1e-12));
            REQUIRE(g[i] <= sigma[i] + 1e-12);
            if (i + 1 < r) REQUIRE(g[i] >= g[i + 1] - 1e-12);
        }
        REQUIRE(g.back() == Catch::Approx(sigma.back()).margin(1e-12));

        auto a = effective_alphas(sigma, g);
        for (std::size_t i = 0; i < r; ++i) {
            REQUIRE(a[i] >= 0.0);
            REQUIRE(a[i] <= 1.0 + 1e-12);
        }
        REQUIRE(a.back() == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("effective_alphas golden and zero-tail convention", "[consolidation]") {
    auto a = effective_alphas({4, 2, 1}, {2, 1.25, 1});
    REQUIRE(a[0] == Catch::Approx(0.5).margin(1e-12));
    REQUIRE(a[1] == Catch::Approx(0.625).margin(1e-12));
    REQUIRE(a[2] == Catch::Approx(1.0).margin(1e-12));

    auto ac = effective_alphas({3, 3}, {3, 3});
    REQUIRE(ac == std::vector<double>{1.0, 1.0});

    auto az = effective_alphas({5, 0, 0}, {5.0 / 3.0, 0, 0});
    REQUIRE(az[1] == 1.0);
    REQUIRE(az[2] == 1.0);

    REQUIRE_THROWS_AS(effective_alphas({1, 2}, {1}), std::invalid_argument);
}

TEST_CASE("window objective is minimized at the chosen k", "[consolidation]") {
    Rng rng(555);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t r = 2 + rng.below(16);
        auto sigma = oracles::random_nonincreasing_spectrum(rng, r, false);
        double alpha = rng.uniform();
        std::size_t k = select_window(sigma, alpha, Convention::window_mean);
        auto g = spectral_scale(sigma, k, Convention::window_mean);
        double chosen = std::abs(g[0] - alpha * sigma[0]);
        for (std::size_t kp = 1; kp <= r; ++kp) {
            double alt = std::abs(oracles::window_aggregate(sigma, 0, kp, true) -
                                  alpha * sigma[0]);
            REQUIRE(chosen <= alt + 1e-12);
        }
    }
}

TEST_CASE("ModelMix equals scaling the singular values uniformly", "[consolidation]") {
    // alpha * Delta == U (alpha Sigma) V^T for random Delta and alpha
    Rng rng(444);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t m = 1 + rng.below(12);
        std::size_t n = 1 + rng.below(12);
        std::vector<double> d(m * n);
        for (auto& v : d) v = rng.gaussian();
        spcl::linalg::Matrix delta(m, n, d);
        double alpha = rng.uniform();

        auto f = spcl::linalg::svd(delta);
        for (auto& s : f.sigma) s *= alpha;
        spcl::linalg::Matrix spectral = spcl::linalg::reconstruct(f);

        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) {
            double direct = alpha * d[i];
            num += (spectral.data()[i] - direct) * (spectral.data()[i] - direct);
            den += direct * direct;
        }
        REQUIRE(std::sqrt(num) <= 1e-8 * std::max(1.0, std::sqrt(den)));
    }
}

TEST_CASE("sac_consolidate identity and constant-spectrum passthrough", "[consolidation]") {
    Rng rng(888);
    ParamSet old_p = random_params(rng);
    MixConfig cfg;

    SECTION("new == old is the identity") {
        ParamSet out = sac_consolidate(old_p, old_p, cfg);
        auto io = old_p.begin();
        for (const auto& [name, t] : out) {
            REQUIRE(t.data == io->second.data);
            ++io;
        }
    }

    SECTION("Delta = c * I has a constant spectrum and passes through whole") {
        ParamSet old_m = single_tensor("w", {4, 4}, std::vector<float>(16, 0.0f));
        std::vector<float> eye(16, 0.0f);
        for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 2.5f;
        ParamSet new_m = single_tensor("w", {4, 4}, eye);
        for (double alpha : {0.1, 0.5, 0.9}) {
            MixConfig c2{alpha, Convention::window_mean};
            ParamSet out = sac_consolidate(old_m, new_m, c2);
            for (std::size_t i = 0; i < 16; ++i)
                REQUIRE(out.at("w").data[i] ==
                        Catch::Approx(new_m.at("w").data[i]).margin(1e-8));
        }
    }
}

TEST_CASE("sac_consolidate end-to-end against brute-force window oracle", "[consolidation]") {
    // 2x2 tensor, old = 0, Delta built from chosen rotations with sigma = [4, 2]
    double c = std::cos(0.4), s = std::sin(0.4);
    double c2 = std::cos(1.1), s2 = std::sin(1.1);
    // U = [[c,-s],[s,c]], V = [[c2,-s2],[s2,c2]], Delta = U diag(4,2) V^T
    double u[2][2] = {{c, -s}, {s, c}};
    double v[2][2] = {{c2, -s2}, {s2, c2}};
    double sig[2] = {4.0, 2.0};
    std::vector<float> delta(4);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 2; ++k) acc += u[i][k] * sig[k] * v[j][k];
            delta[i * 2 + j] = float(acc);
        }

    ParamSet old_p = single_tensor("w", {2, 2}, std::vector<float>(4, 0.0f));
    ParamSet new_p = single_tensor("w", {2, 2}, delta);
    MixConfig cfg{0.5, Convention::window_mean};
    ParamSet out = sac_consolidate(old_p, new_p, cfg);

    // oracle: every window mean computed directly; k=1 -> mean(4,2)=3 err 1;
    // k=2 -> mean(4,2,2)=8/3 err 4/9 -> k=2, sigma~ = [8/3, 2]
    double st[2] = {8.0 / 3.0, 2.0};
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 2; ++k) acc += u[i][k] * st[k] * v[j][k];
            REQUIRE(out.at("w").data[i * 2 + j] == Catch::Approx(acc).margin(1e-6));
        }
}

TEST_CASE("sac_consolidate applies scalar mixing to 1-D and 0-D tensors", "[consolidation]") {
    ParamSet old_p;
    old_p.put("b", Tensor<float>({3}, {1.0f, 2.0f, 3.0f}));
    old_p.put("s", Tensor<float>({}, {4.0f}));
    ParamSet new_p;
    new_p.put("b", Tensor<float>({3}, {3.0f, 2.0f, 1.0f}));
    new_p.put("s", Tensor<float>({}, {0.0f}));
    MixConfig cfg{0.25, Convention::window_mean};
    ParamSet out = sac_consolidate(old_p, new_p, cfg);
    REQUIRE(out.at("b").data[0] == Catch::Approx(1.5));
    REQUIRE(out.at("b").data[1] == Catch::Approx(2.0));
    REQUIRE(out.at("b").data[2] == Catch::Approx(2.5));
    REQUIRE(out.at("s").data[0] == Catch::Approx(3.0));
}

TEST_CASE("sac_consolidate is deterministic", "[consolidation]") {
    Rng rng(3);
    ParamSet old_p = random_params(rng);
    ParamSet new_p = random_params(rng);
    MixConfig cfg{0.3, Convention::window_mean};
    ParamSet a = sac_consolidate(old_p, new_p, cfg);
    ParamSet b = sac_consolidate(old_p, new_p, cfg);
    auto ib = b.begin();
    for (const auto& [name, t] : a) {
        REQUIRE(t.data == ib->second.data);
        ++ib;
    }
}
