#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace spcl {

// splitmix64 stream. Chosen over std::mt19937 so that seeded runs are
// bit-reproducible across standard libraries, not just across runs of one
// binary (std::normal_distribution is implementation-defined).
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Box-Muller (trig form, one value per call; deterministic, no cached spare)
    double gaussian() {
        double u1 = uniform();
        double u2 = uniform();
        // u1 == 0 would take log(0); nudge to the smallest representable step
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    // uniform integer in [0, n), n >= 1
    std::uint64_t below(std::uint64_t n) {
        // multiply-shift; bias is < 2^-64 per draw, irrelevant at this scale
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::uint64_t state_;
};

// Derive an independent sub-stream seed, so that e.g. per-stage shuffles do
// not depend on how many draws earlier stages consumed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    Rng r(seed ^ (0x5851f42d4c957f2dULL * (salt + 1)));
    return r.next();
}

} // namespace spcl
