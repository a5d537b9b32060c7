#pragma once

#include <cstdint>
#include <random>

namespace sgdiff {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Mixes a seed with substream indices so that independent consumers
/// (per object, per sampler step, ...) get decorrelated deterministic streams.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
                              std::uint64_t c = 0) {
    std::uint64_t x = splitmix64(seed ^ 0x5bf03635ff2d9a15ULL);
    x = splitmix64(x ^ splitmix64(a));
    x = splitmix64(x ^ splitmix64(b ^ 0x94d049bb133111ebULL));
    x = splitmix64(x ^ splitmix64(c ^ 0x2545f4914f6cdd1dULL));
    return x;
}

/// Deterministic RNG stream. Gaussian draws use an explicit Box-Muller
/// transform so sequences do not depend on the standard library's
/// normal_distribution implementation.
class RngStream {
   public:
    explicit RngStream(std::uint64_t seed) : gen_(seed) {}
    RngStream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0)
        : gen_(mix_seed(seed, a, b, c)) {}

    double uniform() {
        // 53-bit mantissa uniform in [0,1)
        return (gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(gen_() % static_cast<std::uint64_t>(hi - lo + 1));
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    std::uint64_t next_u64() { return gen_(); }

   private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace sgdiff
