#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace impactx {

// Deterministic SplitMix64 generator (Steele et al., "Fast splittable
// pseudorandom number generators"). All derived draws (uniform, normal,
// shuffle) are defined here in terms of next_u64, so identical seeds give
// identical sequences on every platform; no <random> distributions are used.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Independent stream derived from this generator's seed and a stream id.
    Rng fork(std::uint64_t stream) const {
        Rng r(state_ ^ (0x8000000000000000ULL | stream * 0xda942042e4dd58b5ULL));
        r.next_u64();
        return r;
    }

    // Uniform in [0,1) with 53-bit resolution, computed in double then
    // narrowed, so the value is identical across platforms.
    double uniform_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    float uniform() { return static_cast<float>(uniform_double()); }

    float uniform(float lo, float hi) {
        return static_cast<float>(lo + (static_cast<double>(hi) - lo) * uniform_double());
    }

    // Box-Muller; draws two uniforms per pair, caching the second value.
    float normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform_double();
        double u2 = uniform_double();
        while (u1 <= 0.0) u1 = uniform_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = static_cast<float>(r * std::sin(a));
        have_spare_ = true;
        return static_cast<float>(r * std::cos(a));
    }

    // Uniform integer in [0, n) by rejection, bias-free.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) return 0;
        std::uint64_t limit = ~0ULL - (~0ULL % n);
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    // Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_ = 0;
    float spare_ = 0.0f;
    bool have_spare_ = false;
};

}  // namespace impactx
