#ifndef S2RD_RNG_HPP
#define S2RD_RNG_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace s2rd {

// Deterministic, platform-independent generator: xoshiro256++ seeded through
// splitmix64. Normal samples come from the Box-Muller transform on the uniform
// stream, so identical seeds give identical streams everywhere.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        seed_ = seed;
        std::uint64_t x = seed;
        for (int i = 0; i < 4; ++i) s_[i] = splitmix64(x);
        have_spare_ = false;
        spare_ = 0.0;
    }

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n), n > 0. Modulo bias is irrelevant at the n this
    // project uses (dataset indices, timesteps).
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller; caches the second sample of each pair.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    float normal_f() { return static_cast<float>(normal()); }

    void fill_normal(float* dst, std::int64_t n) {
        for (std::int64_t i = 0; i < n; ++i) dst[i] = normal_f();
    }

    void fill_uniform(float* dst, std::int64_t n, float lo, float hi) {
        for (std::int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(uniform(lo, hi));
    }

    // Named substream: a fresh generator whose seed mixes this generator's
    // seed with an FNV-1a hash of the name. Used to give train/sample/world
    // independent reproducible streams from one --seed.
    Rng substream(const std::string& name) const {
        std::uint64_t h = 14695981039346656037ull;
        for (unsigned char c : name) {
            h ^= c;
            h *= 1099511628211ull;
        }
        std::uint64_t x = seed_ ^ h;
        return Rng(splitmix64(x));
    }

    Rng substream(const std::string& name, std::uint64_t index) const {
        return substream(name + "#" + std::to_string(index));
    }

    static std::uint64_t splitmix64(std::uint64_t& state) {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t seed_ = 0;
    std::uint64_t s_[4] = {};
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace s2rd

#endif
