#pragma once

#include <cmath>
#include <cstdint>
#include <iterator>
#include <utility>

namespace capsdemm {

// Deterministic 64-bit PRNG used everywhere randomness is needed (weight
// init, shuffles, synthetic data). The generator is xorshift64* seeded
// through a splitmix64 scramble, so identical seeds give identical streams
// on every platform. Floating-point derivation rules:
//   uniform():  (next() >> 11) * 2^-53                     -> [0, 1)
//   gaussian(): Box-Muller on two uniform draws
// Integer draws and shuffles are defined below in terms of uniform().
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)) {
        if (state_ == 0) state_ = 0x9E3779B97F4A7C15ULL;
    }

    // Independent stream for record `index` of a dataset seeded with `seed`.
    static Rng stream(std::uint64_t seed, std::uint64_t index) {
        return Rng(splitmix64(seed) + (index + 1) * 0x9E3779B97F4A7C15ULL);
    }

    std::uint64_t next() {
        std::uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545F4914F6CDD1DULL;
    }

    double uniform() {
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Inclusive range. hi >= lo required.
    int uniform_int(int lo, int hi) {
        int span = hi - lo + 1;
        int v = lo + static_cast<int>(uniform() * span);
        return v > hi ? hi : v;
    }

    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Fisher-Yates, entries beyond index 0 swap with uniform_int(0, i).
    template <class RandomIt>
    void shuffle(RandomIt first, RandomIt last) {
        auto n = std::distance(first, last);
        for (auto i = n - 1; i > 0; --i) {
            auto j = uniform_int(0, static_cast<int>(i));
            std::swap(first[i], first[j]);
        }
    }

    static std::uint64_t splitmix64(std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace capsdemm
