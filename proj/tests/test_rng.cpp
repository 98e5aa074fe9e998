#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdint>
#include <vector>

#include <capsdemm/rng.hpp>

using capsdemm::Rng;

TEST_CASE("splitmix64 matches the published reference value") {
    REQUIRE(Rng::splitmix64(0) == 0xE220A8397B1DCDAFull);
}

TEST_CASE("identical seeds give identical draw sequences") {
    Rng a(7), b(7);
    for (int i = 0; i < 100; ++i) REQUIRE(a.uniform() == b.uniform());
}

TEST_CASE("streams of one seed are distinct and stable") {
    Rng s0 = Rng::stream(1, 0);
    Rng s1 = Rng::stream(1, 1);
    REQUIRE(s0.uniform() != s1.uniform());
    Rng again = Rng::stream(1, 0);
    Rng fresh = Rng::stream(1, 0);
    for (int i = 0; i < 16; ++i) REQUIRE(again.uniform() == fresh.uniform());
}

TEST_CASE("uniform stays in the half-open unit interval") {
    Rng rng(3);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }
}

TEST_CASE("uniform_int covers both endpoints inclusively") {
    Rng rng(5);
    bool lo = false, hi = false;
    for (int i = 0; i < 2000; ++i) {
        const int v = rng.uniform_int(2, 5);
        REQUIRE(v >= 2);
        REQUIRE(v <= 5);
        lo |= v == 2;
        hi |= v == 5;
    }
    REQUIRE(lo);
    REQUIRE(hi);
}

TEST_CASE("gaussian draws have roughly unit moments") {
    Rng rng(11);
    double sum = 0, sq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double g = rng.gaussian();
        sum += g;
        sq += g * g;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    REQUIRE(std::abs(mean) < 0.05);
    REQUIRE(var > 0.9);
    REQUIRE(var < 1.1);
}

TEST_CASE("shuffle is a permutation and depends on the seed") {
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[static_cast<std::size_t>(i)] = i;
    std::vector<int> a = v, b = v, c = v;
    Rng r1(1), r2(1), r3(2);
    r1.shuffle(a.begin(), a.end());
    r2.shuffle(b.begin(), b.end());
    r3.shuffle(c.begin(), c.end());
    REQUIRE(a == b);
    REQUIRE(a != c);
    std::sort(a.begin(), a.end());
    REQUIRE(a == v);
}
