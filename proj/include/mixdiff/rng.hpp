#pragma once

#include <cstdint>

namespace mixdiff {

uint64_t splitmix64(uint64_t& state);

// Combine values into a derived seed (used for per-sample / per-step streams).
uint64_t hash_combine(uint64_t a, uint64_t b);
uint64_t hash_combine(uint64_t a, uint64_t b, uint64_t c);

// Deterministic xoshiro256** generator with explicit seeding. Callers own
// their streams; every source of randomness in the project flows from a
// named seed through one of these.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();
    double uniform();                      // [0, 1)
    double uniform_open();                 // (0, 1]
    double normal();                       // standard normal
    int64_t below(int64_t n);              // unbiased integer in [0, n)
    int64_t range_inclusive(int64_t a, int64_t b);  // unbiased integer in [a, b]
    bool bernoulli(double p);

    // Independent derived stream (e.g. one per worker or per sample).
    Rng fork(uint64_t stream_id) const;

private:
    uint64_t s_[4];
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

}  // namespace mixdiff
