#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace loom {

// All randomness flows from one root seed through derive_seed, so any stream
// (init, batch order, noise, sampling) can be reconstructed independently of
// how many draws other streams consumed. That is what makes training resume
// and re-runs bit-identical.
uint64_t derive_seed(uint64_t root, std::string_view purpose, uint64_t a = 0, uint64_t b = 0);

// Deterministic scalar stream. Gaussians use Box-Muller on top of the raw
// 53-bit uniforms instead of std::normal_distribution, whose draw sequence
// is not pinned down by the standard.
class RandomStream {
public:
    explicit RandomStream(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    int uniform_int(int lo, int hi);

    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // index into an unnormalized weight vector
    int categorical(const double* w, int n);

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace loom
