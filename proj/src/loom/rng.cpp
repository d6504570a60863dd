#include "loom/rng.hpp"

#include <cmath>
#include <stdexcept>

#include "loom/tensor.hpp"

namespace loom {

namespace {

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace

uint64_t derive_seed(uint64_t root, std::string_view purpose, uint64_t a, uint64_t b) {
    uint64_t h = fnv1a(purpose.data(), purpose.size());
    h = splitmix64(h ^ splitmix64(root));
    h = splitmix64(h ^ splitmix64(a ^ 0x5bf03635ull));
    h = splitmix64(h ^ splitmix64(b ^ 0x1c69b3f74ac4ull));
    return h;
}

int RandomStream::uniform_int(int lo, int hi) {
    if (lo > hi) throw std::invalid_argument("uniform_int: lo > hi");
    uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
    // rejection sampling keeps the distribution exact
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
        x = gen_();
    } while (x >= limit);
    return lo + static_cast<int>(x % span);
}

double RandomStream::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller; u is kept away from 0 so the log stays finite
    double u = 0.0;
    do {
        u = uniform();
    } while (u <= 0.0);
    double v = uniform();
    double r = std::sqrt(-2.0 * std::log(u));
    double theta = 2.0 * M_PI * v;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

int RandomStream::categorical(const double* w, int n) {
    double total = 0.0;
    for (int i = 0; i < n; i++) {
        if (w[i] < 0.0) throw std::invalid_argument("categorical: negative weight");
        total += w[i];
    }
    if (total <= 0.0) throw std::invalid_argument("categorical: weights sum to zero");
    double x = uniform() * total;
    double acc = 0.0;
    for (int i = 0; i < n; i++) {
        acc += w[i];
        if (x < acc) return i;
    }
    return n - 1;
}

}  // namespace loom
